//! The pluggable backbone contract, a small fully hand-differentiated toy
//! backbone, the heatmap and auxiliary heads, and the combined loss with its
//! gradient engine.
//!
//! The toy backbone stands in for a frozen VLM: per-view patch embedding with
//! the mean instruction embedding added to every patch token, two mixing
//! layers with a per-view global context term, then three heads sharing the
//! token grid: a coarse heatmap logit per patch, convex-upsampling weight
//! logits per patch, and an MLP over six pooled tokens (3 global max-pooled +
//! 3 heatmap-peak local) producing 3 x 72 rotation logits plus gripper and
//! collision logits.
//!
//! Everything is generic over f32/f64; f64 is the shadow mode used by the
//! finite-difference gradient checks.

mod backward;
mod checkpoint;
mod train;

pub use backward::{backward, sgd_step};
pub use checkpoint::{load_checkpoint, save_checkpoint};
pub use train::{train, BatchSource, CurvePoint, SliceSource, TrainConfig, write_curve_csv};

use num_traits::Float;

use crate::error::{Error, Result};
use crate::heatmap::{convex_upsample_kernel, Heatmap};
use crate::projection::RenderedView;

/// Rotation bins per Euler axis in the auxiliary head.
pub const ROTATION_BINS: usize = crate::actionspace::ROTATION_BINS;

/// Auxiliary head output width: 3 * 72 rotation logits + gripper + collision.
pub const AUX_OUTPUTS: usize = 3 * ROTATION_BINS + 2;

/// Float abstraction so the same model runs in f32 and in the f64 shadow mode.
pub trait Scalar: Float + std::fmt::Debug + Default + Send + Sync + std::iter::Sum + 'static {
    fn of(v: f64) -> Self;
    fn as_f64(self) -> f64;
}

impl Scalar for f32 {
    fn of(v: f64) -> Self {
        v as f32
    }
    fn as_f64(self) -> f64 {
        self as f64
    }
}

impl Scalar for f64 {
    fn of(v: f64) -> Self {
        v
    }
    fn as_f64(self) -> f64 {
        self
    }
}

/// Toy backbone shape. The heatmap resolution always equals the input view
/// resolution; the coarse grid is (resolution / patch) per side.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ModelConfig {
    pub view_resolution: usize,
    pub patch: usize,
    pub feature_dim: usize,
    pub vocab: usize,
    pub aux_hidden: usize,
    /// 3 = RGB, 4 = RGB plus a normalized depth channel.
    pub input_channels: usize,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.patch == 0 || self.view_resolution % self.patch != 0 {
            return Err(Error::config(format!(
                "view resolution {} must be a positive multiple of patch {}",
                self.view_resolution, self.patch
            )));
        }
        if self.feature_dim == 0 || self.vocab == 0 || self.aux_hidden == 0 {
            return Err(Error::config("model dims must be nonzero"));
        }
        if !(self.input_channels == 3 || self.input_channels == 4) {
            return Err(Error::config("input_channels must be 3 (rgb) or 4 (rgbd)"));
        }
        Ok(())
    }

    /// Coarse token grid side length.
    pub fn grid(&self) -> usize {
        self.view_resolution / self.patch
    }

    pub fn tokens_per_view(&self) -> usize {
        self.grid() * self.grid()
    }

    pub fn patch_input(&self) -> usize {
        self.input_channels * self.patch * self.patch
    }

    pub fn upsample_rows(&self) -> usize {
        9 * self.patch * self.patch
    }
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            view_resolution: crate::projection::DEFAULT_VIEW_RESOLUTION,
            patch: 16,
            feature_dim: 32,
            vocab: VOCAB_SIZE,
            aux_hidden: 128,
            input_channels: 3,
        }
    }
}

/// All learnable parameters, as named blocks of row-major matrices.
#[derive(Debug, Clone)]
pub struct ToyBackboneParams<F: Scalar> {
    pub patch_w: Vec<F>,
    pub patch_b: Vec<F>,
    pub instr_embed: Vec<F>,
    pub mix1_w: Vec<F>,
    pub mix1_u: Vec<F>,
    pub mix1_b: Vec<F>,
    pub mix2_w: Vec<F>,
    pub mix2_u: Vec<F>,
    pub mix2_b: Vec<F>,
    pub heat_w: Vec<F>,
    pub heat_b: Vec<F>,
    pub up_w: Vec<F>,
    pub up_b: Vec<F>,
    pub aux_w1: Vec<F>,
    pub aux_b1: Vec<F>,
    pub aux_w2: Vec<F>,
    pub aux_b2: Vec<F>,
}

pub const BLOCK_NAMES: [&str; 17] = [
    "patch_w", "patch_b", "instr_embed", "mix1_w", "mix1_u", "mix1_b", "mix2_w", "mix2_u",
    "mix2_b", "heat_w", "heat_b", "up_w", "up_b", "aux_w1", "aux_b1", "aux_w2", "aux_b2",
];

impl<F: Scalar> ToyBackboneParams<F> {
    /// Block shapes (rows, cols) for `config`; vectors have cols = 1.
    pub fn block_shape(config: &ModelConfig, name: &str) -> (usize, usize) {
        let d = config.feature_dim;
        match name {
            "patch_w" => (d, config.patch_input()),
            "patch_b" => (d, 1),
            "instr_embed" => (config.vocab, d),
            "mix1_w" | "mix1_u" | "mix2_w" | "mix2_u" => (d, d),
            "mix1_b" | "mix2_b" => (d, 1),
            "heat_w" => (d, 1),
            "heat_b" => (1, 1),
            "up_w" => (config.upsample_rows(), d),
            "up_b" => (config.upsample_rows(), 1),
            "aux_w1" => (config.aux_hidden, 6 * d),
            "aux_b1" => (config.aux_hidden, 1),
            "aux_w2" => (AUX_OUTPUTS, config.aux_hidden),
            "aux_b2" => (AUX_OUTPUTS, 1),
            _ => panic!("unknown block {name}"),
        }
    }

    pub fn zeros(config: &ModelConfig) -> Self {
        let mk = |name: &str| {
            let (r, c) = Self::block_shape(config, name);
            vec![F::zero(); r * c]
        };
        ToyBackboneParams {
            patch_w: mk("patch_w"),
            patch_b: mk("patch_b"),
            instr_embed: mk("instr_embed"),
            mix1_w: mk("mix1_w"),
            mix1_u: mk("mix1_u"),
            mix1_b: mk("mix1_b"),
            mix2_w: mk("mix2_w"),
            mix2_u: mk("mix2_u"),
            mix2_b: mk("mix2_b"),
            heat_w: mk("heat_w"),
            heat_b: mk("heat_b"),
            up_w: mk("up_w"),
            up_b: mk("up_b"),
            aux_w1: mk("aux_w1"),
            aux_b1: mk("aux_b1"),
            aux_w2: mk("aux_w2"),
            aux_b2: mk("aux_b2"),
        }
    }

    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        for name in BLOCK_NAMES {
            z.block_mut(name).iter_mut().for_each(|v| *v = F::zero());
        }
        z
    }

    pub fn block_names(&self) -> &'static [&'static str] {
        &BLOCK_NAMES
    }

    pub fn block(&self, name: &str) -> &[F] {
        match name {
            "patch_w" => &self.patch_w,
            "patch_b" => &self.patch_b,
            "instr_embed" => &self.instr_embed,
            "mix1_w" => &self.mix1_w,
            "mix1_u" => &self.mix1_u,
            "mix1_b" => &self.mix1_b,
            "mix2_w" => &self.mix2_w,
            "mix2_u" => &self.mix2_u,
            "mix2_b" => &self.mix2_b,
            "heat_w" => &self.heat_w,
            "heat_b" => &self.heat_b,
            "up_w" => &self.up_w,
            "up_b" => &self.up_b,
            "aux_w1" => &self.aux_w1,
            "aux_b1" => &self.aux_b1,
            "aux_w2" => &self.aux_w2,
            "aux_b2" => &self.aux_b2,
            _ => panic!("unknown block {name}"),
        }
    }

    pub fn block_mut(&mut self, name: &str) -> &mut Vec<F> {
        match name {
            "patch_w" => &mut self.patch_w,
            "patch_b" => &mut self.patch_b,
            "instr_embed" => &mut self.instr_embed,
            "mix1_w" => &mut self.mix1_w,
            "mix1_u" => &mut self.mix1_u,
            "mix1_b" => &mut self.mix1_b,
            "mix2_w" => &mut self.mix2_w,
            "mix2_u" => &mut self.mix2_u,
            "mix2_b" => &mut self.mix2_b,
            "heat_w" => &mut self.heat_w,
            "heat_b" => &mut self.heat_b,
            "up_w" => &mut self.up_w,
            "up_b" => &mut self.up_b,
            "aux_w1" => &mut self.aux_w1,
            "aux_b1" => &mut self.aux_b1,
            "aux_w2" => &mut self.aux_w2,
            "aux_b2" => &mut self.aux_b2,
            _ => panic!("unknown block {name}"),
        }
    }

    pub fn total_len(&self) -> usize {
        BLOCK_NAMES.iter().map(|n| self.block(n).len()).sum()
    }

    pub fn validate(&self, config: &ModelConfig) -> Result<()> {
        for name in BLOCK_NAMES {
            let (r, c) = Self::block_shape(config, name);
            let data = self.block(name);
            if data.len() != r * c {
                return Err(Error::config(format!(
                    "block {name}: expected {} values, found {}",
                    r * c,
                    data.len()
                )));
            }
            if data.iter().any(|v| !v.as_f64().is_finite()) {
                return Err(Error::config(format!("block {name} contains non-finite values")));
            }
        }
        Ok(())
    }

    pub fn convert<G: Scalar>(&self) -> ToyBackboneParams<G> {
        let mut out: ToyBackboneParams<G> = ToyBackboneParams {
            patch_w: vec![],
            patch_b: vec![],
            instr_embed: vec![],
            mix1_w: vec![],
            mix1_u: vec![],
            mix1_b: vec![],
            mix2_w: vec![],
            mix2_u: vec![],
            mix2_b: vec![],
            heat_w: vec![],
            heat_b: vec![],
            up_w: vec![],
            up_b: vec![],
            aux_w1: vec![],
            aux_b1: vec![],
            aux_w2: vec![],
            aux_b2: vec![],
        };
        for name in BLOCK_NAMES {
            *out.block_mut(name) = self.block(name).iter().map(|v| G::of(v.as_f64())).collect();
        }
        out
    }
}

/// Seeded parameter initialization: weights uniform in +-1/sqrt(fan_in),
/// biases zero. Values are drawn in f64 so f32 and f64 instances agree.
pub fn init_params<F: Scalar>(config: &ModelConfig, seed: u64) -> ToyBackboneParams<F> {
    use rand::Rng;
    let mut params = ToyBackboneParams::zeros(config);
    for (i, name) in BLOCK_NAMES.iter().enumerate() {
        if name.ends_with("_b") {
            continue;
        }
        let (_, cols) = ToyBackboneParams::<F>::block_shape(config, name);
        // Embedding rows act as summands, scale by feature dim instead.
        let fan_in = if *name == "instr_embed" { config.feature_dim } else { cols };
        let bound = 1.0 / (fan_in as f64).sqrt();
        let mut rng = crate::rng::derive_rng(seed, "init", i as u64);
        for v in params.block_mut(name).iter_mut() {
            *v = F::of(rng.random_range(-bound..bound));
        }
    }
    params
}

/// Fixed instruction vocabulary; id 0 is the unknown token.
pub const VOCAB: [&str; 40] = [
    "<unk>", "the", "a", "to", "on", "onto", "into", "it", "and", "of", "reach", "press", "pick",
    "place", "put", "insert", "touch", "grasp", "find", "locate", "red", "green", "blue",
    "yellow", "purple", "cyan", "orange", "white", "black", "gray", "block", "cube", "plate",
    "button", "peg", "socket", "marker", "table", "target", "object",
];

pub const VOCAB_SIZE: usize = 64;

/// Whitespace tokenizer over the fixed vocabulary; unknown words map to 0.
pub fn tokenize(text: &str) -> Vec<u32> {
    text.split_whitespace()
        .map(|w| {
            let w = w.trim_matches(|c: char| !c.is_alphanumeric()).to_lowercase();
            VOCAB.iter().position(|&v| v == w).unwrap_or(0) as u32
        })
        .collect()
}

/// Channel-interleaved view input: `(v * R + u) * C + c`. RGB comes from the
/// rendered color; the optional fourth channel is depth normalized by the
/// cuboid's along-axis extent, 1 for empty pixels.
pub fn view_input<F: Scalar>(view: &RenderedView, channels: usize) -> Vec<F> {
    let r = view.resolution();
    let mut out = Vec::with_capacity(r * r * channels);
    let ext = view.spec.cuboid.extent();
    let along = match view.spec.axis {
        crate::projection::ViewAxis::Top => ext.z,
        crate::projection::ViewAxis::Front => ext.y,
        crate::projection::ViewAxis::Right => ext.x,
    };
    for i in 0..r * r {
        let c = view.color[i];
        out.push(F::of(c[0]));
        out.push(F::of(c[1]));
        out.push(F::of(c[2]));
        if channels == 4 {
            let d = view.depth[i];
            let nd = if d.is_finite() { (d / along).clamp(0.0, 1.0) } else { 1.0 };
            out.push(F::of(nd));
        }
    }
    out
}

/// RGB image (row-major [0,1] floats) as a view input, for pre-training data.
pub fn image_input<F: Scalar>(pixels: &[[f64; 3]], channels: usize) -> Vec<F> {
    let mut out = Vec::with_capacity(pixels.len() * channels);
    for p in pixels {
        out.push(F::of(p[0]));
        out.push(F::of(p[1]));
        out.push(F::of(p[2]));
        if channels == 4 {
            out.push(F::of(1.0));
        }
    }
    out
}

/// Supervision targets for one sample. Pre-training supervises only the
/// heatmaps; fine-tuning supervises all four terms.
#[derive(Debug, Clone)]
pub struct Target<F: Scalar> {
    pub gt_heatmaps: [Vec<F>; 3],
    pub rotation_bins: [u8; 3],
    pub gripper: bool,
    pub collision: bool,
}

/// One training sample: three view inputs, instruction tokens, targets.
#[derive(Debug, Clone)]
pub struct Sample<F: Scalar> {
    pub views: [Vec<F>; 3],
    pub tokens: Vec<u32>,
    pub target: Target<F>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TrainMode {
    Pretrain,
    Finetune,
}

/// Loss components; total is their sum.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct LossBreakdown {
    pub trans: f64,
    pub rot: f64,
    pub gripper: f64,
    pub collision: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn add(&mut self, o: &LossBreakdown) {
        self.trans += o.trans;
        self.rot += o.rot;
        self.gripper += o.gripper;
        self.collision += o.collision;
        self.total += o.total;
    }

    pub fn scale(&mut self, s: f64) {
        self.trans *= s;
        self.rot *= s;
        self.gripper *= s;
        self.collision *= s;
        self.total *= s;
    }
}

/// Per-view activations kept for the backward pass.
#[derive(Debug, Clone)]
pub struct ViewTrace<F: Scalar> {
    /// Patch inputs, tokens x patch_input.
    pub patches: Vec<F>,
    pub t0: Vec<F>,
    pub pre1: Vec<F>,
    pub t1: Vec<F>,
    pub mean1: Vec<F>,
    pub pre2: Vec<F>,
    pub t2: Vec<F>,
    /// Coarse heatmap logits, one per token.
    pub coarse: Vec<F>,
    /// Convex upsample weights (softmaxed), tokens x patch^2 x 9.
    pub up_weights: Vec<F>,
    /// Full-resolution logits.
    pub fine_logits: Vec<F>,
    /// Softmax over all pixels.
    pub fine_probs: Vec<F>,
    /// Component-wise argmax token per feature dim (global max-pool routing).
    pub global_argmax: Vec<usize>,
    pub global_token: Vec<F>,
    /// Token whose cell contains the fine heatmap peak.
    pub peak_token: usize,
    pub peak_pixel: (usize, usize),
}

/// Full forward trace: per-view traces plus the auxiliary head.
#[derive(Debug, Clone)]
pub struct ForwardOutput<F: Scalar> {
    pub views: [ViewTrace<F>; 3],
    pub instr_mean: Vec<F>,
    pub token_ids: Vec<u32>,
    pub aux_in: Vec<F>,
    pub aux_pre: Vec<F>,
    pub aux_hidden: Vec<F>,
    pub aux_out: Vec<F>,
    pub rotation_probs: [Vec<F>; 3],
    pub gripper_prob: F,
    pub collision_prob: F,
}

impl<F: Scalar> ForwardOutput<F> {
    /// Predicted rotation bins (argmax per axis, ties to the lowest bin).
    pub fn rotation_bins(&self) -> [u8; 3] {
        let mut bins = [0u8; 3];
        for axis in 0..3 {
            let probs = &self.rotation_probs[axis];
            let mut best = 0usize;
            for k in 1..probs.len() {
                if probs[k] > probs[best] {
                    best = k;
                }
            }
            bins[axis] = best as u8;
        }
        bins
    }

    pub fn gripper_bit(&self) -> bool {
        self.gripper_prob.as_f64() >= 0.5
    }

    pub fn collision_bit(&self) -> bool {
        self.collision_prob.as_f64() >= 0.5
    }

    /// Predicted heatmap for a view as an exactly normalized f64 distribution.
    pub fn heatmap(&self, view: usize, resolution: usize) -> Heatmap {
        let probs = &self.views[view].fine_probs;
        let mut vals: Vec<f64> = probs.iter().map(|p| p.as_f64().max(0.0)).collect();
        let total: f64 = vals.iter().sum();
        for v in vals.iter_mut() {
            *v /= total;
        }
        Heatmap::from_values(vals, resolution).expect("softmax output is a distribution")
    }
}

fn softmax_in_place<F: Scalar>(vals: &mut [F]) {
    let mut max = F::neg_infinity();
    for &v in vals.iter() {
        if v > max {
            max = v;
        }
    }
    let mut sum = F::zero();
    for v in vals.iter_mut() {
        *v = (*v - max).exp();
        sum = sum + *v;
    }
    for v in vals.iter_mut() {
        *v = *v / sum;
    }
}

fn sigmoid<F: Scalar>(x: F) -> F {
    F::one() / (F::one() + (-x).exp())
}

/// Mean instruction embedding; zero vector for an empty token list.
fn instruction_mean<F: Scalar>(params: &ToyBackboneParams<F>, config: &ModelConfig, tokens: &[u32]) -> Vec<F> {
    let d = config.feature_dim;
    let mut mean = vec![F::zero(); d];
    if tokens.is_empty() {
        return mean;
    }
    for &t in tokens {
        let row = (t as usize).min(config.vocab - 1) * d;
        for k in 0..d {
            mean[k] = mean[k] + params.instr_embed[row + k];
        }
    }
    let inv = F::of(1.0 / tokens.len() as f64);
    for m in mean.iter_mut() {
        *m = *m * inv;
    }
    mean
}

/// y[rows] += m[rows x cols] * x[cols]
fn matvec_acc<F: Scalar>(m: &[F], rows: usize, cols: usize, x: &[F], y: &mut [F]) {
    debug_assert_eq!(m.len(), rows * cols);
    for r in 0..rows {
        let row = &m[r * cols..(r + 1) * cols];
        let mut acc = F::zero();
        for (a, b) in row.iter().zip(x) {
            acc = acc + *a * *b;
        }
        y[r] = y[r] + acc;
    }
}

fn forward_view<F: Scalar>(
    params: &ToyBackboneParams<F>,
    config: &ModelConfig,
    pixels: &[F],
    instr_mean: &[F],
) -> ViewTrace<F> {
    let r = config.view_resolution;
    let p = config.patch;
    let g = config.grid();
    let t = config.tokens_per_view();
    let d = config.feature_dim;
    let c = config.input_channels;
    let pin = config.patch_input();
    debug_assert_eq!(pixels.len(), r * r * c);

    // Gather patch inputs.
    let mut patches = vec![F::zero(); t * pin];
    for gv in 0..g {
        for gu in 0..g {
            let tok = gv * g + gu;
            let dst = &mut patches[tok * pin..(tok + 1) * pin];
            let mut k = 0;
            for pv in 0..p {
                let row = (gv * p + pv) * r + gu * p;
                let src = &pixels[row * c..(row + p) * c];
                dst[k..k + p * c].copy_from_slice(src);
                k += p * c;
            }
        }
    }

    // Token embedding plus instruction conditioning.
    let mut t0 = vec![F::zero(); t * d];
    for tok in 0..t {
        let x = &patches[tok * pin..(tok + 1) * pin];
        let out = &mut t0[tok * d..(tok + 1) * d];
        out.copy_from_slice(&params.patch_b);
        matvec_acc(&params.patch_w, d, pin, x, out);
        for k in 0..d {
            out[k] = out[k] + instr_mean[k];
        }
    }

    let token_mean = |data: &[F]| -> Vec<F> {
        let mut mean = vec![F::zero(); d];
        for tok in 0..t {
            for k in 0..d {
                mean[k] = mean[k] + data[tok * d + k];
            }
        }
        let inv = F::of(1.0 / t as f64);
        mean.iter_mut().for_each(|m| *m = *m * inv);
        mean
    };

    // Mixing layer 1: W x + U mean + b, relu.
    let mean0 = token_mean(&t0);
    let mut ctx1 = params.mix1_b.clone();
    matvec_acc(&params.mix1_u, d, d, &mean0, &mut ctx1);
    let mut pre1 = vec![F::zero(); t * d];
    for tok in 0..t {
        let out = &mut pre1[tok * d..(tok + 1) * d];
        out.copy_from_slice(&ctx1);
        matvec_acc(&params.mix1_w, d, d, &t0[tok * d..(tok + 1) * d], out);
    }
    let t1: Vec<F> = pre1.iter().map(|&v| if v > F::zero() { v } else { F::zero() }).collect();

    // Mixing layer 2.
    let mean1 = token_mean(&t1);
    let mut ctx2 = params.mix2_b.clone();
    matvec_acc(&params.mix2_u, d, d, &mean1, &mut ctx2);
    let mut pre2 = vec![F::zero(); t * d];
    for tok in 0..t {
        let out = &mut pre2[tok * d..(tok + 1) * d];
        out.copy_from_slice(&ctx2);
        matvec_acc(&params.mix2_w, d, d, &t1[tok * d..(tok + 1) * d], out);
    }
    let t2: Vec<F> = pre2.iter().map(|&v| if v > F::zero() { v } else { F::zero() }).collect();

    // Heatmap head: scalar coarse logit per token.
    let mut coarse = vec![F::zero(); t];
    for tok in 0..t {
        let mut acc = params.heat_b[0];
        for k in 0..d {
            acc = acc + params.heat_w[k] * t2[tok * d + k];
        }
        coarse[tok] = acc;
    }

    // Upsample-weight head: 9 p^2 logits per token, softmaxed per 9-group.
    let rows = config.upsample_rows();
    let mut up_weights = vec![F::zero(); t * rows];
    for tok in 0..t {
        let out = &mut up_weights[tok * rows..(tok + 1) * rows];
        out.copy_from_slice(&params.up_b);
        matvec_acc(&params.up_w, rows, d, &t2[tok * d..(tok + 1) * d], out);
        for group in out.chunks_exact_mut(9) {
            softmax_in_place(group);
        }
    }

    // Convex upsampling to full resolution, then softmax over all pixels.
    let mut fine_logits = vec![F::zero(); r * r];
    convex_upsample_kernel(&coarse, g, &up_weights, p, &mut fine_logits);
    let mut fine_probs = fine_logits.clone();
    softmax_in_place(&mut fine_probs);

    // Global token: component-wise max over tokens, remembering the winners.
    let mut global_token = vec![F::neg_infinity(); d];
    let mut global_argmax = vec![0usize; d];
    for tok in 0..t {
        for k in 0..d {
            let v = t2[tok * d + k];
            if v > global_token[k] {
                global_token[k] = v;
                global_argmax[k] = tok;
            }
        }
    }

    // Local token: the patch containing the heatmap peak (lowest flat index
    // on ties, via strict comparison).
    let mut peak = 0usize;
    for i in 1..fine_logits.len() {
        if fine_logits[i] > fine_logits[peak] {
            peak = i;
        }
    }
    let (pu, pv) = (peak % r, peak / r);
    let peak_token = (pv / p) * g + (pu / p);

    ViewTrace {
        patches,
        t0,
        pre1,
        t1,
        mean1,
        pre2,
        t2,
        coarse,
        up_weights,
        fine_logits,
        fine_probs,
        global_argmax,
        global_token,
        peak_token,
        peak_pixel: (pu, pv),
    }
}

/// Full forward pass over three views and the instruction.
pub fn forward<F: Scalar>(
    params: &ToyBackboneParams<F>,
    config: &ModelConfig,
    views: &[Vec<F>; 3],
    tokens: &[u32],
) -> ForwardOutput<F> {
    let d = config.feature_dim;
    let instr_mean = instruction_mean(params, config, tokens);
    let traces: [ViewTrace<F>; 3] = [
        forward_view(params, config, &views[0], &instr_mean),
        forward_view(params, config, &views[1], &instr_mean),
        forward_view(params, config, &views[2], &instr_mean),
    ];

    // Aux head input: 3 global tokens then 3 local tokens.
    let mut aux_in = vec![F::zero(); 6 * d];
    for (v, trace) in traces.iter().enumerate() {
        aux_in[v * d..(v + 1) * d].copy_from_slice(&trace.global_token);
        let local = &trace.t2[trace.peak_token * d..(trace.peak_token + 1) * d];
        aux_in[(3 + v) * d..(4 + v) * d].copy_from_slice(local);
    }
    let mut aux_pre = params.aux_b1.clone();
    matvec_acc(&params.aux_w1, config.aux_hidden, 6 * d, &aux_in, &mut aux_pre);
    let aux_hidden: Vec<F> = aux_pre.iter().map(|&v| if v > F::zero() { v } else { F::zero() }).collect();
    let mut aux_out = params.aux_b2.clone();
    matvec_acc(&params.aux_w2, AUX_OUTPUTS, config.aux_hidden, &aux_hidden, &mut aux_out);

    let mut rotation_probs: [Vec<F>; 3] = [vec![], vec![], vec![]];
    for axis in 0..3 {
        let mut probs = aux_out[axis * ROTATION_BINS..(axis + 1) * ROTATION_BINS].to_vec();
        softmax_in_place(&mut probs);
        rotation_probs[axis] = probs;
    }
    let gripper_prob = sigmoid(aux_out[3 * ROTATION_BINS]);
    let collision_prob = sigmoid(aux_out[3 * ROTATION_BINS + 1]);

    ForwardOutput {
        views: traces,
        instr_mean,
        token_ids: tokens.to_vec(),
        aux_in,
        aux_pre,
        aux_hidden,
        aux_out,
        rotation_probs,
        gripper_prob,
        collision_prob,
    }
}

/// Combined loss: heatmap cross-entropy averaged over views, 72-way rotation
/// cross-entropy summed over axes, binary cross-entropies for the bits.
/// Pre-training supervises only the heatmap term.
pub fn loss<F: Scalar>(out: &ForwardOutput<F>, target: &Target<F>, mode: TrainMode) -> LossBreakdown {
    let mut trans = 0.0f64;
    for (trace, gt) in out.views.iter().zip(&target.gt_heatmaps) {
        debug_assert_eq!(trace.fine_probs.len(), gt.len());
        let mut ce = 0.0f64;
        for (&p, &g) in trace.fine_probs.iter().zip(gt) {
            let g = g.as_f64();
            if g > 0.0 {
                ce -= g * p.as_f64().max(f64::MIN_POSITIVE).ln();
            }
        }
        trans += ce / 3.0;
    }
    let (mut rot, mut gripper, mut collision) = (0.0f64, 0.0f64, 0.0f64);
    if mode == TrainMode::Finetune {
        for axis in 0..3 {
            let p = out.rotation_probs[axis][target.rotation_bins[axis] as usize].as_f64();
            rot -= p.max(f64::MIN_POSITIVE).ln();
        }
        let bce = |p: f64, bit: bool| {
            let p = p.clamp(f64::MIN_POSITIVE, 1.0 - 1e-15);
            if bit {
                -p.ln()
            } else {
                -(1.0 - p).ln()
            }
        };
        gripper = bce(out.gripper_prob.as_f64(), target.gripper);
        collision = bce(out.collision_prob.as_f64(), target.collision);
    }
    LossBreakdown {
        trans,
        rot,
        gripper,
        collision,
        total: trans + rot + gripper + collision,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn tiny_config() -> ModelConfig {
        ModelConfig {
            view_resolution: 32,
            patch: 16,
            feature_dim: 8,
            vocab: 16,
            aux_hidden: 12,
            input_channels: 3,
        }
    }

    fn random_views<F: Scalar>(config: &ModelConfig, seed: u64) -> [Vec<F>; 3] {
        let mut rng = crate::rng::derive_rng(seed, "model-test-views", 0);
        let n = config.view_resolution * config.view_resolution * config.input_channels;
        let mut mk = || (0..n).map(|_| F::of(rng.random_range(0.0..1.0))).collect::<Vec<F>>();
        [mk(), mk(), mk()]
    }

    fn random_target<F: Scalar>(config: &ModelConfig, seed: u64) -> Target<F> {
        let mut rng = crate::rng::derive_rng(seed, "model-test-target", 0);
        let r = config.view_resolution;
        let spec = crate::heatmap::HeatmapSpec::default();
        let mut mk = || {
            let center = (rng.random_range(2.0..r as f64 - 2.0), rng.random_range(2.0..r as f64 - 2.0));
            let hm = crate::heatmap::fuse_and_normalize(&[crate::heatmap::single_object_map(center, &spec, r)]).unwrap();
            hm.values().iter().map(|&v| F::of(v)).collect::<Vec<F>>()
        };
        Target {
            gt_heatmaps: [mk(), mk(), mk()],
            rotation_bins: [
                rng.random_range(0..72) as u8,
                rng.random_range(0..72) as u8,
                rng.random_range(0..72) as u8,
            ],
            gripper: rng.random_range(0..2) == 1,
            collision: rng.random_range(0..2) == 1,
        }
    }

    #[test]
    fn zero_params_give_uniform_heatmaps_and_half_probabilities() {
        let config = tiny_config();
        let params = ToyBackboneParams::<f64>::zeros(&config);
        let views = random_views::<f64>(&config, 1);
        let out = forward(&params, &config, &views, &[1, 2, 3]);
        let n = (config.view_resolution * config.view_resolution) as f64;
        for trace in &out.views {
            for &p in &trace.fine_probs {
                assert!((p - 1.0 / n).abs() < 1e-12);
            }
        }
        assert!((out.gripper_prob - 0.5).abs() < 1e-12);
        assert!((out.collision_prob - 0.5).abs() < 1e-12);
        for axis in 0..3 {
            for &p in &out.rotation_probs[axis] {
                assert!((p - 1.0 / 72.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn uniform_prediction_loss_closed_forms() {
        let config = tiny_config();
        let params = ToyBackboneParams::<f64>::zeros(&config);
        let views = random_views::<f64>(&config, 2);
        let target = random_target::<f64>(&config, 3);
        let out = forward(&params, &config, &views, &[4]);
        let breakdown = loss(&out, &target, TrainMode::Finetune);
        let n = (config.view_resolution * config.view_resolution) as f64;
        assert!((breakdown.trans - n.ln()).abs() < 1e-9, "trans {}", breakdown.trans);
        assert!((breakdown.rot - 3.0 * 72.0f64.ln()).abs() < 1e-9);
        assert!((breakdown.gripper - 2.0f64.ln()).abs() < 1e-9);
        assert!((breakdown.collision - 2.0f64.ln()).abs() < 1e-9);
        let sum = breakdown.trans + breakdown.rot + breakdown.gripper + breakdown.collision;
        assert!((breakdown.total - sum).abs() < 1e-9);

        let pre = loss(&out, &target, TrainMode::Pretrain);
        assert_eq!(pre.rot, 0.0);
        assert_eq!(pre.gripper, 0.0);
        assert!((pre.total - pre.trans).abs() < 1e-12);
    }

    #[test]
    fn permuting_views_permutes_heatmaps() {
        let config = tiny_config();
        let params = init_params::<f64>(&config, 11);
        let views = random_views::<f64>(&config, 12);
        let tokens = [5u32, 9, 2];
        let out = forward(&params, &config, &views, &tokens);
        let permuted = [views[2].clone(), views[0].clone(), views[1].clone()];
        let out_p = forward(&params, &config, &permuted, &tokens);
        assert_eq!(out.views[2].fine_probs, out_p.views[0].fine_probs);
        assert_eq!(out.views[0].fine_probs, out_p.views[1].fine_probs);
        assert_eq!(out.views[1].fine_probs, out_p.views[2].fine_probs);
    }

    #[test]
    fn forward_is_deterministic() {
        let config = tiny_config();
        let params = init_params::<f32>(&config, 21);
        let views = random_views::<f32>(&config, 22);
        let a = forward(&params, &config, &views, &[1, 2]);
        let b = forward(&params, &config, &views, &[1, 2]);
        assert_eq!(a.views[0].fine_probs, b.views[0].fine_probs);
        assert_eq!(a.aux_out, b.aux_out);
    }

    #[test]
    fn predicted_heatmaps_are_exactly_normalized() {
        let config = tiny_config();
        let params = init_params::<f32>(&config, 31);
        let views = random_views::<f32>(&config, 32);
        let out = forward(&params, &config, &views, &[7]);
        for v in 0..3 {
            let hm = out.heatmap(v, config.view_resolution);
            let sum: f64 = hm.values().iter().sum();
            assert!((sum - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn upsampled_logits_bounded_by_coarse_neighborhood() {
        let config = tiny_config();
        let params = init_params::<f64>(&config, 41);
        let views = random_views::<f64>(&config, 42);
        let out = forward(&params, &config, &views, &[3, 3]);
        let g = config.grid();
        let p = config.patch;
        for trace in &out.views {
            for fv in 0..config.view_resolution {
                for fu in 0..config.view_resolution {
                    let (cu, cv) = (fu / p, fv / p);
                    let mut lo = f64::INFINITY;
                    let mut hi = f64::NEG_INFINITY;
                    for dy in -1i64..=1 {
                        for dx in -1i64..=1 {
                            let ny = (cv as i64 + dy).clamp(0, g as i64 - 1) as usize;
                            let nx = (cu as i64 + dx).clamp(0, g as i64 - 1) as usize;
                            lo = lo.min(trace.coarse[ny * g + nx]);
                            hi = hi.max(trace.coarse[ny * g + nx]);
                        }
                    }
                    let v = trace.fine_logits[fv * config.view_resolution + fu];
                    assert!(v >= lo - 1e-12 && v <= hi + 1e-12);
                }
            }
        }
    }

    #[test]
    fn tokenizer_maps_known_words_and_unknowns() {
        let tokens = tokenize("Reach the RED block,");
        assert_eq!(tokens.len(), 4);
        assert_eq!(tokens[0], VOCAB.iter().position(|&w| w == "reach").unwrap() as u32);
        assert_eq!(tokens[1], VOCAB.iter().position(|&w| w == "the").unwrap() as u32);
        assert_eq!(tokens[2], VOCAB.iter().position(|&w| w == "red").unwrap() as u32);
        assert_eq!(tokens[3], VOCAB.iter().position(|&w| w == "block").unwrap() as u32);
        assert_eq!(tokenize("zzzqqq")[0], 0);
    }

    #[test]
    fn invalid_model_configs_rejected() {
        let mut config = tiny_config();
        config.view_resolution = 33;
        assert!(config.validate().is_err());
        config.view_resolution = 32;
        config.input_channels = 5;
        assert!(config.validate().is_err());
    }
}
