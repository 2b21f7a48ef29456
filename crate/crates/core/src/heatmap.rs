//! Ground-truth heatmap construction (truncated Gaussian single-object maps,
//! fuse-and-normalize), heatmap cross-entropy, and the convex upsampling
//! operator that turns coarse logit grids into full-resolution maps.
//!
//! Pixels are sampled at their centers (i + 0.5, j + 0.5) so peaks stay
//! symmetric regardless of resolution parity.

use std::path::Path;

use num_traits::Float;

use crate::error::{Error, Result};
use crate::io;
use crate::math::Vec3;
use crate::projection::{world_to_pixel, OrthoViewSpec};

/// Normalization tolerance for heatmaps labeled normalized.
pub const NORMALIZATION_TOL: f64 = 1e-6;

/// Default Gaussian width (px) for action-target maps.
pub const DEFAULT_ACTION_SIGMA_PX: f64 = 1.5;

/// Default truncation threshold.
pub const DEFAULT_P_MIN: f64 = 0.05;

/// Minimum per-object Gaussian width (px) for grounding targets derived from
/// box sizes.
pub const MIN_GROUNDING_SIGMA_PX: f64 = 2.0;

/// Raw (unnormalized) square pixel grid: truncated Gaussians, logits, etc.
#[derive(Debug, Clone)]
pub struct PixelMap {
    pub values: Vec<f64>,
    pub resolution: usize,
}

impl PixelMap {
    pub fn zeros(resolution: usize) -> Self {
        PixelMap { values: vec![0.0; resolution * resolution], resolution }
    }

    pub fn at(&self, u: usize, v: usize) -> f64 {
        self.values[v * self.resolution + u]
    }
}

/// A normalized probability distribution over an R x R pixel grid.
#[derive(Debug, Clone)]
pub struct Heatmap {
    values: Vec<f64>,
    resolution: usize,
}

impl Heatmap {
    pub fn from_values(values: Vec<f64>, resolution: usize) -> Result<Self> {
        if values.len() != resolution * resolution {
            return Err(Error::config(format!(
                "heatmap buffer length {} does not match resolution {}",
                values.len(),
                resolution
            )));
        }
        let mut sum = 0.0;
        for &v in &values {
            if !v.is_finite() || v < 0.0 {
                return Err(Error::config(format!("heatmap value {v} invalid")));
            }
            sum += v;
        }
        if (sum - 1.0).abs() > NORMALIZATION_TOL {
            return Err(Error::config(format!("heatmap sums to {sum}, expected 1")));
        }
        Ok(Heatmap { values, resolution })
    }

    pub fn uniform(resolution: usize) -> Self {
        let n = resolution * resolution;
        Heatmap { values: vec![1.0 / n as f64; n], resolution }
    }

    pub fn resolution(&self) -> usize {
        self.resolution
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn at(&self, u: usize, v: usize) -> f64 {
        self.values[v * self.resolution + u]
    }

    /// Peak pixel (u, v); ties break to the lowest flat index.
    pub fn argmax(&self) -> (usize, usize) {
        let mut best = 0usize;
        let mut best_v = f64::NEG_INFINITY;
        for (i, &v) in self.values.iter().enumerate() {
            if v > best_v {
                best_v = v;
                best = i;
            }
        }
        (best % self.resolution, best / self.resolution)
    }
}

/// Gaussian width and truncation threshold for single-object maps.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HeatmapSpec {
    pub sigma_px: f64,
    pub p_min: f64,
}

impl HeatmapSpec {
    pub fn new(sigma_px: f64, p_min: f64) -> Result<Self> {
        if !(sigma_px > 0.0) {
            return Err(Error::config(format!("sigma must be positive, got {sigma_px}")));
        }
        if !(0.0..1.0).contains(&p_min) {
            return Err(Error::config(format!("p_min must be in [0, 1), got {p_min}")));
        }
        Ok(HeatmapSpec { sigma_px, p_min })
    }

    /// Radius (px) beyond which the truncated Gaussian is exactly zero;
    /// infinite when p_min = 0.
    pub fn truncation_radius(&self) -> f64 {
        if self.p_min == 0.0 {
            f64::INFINITY
        } else {
            self.sigma_px * (-2.0 * self.p_min.ln()).sqrt()
        }
    }
}

impl Default for HeatmapSpec {
    fn default() -> Self {
        HeatmapSpec { sigma_px: DEFAULT_ACTION_SIGMA_PX, p_min: DEFAULT_P_MIN }
    }
}

/// Truncated Gaussian probability map around `center` (continuous px):
/// value at pixel x is exp(-|x - center|^2 / 2 sigma^2) where that is
/// >= p_min, else exactly 0. The center may lie outside the image.
pub fn single_object_map(center: (f64, f64), spec: &HeatmapSpec, resolution: usize) -> PixelMap {
    let mut map = PixelMap::zeros(resolution);
    let inv = 1.0 / (2.0 * spec.sigma_px * spec.sigma_px);
    for v in 0..resolution {
        for u in 0..resolution {
            let du = u as f64 + 0.5 - center.0;
            let dv = v as f64 + 0.5 - center.1;
            let p = (-(du * du + dv * dv) * inv).exp();
            if p >= spec.p_min {
                map.values[v * resolution + u] = p;
            }
        }
    }
    map
}

/// Average the maps and normalize the result to sum 1.
pub fn fuse_and_normalize(maps: &[PixelMap]) -> Result<Heatmap> {
    if maps.is_empty() {
        return Err(Error::config("fuse_and_normalize needs at least one map"));
    }
    let resolution = maps[0].resolution;
    if maps.iter().any(|m| m.resolution != resolution) {
        return Err(Error::config("fuse_and_normalize maps must share one resolution"));
    }
    let n = resolution * resolution;
    let inv_count = 1.0 / maps.len() as f64;
    let mut avg = vec![0.0f64; n];
    for m in maps {
        for (a, &v) in avg.iter_mut().zip(&m.values) {
            *a += v;
        }
    }
    for a in avg.iter_mut() {
        *a *= inv_count;
    }
    let total: f64 = avg.iter().sum();
    if total <= 0.0 {
        return Err(Error::DegenerateTarget(
            "all-zero aggregate heatmap (every contribution truncated)".into(),
        ));
    }
    for a in avg.iter_mut() {
        *a /= total;
    }
    Ok(Heatmap { values: avg, resolution })
}

/// Ground-truth action heatmap for one view: a single-object map at the
/// target's projected pixel position, normalized.
pub fn action_target_map(target: Vec3, view: &OrthoViewSpec, spec: &HeatmapSpec) -> Result<Heatmap> {
    let center = world_to_pixel(target, view)?;
    fuse_and_normalize(&[single_object_map(center, spec, view.resolution)])
}

/// -sum gt(x) ln pred(x). Requires pred > 0 wherever gt > 0.
pub fn cross_entropy(pred: &Heatmap, gt: &Heatmap) -> f64 {
    assert_eq!(pred.resolution, gt.resolution, "cross_entropy resolution mismatch");
    let mut loss = 0.0;
    for (&p, &g) in pred.values.iter().zip(&gt.values) {
        if g > 0.0 {
            loss -= g * p.max(f64::MIN_POSITIVE).ln();
        }
    }
    loss
}

/// Shannon entropy of a normalized heatmap (the cross-entropy floor).
pub fn entropy(h: &Heatmap) -> f64 {
    h.values.iter().filter(|&&p| p > 0.0).map(|&p| -p * p.ln()).sum()
}

/// Per coarse cell and sub-pixel position, 9 convex weights over the 3x3
/// coarse neighborhood. Layout: [cell_v][cell_u][sub_v][sub_u][9], with the
/// 9 neighbors ordered row-major (dy, dx) in {-1, 0, 1}^2.
#[derive(Debug, Clone)]
pub struct UpsampleWeights {
    weights: Vec<f64>,
    coarse_res: usize,
    factor: usize,
}

impl UpsampleWeights {
    pub fn new(weights: Vec<f64>, coarse_res: usize, factor: usize) -> Result<Self> {
        let expected = coarse_res * coarse_res * factor * factor * 9;
        if weights.len() != expected {
            return Err(Error::config(format!(
                "upsample weight buffer length {} != expected {}",
                weights.len(),
                expected
            )));
        }
        for group in weights.chunks_exact(9) {
            let mut sum = 0.0;
            for &w in group {
                if !(w >= 0.0) || !w.is_finite() {
                    return Err(Error::config(format!("upsample weight {w} invalid")));
                }
                sum += w;
            }
            if (sum - 1.0).abs() > NORMALIZATION_TOL {
                return Err(Error::config(format!("upsample weight group sums to {sum}")));
            }
        }
        Ok(UpsampleWeights { weights, coarse_res, factor })
    }

    /// Softmax each 9-logit group into a convex weight set.
    pub fn from_logits(logits: &[f64], coarse_res: usize, factor: usize) -> Result<Self> {
        let expected = coarse_res * coarse_res * factor * factor * 9;
        if logits.len() != expected {
            return Err(Error::config(format!(
                "upsample logit buffer length {} != expected {}",
                logits.len(),
                expected
            )));
        }
        let mut weights = vec![0.0f64; logits.len()];
        for (group, out) in logits.chunks_exact(9).zip(weights.chunks_exact_mut(9)) {
            softmax_9(group, out);
        }
        Ok(UpsampleWeights { weights, coarse_res, factor })
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn coarse_res(&self) -> usize {
        self.coarse_res
    }

    pub fn factor(&self) -> usize {
        self.factor
    }
}

fn softmax_9(logits: &[f64], out: &mut [f64]) {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for (o, &l) in out.iter_mut().zip(logits) {
        let e = (l - max).exp();
        *o = e;
        sum += e;
    }
    for o in out.iter_mut() {
        *o /= sum;
    }
}

/// Generic convex-combination upsampling kernel shared by the f64 operator
/// below and the model's forward/backward passes. Border neighborhoods use
/// edge clamping. `out` must hold (coarse_res * factor)^2 values.
pub fn convex_upsample_kernel<F: Float>(coarse: &[F], coarse_res: usize, weights: &[F], factor: usize, out: &mut [F]) {
    let fine_res = coarse_res * factor;
    debug_assert_eq!(coarse.len(), coarse_res * coarse_res);
    debug_assert_eq!(weights.len(), coarse_res * coarse_res * factor * factor * 9);
    debug_assert_eq!(out.len(), fine_res * fine_res);
    for fv in 0..fine_res {
        let cv = fv / factor;
        let sv = fv % factor;
        for fu in 0..fine_res {
            let cu = fu / factor;
            let su = fu % factor;
            let group = (((cv * coarse_res + cu) * factor + sv) * factor + su) * 9;
            let mut acc = F::zero();
            for dy in 0..3usize {
                let ny = (cv + dy).saturating_sub(1).min(coarse_res - 1);
                for dx in 0..3usize {
                    let nx = (cu + dx).saturating_sub(1).min(coarse_res - 1);
                    let w = weights[group + dy * 3 + dx];
                    acc = acc + w * coarse[ny * coarse_res + nx];
                }
            }
            out[fv * fine_res + fu] = acc;
        }
    }
}

/// Convex upsampling: each fine pixel is the convex combination, under its 9
/// weights, of the 3x3 coarse neighborhood around its parent cell. The output
/// is bounded by that neighborhood's min and max.
pub fn convex_upsample(coarse: &PixelMap, weights: &UpsampleWeights, factor: usize) -> Result<PixelMap> {
    if weights.factor != factor || weights.coarse_res != coarse.resolution {
        return Err(Error::config(format!(
            "upsample shape mismatch: coarse {} factor {} vs weights coarse {} factor {}",
            coarse.resolution, factor, weights.coarse_res, weights.factor
        )));
    }
    let fine_res = coarse.resolution * factor;
    let mut out = PixelMap::zeros(fine_res);
    convex_upsample_kernel(&coarse.values, coarse.resolution, &weights.weights, factor, &mut out.values);
    Ok(out)
}

const HEATMAP_TAG: &str = "BVHM";

/// Raw float32 row-major dump with a text header (resolution, normalized flag).
pub fn write_heatmap_dump(path: &Path, h: &Heatmap) -> Result<()> {
    let vals: Vec<f32> = h.values.iter().map(|&v| v as f32).collect();
    io::write_f32_dump(
        path,
        HEATMAP_TAG,
        &[("res", h.resolution.to_string()), ("normalized", "1".to_string())],
        &vals,
    )
}

pub fn read_heatmap_dump(path: &Path) -> Result<Heatmap> {
    let (header, vals) = io::read_f32_dump(path, HEATMAP_TAG)?;
    let res: usize = io::header_value(&header, "res")
        .and_then(|v| v.parse().ok())
        .ok_or_else(|| Error::format("bvhm", path, "missing res"))?;
    if vals.len() != res * res {
        return Err(Error::format("bvhm", path, "payload length mismatch"));
    }
    // Round-tripping through f32 perturbs the sum; renormalize on load.
    let mut values: Vec<f64> = vals.iter().map(|&v| v.max(0.0) as f64).collect();
    let total: f64 = values.iter().sum();
    if total <= 0.0 {
        return Err(Error::format("bvhm", path, "all-zero heatmap"));
    }
    for v in values.iter_mut() {
        *v /= total;
    }
    Heatmap::from_values(values, res)
}

/// Side-by-side inspection image: the view on the left, a red heatmap blend
/// on the right. Returns (width, height, pixels).
pub fn side_by_side_overlay(view_color: &[[f64; 3]], resolution: usize, h: &Heatmap) -> (usize, usize, Vec<[f64; 3]>) {
    assert_eq!(view_color.len(), resolution * resolution);
    assert_eq!(h.resolution(), resolution);
    let peak = h.values.iter().cloned().fold(0.0f64, f64::max).max(f64::MIN_POSITIVE);
    let mut out = vec![[0.0; 3]; resolution * 2 * resolution];
    for v in 0..resolution {
        for u in 0..resolution {
            let src = view_color[v * resolution + u];
            out[v * resolution * 2 + u] = src;
            let a = h.at(u, v) / peak;
            out[v * resolution * 2 + resolution + u] = [
                src[0] * (1.0 - a) + a,
                src[1] * (1.0 - a),
                src[2] * (1.0 - a),
            ];
        }
    }
    (resolution * 2, resolution, out)
}
