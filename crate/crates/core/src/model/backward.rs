//! Analytic gradients of the combined loss with respect to every parameter
//! block, plus the clipped gradient-descent update. Mirrors the forward pass
//! in mod.rs layer by layer.

use super::{
    ForwardOutput, LossBreakdown, ModelConfig, Sample, Scalar, Target, ToyBackboneParams,
    TrainMode, AUX_OUTPUTS, BLOCK_NAMES, ROTATION_BINS,
};
use crate::error::{Error, Result};

/// Gradients of the mean loss over `batch`, with the mean loss breakdown.
pub fn backward<F: Scalar>(
    params: &ToyBackboneParams<F>,
    config: &ModelConfig,
    batch: &[Sample<F>],
    mode: TrainMode,
) -> Result<(ToyBackboneParams<F>, LossBreakdown)> {
    if batch.is_empty() {
        return Err(Error::config("backward needs a non-empty batch"));
    }
    let mut grads = ToyBackboneParams::zeros(config);
    let mut mean_loss = LossBreakdown::default();
    for (batch_index, sample) in batch.iter().enumerate() {
        let out = super::forward(params, config, &sample.views, &sample.tokens);
        let breakdown = super::loss(&out, &sample.target, mode);
        mean_loss.add(&breakdown);
        accumulate_sample(params, config, &out, &sample.target, mode, &mut grads);
        for name in BLOCK_NAMES {
            if grads.block(name).iter().any(|v| !v.as_f64().is_finite()) {
                return Err(Error::NonFiniteGradient { block: name.to_string(), batch_index });
            }
        }
    }
    let inv = F::of(1.0 / batch.len() as f64);
    for name in BLOCK_NAMES {
        for g in grads.block_mut(name).iter_mut() {
            *g = *g * inv;
        }
    }
    mean_loss.scale(1.0 / batch.len() as f64);
    Ok((grads, mean_loss))
}

fn accumulate_sample<F: Scalar>(
    params: &ToyBackboneParams<F>,
    config: &ModelConfig,
    out: &ForwardOutput<F>,
    target: &Target<F>,
    mode: TrainMode,
    grads: &mut ToyBackboneParams<F>,
) {
    let d = config.feature_dim;
    let t = config.tokens_per_view();
    let third = F::of(1.0 / 3.0);

    // Aux-head gradient reaches the token grids through the pooled tokens.
    let mut d_aux_in = vec![F::zero(); 6 * d];
    if mode == TrainMode::Finetune {
        let mut d_out = vec![F::zero(); AUX_OUTPUTS];
        for axis in 0..3 {
            let probs = &out.rotation_probs[axis];
            let target_bin = target.rotation_bins[axis] as usize;
            for k in 0..ROTATION_BINS {
                let onehot = if k == target_bin { F::one() } else { F::zero() };
                d_out[axis * ROTATION_BINS + k] = probs[k] - onehot;
            }
        }
        let bit = |b: bool| if b { F::one() } else { F::zero() };
        d_out[3 * ROTATION_BINS] = out.gripper_prob - bit(target.gripper);
        d_out[3 * ROTATION_BINS + 1] = out.collision_prob - bit(target.collision);

        // Output layer.
        let h = config.aux_hidden;
        let mut d_hidden = vec![F::zero(); h];
        for o in 0..AUX_OUTPUTS {
            let go = d_out[o];
            if go == F::zero() {
                continue;
            }
            grads.aux_b2[o] = grads.aux_b2[o] + go;
            let row = &params.aux_w2[o * h..(o + 1) * h];
            let grow = &mut grads.aux_w2[o * h..(o + 1) * h];
            for k in 0..h {
                grow[k] = grow[k] + go * out.aux_hidden[k];
                d_hidden[k] = d_hidden[k] + row[k] * go;
            }
        }
        // Hidden layer with relu.
        for k in 0..h {
            if out.aux_pre[k] > F::zero() {
                let gk = d_hidden[k];
                grads.aux_b1[k] = grads.aux_b1[k] + gk;
                let row = &params.aux_w1[k * 6 * d..(k + 1) * 6 * d];
                let grow = &mut grads.aux_w1[k * 6 * d..(k + 1) * 6 * d];
                for i in 0..6 * d {
                    grow[i] = grow[i] + gk * out.aux_in[i];
                    d_aux_in[i] = d_aux_in[i] + row[i] * gk;
                }
            }
        }
    }

    // Instruction-mean gradient accumulates across the three views.
    let mut d_instr_mean = vec![F::zero(); d];

    for (v, trace) in out.views.iter().enumerate() {
        let gt = &target.gt_heatmaps[v];
        let r = config.view_resolution;
        let p = config.patch;
        let g = config.grid();
        let rows = config.upsample_rows();

        // d loss / d fine logits: softmax cross-entropy, averaged over views.
        let mut d_fine = vec![F::zero(); r * r];
        for i in 0..r * r {
            d_fine[i] = (trace.fine_probs[i] - gt[i]) * third;
        }

        // Back through convex upsampling: coarse values and softmaxed weights.
        let mut d_coarse = vec![F::zero(); t];
        let mut d_up_weights = vec![F::zero(); t * rows];
        for fv in 0..r {
            let cv = fv / p;
            let sv = fv % p;
            for fu in 0..r {
                let gf = d_fine[fv * r + fu];
                if gf == F::zero() {
                    continue;
                }
                let cu = fu / p;
                let su = fu % p;
                let tok = cv * g + cu;
                let group = tok * rows + (sv * p + su) * 9;
                for dy in 0..3usize {
                    let ny = (cv + dy).saturating_sub(1).min(g - 1);
                    for dx in 0..3usize {
                        let nx = (cu + dx).saturating_sub(1).min(g - 1);
                        let k = dy * 3 + dx;
                        let w = trace.up_weights[group + k];
                        let neighbor = ny * g + nx;
                        d_coarse[neighbor] = d_coarse[neighbor] + gf * w;
                        d_up_weights[group + k] = d_up_weights[group + k] + gf * trace.coarse[neighbor];
                    }
                }
            }
        }

        // Softmax backward per 9-group: dl_k = w_k (dw_k - sum_j w_j dw_j).
        let mut d_up_logits = d_up_weights;
        for (group_w, group_l) in trace
            .up_weights
            .chunks_exact(9)
            .zip(d_up_logits.chunks_exact_mut(9))
        {
            let mut dot = F::zero();
            for k in 0..9 {
                dot = dot + group_w[k] * group_l[k];
            }
            for k in 0..9 {
                group_l[k] = group_w[k] * (group_l[k] - dot);
            }
        }

        // Token gradient accumulator.
        let mut d_t2 = vec![F::zero(); t * d];

        // Heatmap head.
        for tok in 0..t {
            let gc = d_coarse[tok];
            if gc != F::zero() {
                grads.heat_b[0] = grads.heat_b[0] + gc;
                let t2 = &trace.t2[tok * d..(tok + 1) * d];
                let dt = &mut d_t2[tok * d..(tok + 1) * d];
                for k in 0..d {
                    grads.heat_w[k] = grads.heat_w[k] + gc * t2[k];
                    dt[k] = dt[k] + params.heat_w[k] * gc;
                }
            }
        }

        // Upsample-weight head.
        for tok in 0..t {
            let t2 = &trace.t2[tok * d..(tok + 1) * d];
            let dt = &mut d_t2[tok * d..(tok + 1) * d];
            let dl = &d_up_logits[tok * rows..(tok + 1) * rows];
            for row in 0..rows {
                let gl = dl[row];
                if gl == F::zero() {
                    continue;
                }
                grads.up_b[row] = grads.up_b[row] + gl;
                let wrow = &params.up_w[row * d..(row + 1) * d];
                let grow = &mut grads.up_w[row * d..(row + 1) * d];
                for k in 0..d {
                    grow[k] = grow[k] + gl * t2[k];
                    dt[k] = dt[k] + wrow[k] * gl;
                }
            }
        }

        // Pooled-token routing from the aux head.
        if mode == TrainMode::Finetune {
            for k in 0..d {
                let gg = d_aux_in[v * d + k];
                if gg != F::zero() {
                    let tok = trace.global_argmax[k];
                    d_t2[tok * d + k] = d_t2[tok * d + k] + gg;
                }
                let gl = d_aux_in[(3 + v) * d + k];
                if gl != F::zero() {
                    d_t2[trace.peak_token * d + k] = d_t2[trace.peak_token * d + k] + gl;
                }
            }
        }

        // Mixing layer 2.
        let inv_t = F::of(1.0 / t as f64);
        let mut delta2 = vec![F::zero(); t * d];
        let mut sum_delta2 = vec![F::zero(); d];
        for tok in 0..t {
            for k in 0..d {
                if trace.pre2[tok * d + k] > F::zero() {
                    let val = d_t2[tok * d + k];
                    delta2[tok * d + k] = val;
                    sum_delta2[k] = sum_delta2[k] + val;
                }
            }
        }
        for rk in 0..d {
            grads.mix2_b[rk] = grads.mix2_b[rk] + sum_delta2[rk];
            for c in 0..d {
                grads.mix2_u[rk * d + c] = grads.mix2_u[rk * d + c] + sum_delta2[rk] * trace.mean1[c];
            }
        }
        let mut d_t1 = vec![F::zero(); t * d];
        // Context path: (1/T) mix2_u^T sum_delta2 reaches every token.
        let mut ctx_grad = vec![F::zero(); d];
        for rk in 0..d {
            let s = sum_delta2[rk];
            if s != F::zero() {
                for c in 0..d {
                    ctx_grad[c] = ctx_grad[c] + params.mix2_u[rk * d + c] * s;
                }
            }
        }
        for cg in ctx_grad.iter_mut() {
            *cg = *cg * inv_t;
        }
        for tok in 0..t {
            let dl = &delta2[tok * d..(tok + 1) * d];
            let t1 = &trace.t1[tok * d..(tok + 1) * d];
            let dt1 = &mut d_t1[tok * d..(tok + 1) * d];
            dt1.copy_from_slice(&ctx_grad);
            for rk in 0..d {
                let gk = dl[rk];
                if gk == F::zero() {
                    continue;
                }
                let wrow = &params.mix2_w[rk * d..(rk + 1) * d];
                let grow = &mut grads.mix2_w[rk * d..(rk + 1) * d];
                for c in 0..d {
                    grow[c] = grow[c] + gk * t1[c];
                    dt1[c] = dt1[c] + wrow[c] * gk;
                }
            }
        }

        // Mixing layer 1 (mean0 recomputed from t0).
        let mut mean0 = vec![F::zero(); d];
        for tok in 0..t {
            for k in 0..d {
                mean0[k] = mean0[k] + trace.t0[tok * d + k];
            }
        }
        for m in mean0.iter_mut() {
            *m = *m * inv_t;
        }
        let mut delta1 = vec![F::zero(); t * d];
        let mut sum_delta1 = vec![F::zero(); d];
        for tok in 0..t {
            for k in 0..d {
                if trace.pre1[tok * d + k] > F::zero() {
                    let val = d_t1[tok * d + k];
                    delta1[tok * d + k] = val;
                    sum_delta1[k] = sum_delta1[k] + val;
                }
            }
        }
        for rk in 0..d {
            grads.mix1_b[rk] = grads.mix1_b[rk] + sum_delta1[rk];
            for c in 0..d {
                grads.mix1_u[rk * d + c] = grads.mix1_u[rk * d + c] + sum_delta1[rk] * mean0[c];
            }
        }
        let mut d_t0 = vec![F::zero(); t * d];
        let mut ctx_grad1 = vec![F::zero(); d];
        for rk in 0..d {
            let s = sum_delta1[rk];
            if s != F::zero() {
                for c in 0..d {
                    ctx_grad1[c] = ctx_grad1[c] + params.mix1_u[rk * d + c] * s;
                }
            }
        }
        for cg in ctx_grad1.iter_mut() {
            *cg = *cg * inv_t;
        }
        for tok in 0..t {
            let dl = &delta1[tok * d..(tok + 1) * d];
            let t0 = &trace.t0[tok * d..(tok + 1) * d];
            let dt0 = &mut d_t0[tok * d..(tok + 1) * d];
            dt0.copy_from_slice(&ctx_grad1);
            for rk in 0..d {
                let gk = dl[rk];
                if gk == F::zero() {
                    continue;
                }
                let wrow = &params.mix1_w[rk * d..(rk + 1) * d];
                let grow = &mut grads.mix1_w[rk * d..(rk + 1) * d];
                for c in 0..d {
                    grow[c] = grow[c] + gk * t0[c];
                    dt0[c] = dt0[c] + wrow[c] * gk;
                }
            }
        }

        // Patch embedding and instruction conditioning.
        let pin = config.patch_input();
        for tok in 0..t {
            let dt0 = &d_t0[tok * d..(tok + 1) * d];
            let x = &trace.patches[tok * pin..(tok + 1) * pin];
            for rk in 0..d {
                let gk = dt0[rk];
                if gk == F::zero() {
                    continue;
                }
                grads.patch_b[rk] = grads.patch_b[rk] + gk;
                d_instr_mean[rk] = d_instr_mean[rk] + gk;
                let grow = &mut grads.patch_w[rk * pin..(rk + 1) * pin];
                for c in 0..pin {
                    grow[c] = grow[c] + gk * x[c];
                }
            }
        }
    }

    // Instruction embedding: the mean over K tokens spreads 1/K per use.
    if !out.token_ids.is_empty() {
        let inv_k = F::of(1.0 / out.token_ids.len() as f64);
        for &id in &out.token_ids {
            let row = (id as usize).min(config.vocab - 1) * d;
            for k in 0..d {
                grads.instr_embed[row + k] = grads.instr_embed[row + k] + d_instr_mean[k] * inv_k;
            }
        }
    }
}

/// Global gradient norm across all blocks.
pub fn gradient_norm<F: Scalar>(grads: &ToyBackboneParams<F>) -> f64 {
    let mut sq = 0.0f64;
    for name in BLOCK_NAMES {
        for g in grads.block(name) {
            let v = g.as_f64();
            sq += v * v;
        }
    }
    sq.sqrt()
}

/// In-place gradient descent with global-norm clipping (clip <= 0 disables).
pub fn sgd_step<F: Scalar>(params: &mut ToyBackboneParams<F>, grads: &ToyBackboneParams<F>, lr: f64, clip: f64) {
    let mut scale = lr;
    if clip > 0.0 {
        let norm = gradient_norm(grads);
        if norm > clip {
            scale = lr * clip / norm;
        }
    }
    let s = F::of(scale);
    for name in BLOCK_NAMES {
        let g = grads.block(name);
        let p = params.block_mut(name);
        for (pv, gv) in p.iter_mut().zip(g) {
            *pv = *pv - s * *gv;
        }
    }
}
