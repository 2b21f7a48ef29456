//! Brute-force reference implementations backing the test suites. Everything
//! here recomputes results by the most literal route available — per-pixel
//! point scans, triple loops, elementwise sums, central finite differences —
//! and shares nothing with the fast paths except domain types.
//!
//! Instance sizes are capped; these run in cubic/quartic time on purpose.

use triview_core::error::{Error, Result};
use triview_core::geometry::{ColoredPointCloud, Workspace};
use triview_core::heatmap::Heatmap;
use triview_core::math::Vec3;
use triview_core::model::{
    loss, forward, LossBreakdown, ModelConfig, Sample, ToyBackboneParams, TrainMode,
};
use triview_core::projection::{
    GridScores, OrthoViewSpec, RenderedView, ViewAxis, BACKGROUND_COLOR, SCORE_EPSILON,
};

const MAX_RENDER_POINTS: usize = 2000;
const MAX_RENDER_RESOLUTION: usize = 64;
const MAX_GRID_CELLS: usize = 40_000;
const MAX_FD_PARAMS: usize = 60_000;

/// Deviation summary for one oracle comparison.
#[derive(Debug, Clone)]
pub struct OracleReport {
    pub case_id: String,
    pub max_abs_deviation: f64,
    pub max_rel_deviation: f64,
    pub tolerance: f64,
    pub pass: bool,
}

impl OracleReport {
    pub fn from_slices(case_id: &str, got: &[f64], want: &[f64], tolerance: f64) -> Self {
        assert_eq!(got.len(), want.len(), "oracle comparison length mismatch");
        let mut max_abs = 0.0f64;
        let mut max_rel = 0.0f64;
        for (&g, &w) in got.iter().zip(want) {
            let abs = (g - w).abs();
            max_abs = max_abs.max(abs);
            max_rel = max_rel.max(abs / g.abs().max(w.abs()).max(1e-12));
        }
        OracleReport {
            case_id: case_id.to_string(),
            max_abs_deviation: max_abs,
            max_rel_deviation: max_rel,
            tolerance,
            pass: max_abs <= tolerance,
        }
    }
}

fn cap(name: &str, value: usize, max: usize) -> Result<()> {
    if value > max {
        return Err(Error::config(format!(
            "test-configuration: oracle size cap exceeded: {name} = {value} > {max}"
        )));
    }
    Ok(())
}

/// Literal pixel coordinate of a point under a view's affine map.
fn literal_pixel(p: Vec3, spec: &OrthoViewSpec) -> (usize, usize) {
    let (au, av) = spec.axis.inplane_axes();
    let r = spec.resolution;
    let min = spec.cuboid.min();
    let ext = spec.cuboid.extent();
    let u = (p.axis(au) - min.axis(au)) / ext.axis(au) * r as f64;
    let v = (p.axis(av) - min.axis(av)) / ext.axis(av) * r as f64;
    (
        (u.floor() as usize).min(r - 1),
        (v.floor() as usize).min(r - 1),
    )
}

/// O(N * R^2) reference renderer: for every pixel, scan every point.
pub fn slow_render(cloud: &ColoredPointCloud, spec: &OrthoViewSpec) -> Result<RenderedView> {
    cap("points", cloud.len(), MAX_RENDER_POINTS)?;
    cap("resolution", spec.resolution, MAX_RENDER_RESOLUTION)?;
    let r = spec.resolution;
    let mut color = vec![BACKGROUND_COLOR; r * r];
    let mut depth = vec![f64::INFINITY; r * r];
    let mut occupancy = vec![false; r * r];
    let mut dropped = 0usize;
    for p in cloud.points() {
        if !spec.cuboid.contains(*p) {
            dropped += 1;
        }
    }
    for pv in 0..r {
        for pu in 0..r {
            let mut winner: Option<(f64, usize)> = None;
            for (i, p) in cloud.points().iter().enumerate() {
                if !spec.cuboid.contains(*p) {
                    continue;
                }
                if literal_pixel(*p, spec) != (pu, pv) {
                    continue;
                }
                let d = spec.axis.depth_of(*p, &spec.cuboid);
                let better = match winner {
                    None => true,
                    // Strictly smaller depth wins; exact ties keep the
                    // earlier input index (points scanned in order).
                    Some((bd, _)) => d < bd,
                };
                if better {
                    winner = Some((d, i));
                }
            }
            if let Some((d, i)) = winner {
                let idx = pv * r + pu;
                depth[idx] = d;
                color[idx] = cloud.colors()[i];
                occupancy[idx] = true;
            }
        }
    }
    Ok(RenderedView {
        spec: spec.clone(),
        color,
        depth,
        occupancy,
        dropped_points: dropped,
    })
}

/// Direct per-cell, per-view evaluation of the fused log score.
pub fn slow_score_grid(
    heatmaps: &[Heatmap; 3],
    views: &[OrthoViewSpec; 3],
    dims: (usize, usize, usize),
) -> Result<GridScores> {
    let (nx, ny, nz) = dims;
    cap("grid cells", nx * ny * nz, MAX_GRID_CELLS)?;
    let ws: Workspace = views[0].cuboid;
    let ext = ws.extent();
    let spacing = Vec3::new(ext.x / nx as f64, ext.y / ny as f64, ext.z / nz as f64);
    let origin = ws.min();
    let mut scores = vec![0.0f64; nx * ny * nz];
    for iz in 0..nz {
        for iy in 0..ny {
            for ix in 0..nx {
                let q = Vec3::new(
                    origin.x + (ix as f64 + 0.5) * spacing.x,
                    origin.y + (iy as f64 + 0.5) * spacing.y,
                    origin.z + (iz as f64 + 0.5) * spacing.z,
                );
                let mut s = 0.0;
                for (hm, spec) in heatmaps.iter().zip(views) {
                    let (u, v) = literal_pixel(q, spec);
                    s += (hm.values()[v * spec.resolution + u] + SCORE_EPSILON).ln();
                }
                scores[(iz * ny + iy) * nx + ix] = s;
            }
        }
    }
    Ok(GridScores { dims, spacing, origin, scores })
}

/// Elementwise -sum gt ln pred.
pub fn slow_cross_entropy(pred: &Heatmap, gt: &Heatmap) -> f64 {
    let mut total = 0.0;
    for (&p, &g) in pred.values().iter().zip(gt.values()) {
        if g > 0.0 {
            total += -g * p.ln();
        }
    }
    total
}

/// Direct-summation recomputation of the combined training loss from raw
/// prediction arrays (view heatmap probabilities, rotation probabilities,
/// gripper/collision probabilities) and the discrete targets.
#[allow(clippy::too_many_arguments)]
pub fn slow_loss(
    pred_heatmaps: &[Vec<f64>; 3],
    gt_heatmaps: &[Vec<f64>; 3],
    rot_probs: &[Vec<f64>; 3],
    rot_bins: [u8; 3],
    gripper_prob: f64,
    gripper_bit: bool,
    collision_prob: f64,
    collision_bit: bool,
    mode: TrainMode,
) -> LossBreakdown {
    let mut trans = 0.0;
    for (pred, gt) in pred_heatmaps.iter().zip(gt_heatmaps) {
        let mut ce = 0.0;
        for (&p, &g) in pred.iter().zip(gt) {
            if g > 0.0 {
                ce -= g * p.ln();
            }
        }
        trans += ce / 3.0;
    }
    let (mut rot, mut gripper, mut collision) = (0.0, 0.0, 0.0);
    if mode == TrainMode::Finetune {
        for (axis, probs) in rot_probs.iter().enumerate() {
            rot -= probs[rot_bins[axis] as usize].ln();
        }
        let bce = |p: f64, bit: bool| -> f64 {
            if bit {
                -p.ln()
            } else {
                -(1.0 - p).ln()
            }
        };
        gripper = bce(gripper_prob, gripper_bit);
        collision = bce(collision_prob, collision_bit);
    }
    LossBreakdown {
        trans,
        rot,
        gripper,
        collision,
        total: trans + rot + gripper + collision,
    }
}

/// Central finite differences of the training loss with respect to every
/// parameter, in f64. Uses only the forward/loss path; the analytic backward
/// pass is exactly what this checks.
pub fn fd_gradients(
    params: &ToyBackboneParams<f64>,
    config: &ModelConfig,
    batch: &[Sample<f64>],
    mode: TrainMode,
    step: f64,
) -> Result<ToyBackboneParams<f64>> {
    cap("fd params", params.total_len(), MAX_FD_PARAMS)?;
    let mut grads = params.zeros_like();
    let names: Vec<&'static str> = params.block_names().to_vec();
    for name in names {
        let len = params.block(name).len();
        for i in 0..len {
            let mut plus = params.clone();
            plus.block_mut(name)[i] += step;
            let mut minus = params.clone();
            minus.block_mut(name)[i] -= step;
            let lp = batch_loss(&plus, config, batch, mode);
            let lm = batch_loss(&minus, config, batch, mode);
            grads.block_mut(name)[i] = (lp - lm) / (2.0 * step);
        }
    }
    Ok(grads)
}

fn batch_loss(params: &ToyBackboneParams<f64>, config: &ModelConfig, batch: &[Sample<f64>], mode: TrainMode) -> f64 {
    let mut total = 0.0;
    for sample in batch {
        let out = forward(params, config, &sample.views, &sample.tokens);
        total += loss(&out, &sample.target, mode).total;
    }
    total / batch.len() as f64
}

/// Compare view axes constant with the literal definition, used by render
/// equivalence tests to pin the atlas.
pub fn view_order() -> [ViewAxis; 3] {
    [ViewAxis::Top, ViewAxis::Front, ViewAxis::Right]
}
