//! The action data model, Euler-angle rotation binning, and the
//! coarse-to-fine two-pass refinement controller.
//!
//! Euler convention: intrinsic X-Y-Z (R = Rx(roll) Ry(pitch) Rz(yaw)), angles
//! canonicalized to [0, 360) degrees. At the pitch singularity roll is set to
//! 0 and yaw absorbs the free angle. Each axis is discretized into 72 bins of
//! 5 degrees with wraparound.

use std::io::{Read, Write};

use crate::error::{Error, Result};
use crate::geometry::{crop_to_workspace, ColoredPointCloud, Workspace};
use crate::heatmap::Heatmap;
use crate::math::{rad_to_deg, deg_to_rad, Quat, Vec3};
use crate::projection::{render_standard_views, score_grid, argmax_grid, standard_views, RenderedView};

pub const ROTATION_BINS: usize = 72;
pub const BIN_WIDTH_DEG: f64 = 360.0 / ROTATION_BINS as f64;

const QUAT_NORM_TOL: f64 = 1e-9;

/// Next-keyframe action: 6-DoF pose, gripper bit (true = open) and collision
/// bit (true = plan with collision avoidance).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KeyframeAction {
    pub position: Vec3,
    pub orientation: Quat,
    pub gripper: bool,
    pub collision: bool,
}

impl KeyframeAction {
    pub fn new(position: Vec3, orientation: Quat, gripper: bool, collision: bool) -> Result<Self> {
        if !position.is_finite() {
            return Err(Error::config("action position must be finite"));
        }
        if !orientation.is_finite() || (orientation.norm() - 1.0).abs() > QUAT_NORM_TOL {
            return Err(Error::config(format!(
                "action orientation must be a unit quaternion (norm {})",
                orientation.norm()
            )));
        }
        Ok(KeyframeAction { position, orientation, gripper, collision })
    }
}

/// Canonical Euler angles (degrees, each in [0, 360)) of a unit quaternion
/// under the intrinsic X-Y-Z convention.
pub fn euler_from_quat(q: Quat) -> [f64; 3] {
    let m = q.normalized().to_matrix();
    // R = Rx(a) Ry(b) Rz(c):
    //   R02 = sin b
    //   R01 = -cos b sin c, R00 = cos b cos c
    //   R12 = -sin a cos b, R22 = cos a cos b
    let sb = m[(0, 2)].clamp(-1.0, 1.0);
    let (roll, pitch, yaw);
    if 1.0 - sb.abs() < 1e-12 {
        // Pitch singularity: put the whole free rotation into yaw.
        pitch = if sb > 0.0 { 90.0 } else { 270.0 };
        roll = 0.0;
        yaw = rad_to_deg(m[(1, 0)].atan2(m[(1, 1)]));
    } else {
        pitch = rad_to_deg(sb.asin());
        yaw = rad_to_deg((-m[(0, 1)]).atan2(m[(0, 0)]));
        roll = rad_to_deg((-m[(1, 2)]).atan2(m[(2, 2)]));
    }
    [roll.rem_euclid(360.0), pitch.rem_euclid(360.0), yaw.rem_euclid(360.0)]
}

/// Quaternion of intrinsic X-Y-Z Euler angles in degrees.
pub fn quat_from_euler(angles_deg: [f64; 3]) -> Quat {
    let qx = Quat::from_axis_angle(Vec3::new(1.0, 0.0, 0.0), deg_to_rad(angles_deg[0]));
    let qy = Quat::from_axis_angle(Vec3::new(0.0, 1.0, 0.0), deg_to_rad(angles_deg[1]));
    let qz = Quat::from_axis_angle(Vec3::new(0.0, 0.0, 1.0), deg_to_rad(angles_deg[2]));
    qx.mul(qy).mul(qz).normalized()
}

/// Nearest of the 72 bin centers {k * 5 deg} per axis, with wraparound.
pub fn discretize_rotation(orientation: Quat) -> [u8; 3] {
    let angles = euler_from_quat(orientation);
    angles.map(|a| ((a / BIN_WIDTH_DEG).round() as usize % ROTATION_BINS) as u8)
}

/// Quaternion of the bin-center Euler triple.
pub fn undiscretize_rotation(bins: [u8; 3]) -> Quat {
    quat_from_euler(bins.map(|b| b as f64 * BIN_WIDTH_DEG))
}

/// Fully discretized action as serialized inside demo shards.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DiscretizedAction {
    pub translation_index: u32,
    pub rotation_bins: [u8; 3],
    pub gripper: u8,
    pub collision: u8,
}

impl DiscretizedAction {
    /// Flat record layout: u32 grid index, 3 x u8 bins, 2 x u8 bits (9 bytes,
    /// little-endian).
    pub fn write_to<W: Write>(&self, w: &mut W) -> std::io::Result<()> {
        w.write_all(&self.translation_index.to_le_bytes())?;
        w.write_all(&self.rotation_bins)?;
        w.write_all(&[self.gripper, self.collision])
    }

    pub fn read_from<R: Read>(r: &mut R) -> std::io::Result<Self> {
        let mut buf = [0u8; 9];
        r.read_exact(&mut buf)?;
        Ok(DiscretizedAction {
            translation_index: u32::from_le_bytes(buf[..4].try_into().unwrap()),
            rotation_bins: [buf[4], buf[5], buf[6]],
            gripper: buf[7],
            collision: buf[8],
        })
    }

    pub fn validate(&self, grid_dims: (usize, usize, usize)) -> Result<()> {
        let cells = grid_dims.0 * grid_dims.1 * grid_dims.2;
        if self.translation_index as usize >= cells {
            return Err(Error::config(format!(
                "translation index {} out of range for {} cells",
                self.translation_index, cells
            )));
        }
        if self.rotation_bins.iter().any(|&b| b as usize >= ROTATION_BINS) {
            return Err(Error::config("rotation bin out of range"));
        }
        if self.gripper > 1 || self.collision > 1 {
            return Err(Error::config("gripper/collision bits must be 0 or 1"));
        }
        Ok(())
    }
}

/// Flat index of the grid cell containing `p` (x fastest), matching the
/// score-grid layout.
pub fn translation_cell_index(p: Vec3, ws: &Workspace, dims: (usize, usize, usize)) -> u32 {
    let ext = ws.extent();
    let rel = p - ws.min();
    let bin = |r: f64, e: f64, n: usize| ((r / e * n as f64).floor() as i64).clamp(0, n as i64 - 1) as usize;
    let ix = bin(rel.x, ext.x, dims.0);
    let iy = bin(rel.y, ext.y, dims.1);
    let iz = bin(rel.z, ext.z, dims.2);
    ((iz * dims.1 + iy) * dims.0 + ix) as u32
}

pub fn discretize_action(action: &KeyframeAction, ws: &Workspace, dims: (usize, usize, usize)) -> DiscretizedAction {
    DiscretizedAction {
        translation_index: translation_cell_index(action.position, ws, dims),
        rotation_bins: discretize_rotation(action.orientation),
        gripper: action.gripper as u8,
        collision: action.collision as u8,
    }
}

/// Crop cuboid geometry and fine grid dims for the refinement pass.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RefineSpec {
    /// Crop cuboid edge length as a fraction of the workspace extent, (0, 1].
    pub crop_fraction: f64,
    pub fine_dims: (usize, usize, usize),
}

impl RefineSpec {
    pub fn new(crop_fraction: f64, fine_dims: (usize, usize, usize)) -> Result<Self> {
        if !(crop_fraction > 0.0 && crop_fraction <= 1.0) {
            return Err(Error::config(format!(
                "crop fraction must be in (0, 1], got {crop_fraction}"
            )));
        }
        if fine_dims.0 == 0 || fine_dims.1 == 0 || fine_dims.2 == 0 {
            return Err(Error::config("fine grid dims must be >= 1 per axis"));
        }
        Ok(RefineSpec { crop_fraction, fine_dims })
    }

    /// Crop cuboid centered as nearly as possible on `center`, clamped to lie
    /// inside the workspace. A fraction of 1 reproduces the workspace exactly.
    pub fn crop_cuboid(&self, center: Vec3, ws: &Workspace) -> Workspace {
        if self.crop_fraction >= 1.0 {
            return *ws;
        }
        let edge = ws.extent() * self.crop_fraction;
        let lo = (center - edge * 0.5).clamp(ws.min(), ws.max() - edge);
        Workspace::new(lo, lo + edge).expect("crop cuboid degenerate")
    }
}

impl Default for RefineSpec {
    fn default() -> Self {
        RefineSpec { crop_fraction: 0.25, fine_dims: (128, 128, 128) }
    }
}

/// A backbone callback: maps three rendered views to per-view heatmaps plus
/// the discrete action components.
pub trait ActionPredictor {
    fn predict(&self, views: &[RenderedView; 3]) -> Result<PredictorOutput>;
}

#[derive(Debug, Clone)]
pub struct PredictorOutput {
    pub heatmaps: [Heatmap; 3],
    pub rotation_bins: [u8; 3],
    pub gripper: bool,
    pub collision: bool,
}

#[derive(Debug, Clone, Copy, Default)]
pub struct RefineDiagnostics {
    pub clamped_first_pass: bool,
    pub empty_crop_fallback: bool,
    pub fine_spacing: Vec3,
}

/// Second-pass refinement: crop a cuboid around the first-pass translation,
/// re-render the three views over the crop, run the predictor again and
/// return the second pass's full action. Falls back to the (clamped)
/// first-pass action when the crop contains no points.
pub fn refine(
    first_pass: &KeyframeAction,
    cloud: &ColoredPointCloud,
    ws: &Workspace,
    spec: &RefineSpec,
    view_resolution: usize,
    predictor: &dyn ActionPredictor,
) -> Result<(KeyframeAction, RefineDiagnostics)> {
    let mut diag = RefineDiagnostics::default();
    let mut center = first_pass.position;
    if !ws.contains(center) {
        log::warn!("refine: first-pass position {center:?} outside workspace, clamping");
        center = ws.clamp(center);
        diag.clamped_first_pass = true;
    }
    let crop = spec.crop_cuboid(center, ws);
    let cropped = crop_to_workspace(cloud, &crop);
    if cropped.is_empty() {
        log::warn!("refine: empty crop around {center:?}, falling back to first pass");
        diag.empty_crop_fallback = true;
        let mut fallback = *first_pass;
        fallback.position = center;
        return Ok((fallback, diag));
    }
    let views = render_standard_views(&cropped, &crop, view_resolution)?;
    let out = predictor.predict(&views)?;
    let specs = standard_views(&crop, view_resolution)?;
    let scores = score_grid(&out.heatmaps, &specs, spec.fine_dims)?;
    diag.fine_spacing = scores.spacing;
    let (_, position) = argmax_grid(&scores);
    let action = KeyframeAction {
        position: ws.clamp(position),
        orientation: undiscretize_rotation(out.rotation_bins),
        gripper: out.gripper,
        collision: out.collision,
    };
    Ok((action, diag))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::heatmap::{action_target_map, HeatmapSpec};
    use crate::math::wrap_angle_dist_deg;
    use rand::Rng;

    #[test]
    fn identity_is_bin_zero() {
        assert_eq!(discretize_rotation(Quat::IDENTITY), [0, 0, 0]);
    }

    /// Nearest-bin assignments checked against an explicit scan of all 72
    /// bin centers.
    #[test]
    fn binning_matches_center_enumeration() {
        let cases = [
            ([0.0, 0.0, 7.0], 2),   // yaw 7 deg -> bin 1
            ([0.0, 0.0, 359.0], 2), // yaw 359 deg wraps to bin 0
            ([12.4, 0.0, 0.0], 0),
            ([0.0, 62.6, 0.0], 1),
        ];
        for (angles, axis) in cases {
            let bins = discretize_rotation(quat_from_euler(angles));
            // Enumerate bin centers and take the nearest with wraparound.
            let mut best = 0usize;
            let mut best_d = f64::INFINITY;
            for k in 0..ROTATION_BINS {
                let d = wrap_angle_dist_deg(angles[axis], k as f64 * BIN_WIDTH_DEG);
                if d < best_d {
                    best_d = d;
                    best = k;
                }
            }
            assert_eq!(bins[axis] as usize, best, "angles {angles:?}");
        }
        // The two named examples.
        assert_eq!(discretize_rotation(quat_from_euler([0.0, 0.0, 7.0]))[2], 1);
        assert_eq!(discretize_rotation(quat_from_euler([0.0, 0.0, 359.0]))[2], 0);
    }

    #[test]
    fn round_trip_within_half_bin() {
        let mut rng = crate::rng::derive_rng(15, "rot-roundtrip", 0);
        for _ in 0..2000 {
            let q = random_quat(&mut rng);
            let angles = euler_from_quat(q);
            if wrap_angle_dist_deg(angles[1], 90.0) < 1e-3 || wrap_angle_dist_deg(angles[1], 270.0) < 1e-3 {
                continue;
            }
            let bins = discretize_rotation(q);
            // Per-axis distance from the original canonical angles to the
            // reconstructed rotation's defining bin centers.
            for a in 0..3 {
                let err = wrap_angle_dist_deg(angles[a], bins[a] as f64 * BIN_WIDTH_DEG);
                assert!(err <= BIN_WIDTH_DEG / 2.0 + 1e-9, "axis {a} err {err}");
            }
            // undiscretize reproduces the bin-center rotation exactly.
            let q2 = undiscretize_rotation(bins);
            let expected = quat_from_euler(bins.map(|b| b as f64 * BIN_WIDTH_DEG));
            assert!(q2.angle_to(expected) < 1e-6);
            // Away from the singularity, re-extraction recovers the centers.
            if wrap_angle_dist_deg(angles[1], 90.0) > 3.0 && wrap_angle_dist_deg(angles[1], 270.0) > 3.0 {
                let back = euler_from_quat(q2);
                for a in 0..3 {
                    let err = wrap_angle_dist_deg(back[a], bins[a] as f64 * BIN_WIDTH_DEG);
                    assert!(err < 1e-6, "axis {a} err {err}");
                }
            }
        }
    }

    #[test]
    fn singular_pitch_moves_roll_into_yaw() {
        let q = quat_from_euler([25.0, 90.0, 40.0]);
        let angles = euler_from_quat(q);
        assert_eq!(angles[0], 0.0);
        assert!((angles[1] - 90.0).abs() < 1e-9);
        // At +90 deg pitch the free angle is roll + yaw.
        assert!(wrap_angle_dist_deg(angles[2], 65.0) < 1e-9, "yaw {}", angles[2]);
        let q2 = quat_from_euler(angles);
        assert!(q.angle_to(q2) < 1e-6);
    }

    #[test]
    fn small_perturbations_keep_the_bin() {
        let mut rng = crate::rng::derive_rng(16, "rot-stable", 0);
        for _ in 0..200 {
            let base: [f64; 3] = [
                rng.random_range(0..72) as f64 * BIN_WIDTH_DEG,
                // keep pitch well away from the singular bins
                rng.random_range(1..17) as f64 * BIN_WIDTH_DEG,
                rng.random_range(0..72) as f64 * BIN_WIDTH_DEG,
            ];
            let eps = rng.random_range(-2.0..2.0);
            let perturbed = [base[0] + eps, base[1], base[2]];
            let bins = discretize_rotation(quat_from_euler(perturbed));
            let expect = discretize_rotation(quat_from_euler(base));
            assert_eq!(bins, expect, "base {base:?} eps {eps}");
        }
    }

    #[test]
    fn discretized_record_round_trip() {
        let rec = DiscretizedAction {
            translation_index: 123_456,
            rotation_bins: [71, 0, 35],
            gripper: 1,
            collision: 0,
        };
        let mut buf = Vec::new();
        rec.write_to(&mut buf).unwrap();
        assert_eq!(buf.len(), 9);
        let back = DiscretizedAction::read_from(&mut buf.as_slice()).unwrap();
        assert_eq!(rec, back);
        assert!(back.validate((100, 100, 100)).is_ok());
        assert!(back.validate((10, 10, 10)).is_err());
    }

    fn random_quat(rng: &mut rand_chacha::ChaCha12Rng) -> Quat {
        loop {
            let q = Quat::new(
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
            );
            if q.norm() > 1e-3 {
                return q.normalized();
            }
        }
    }

    struct OracleMapPredictor {
        target: Vec3,
        spec: HeatmapSpec,
    }

    impl ActionPredictor for OracleMapPredictor {
        fn predict(&self, views: &[RenderedView; 3]) -> Result<PredictorOutput> {
            let maps: Vec<Heatmap> = views
                .iter()
                .map(|v| {
                    let clamped = v.spec.cuboid.clamp(self.target);
                    action_target_map(clamped, &v.spec, &self.spec)
                })
                .collect::<Result<_>>()?;
            Ok(PredictorOutput {
                heatmaps: [maps[0].clone(), maps[1].clone(), maps[2].clone()],
                rotation_bins: [0, 0, 0],
                gripper: true,
                collision: false,
            })
        }
    }

    fn dense_cloud(ws: &Workspace, step: f64) -> ColoredPointCloud {
        let mut cloud = ColoredPointCloud::empty();
        let mut x = ws.min().x + step / 2.0;
        while x < ws.max().x {
            let mut y = ws.min().y + step / 2.0;
            while y < ws.max().y {
                cloud.push(Vec3::new(x, y, ws.min().z + 0.01), [0.4, 0.4, 0.4]);
                y += step;
            }
            x += step;
        }
        cloud
    }

    #[test]
    fn full_fraction_crop_equals_single_pass() {
        let ws = Workspace::new(Vec3::new(-0.3, -0.3, 0.0), Vec3::new(0.3, 0.3, 0.3)).unwrap();
        let cloud = dense_cloud(&ws, 0.02);
        let target = Vec3::new(0.123, -0.071, 0.04);
        let predictor = OracleMapPredictor { target, spec: HeatmapSpec::default() };
        let dims = (24, 24, 24);
        let spec = RefineSpec::new(1.0, dims).unwrap();

        // Single pass over the full workspace with the same dims.
        let views = render_standard_views(&cloud, &ws, 64).unwrap();
        let out = predictor.predict(&views).unwrap();
        let specs = standard_views(&ws, 64).unwrap();
        let single = argmax_grid(&score_grid(&out.heatmaps, &specs, dims).unwrap()).1;

        let first = KeyframeAction::new(Vec3::new(0.05, 0.05, 0.1), Quat::IDENTITY, true, true).unwrap();
        let (refined, diag) = refine(&first, &cloud, &ws, &spec, 64, &predictor).unwrap();
        assert!(!diag.empty_crop_fallback);
        assert!(refined.position.distance(single) < 1e-12);
    }

    #[test]
    fn off_grid_target_refines_below_coarse_spacing() {
        let ws = Workspace::new(Vec3::new(-0.3, -0.3, 0.0), Vec3::new(0.3, 0.3, 0.3)).unwrap();
        let cloud = dense_cloud(&ws, 0.02);
        let coarse_dims = (10, 10, 10);
        let coarse_spacing = ws.extent().x / 10.0;
        // Midway between two coarse cell centers along x. A wide kernel keeps
        // every coarse cell inside the truncation radius on this sparse grid.
        let target = Vec3::new(-0.3 + 3.0 * coarse_spacing, 0.05, 0.02);
        let predictor = OracleMapPredictor { target, spec: HeatmapSpec::new(3.0, 0.01).unwrap() };

        let views = render_standard_views(&cloud, &ws, 64).unwrap();
        let out = predictor.predict(&views).unwrap();
        let specs = standard_views(&ws, 64).unwrap();
        let coarse_pos = argmax_grid(&score_grid(&out.heatmaps, &specs, coarse_dims).unwrap()).1;
        let coarse_err = coarse_pos.distance(target);

        let first = KeyframeAction::new(coarse_pos, Quat::IDENTITY, true, true).unwrap();
        let spec = RefineSpec::new(0.25, (32, 32, 32)).unwrap();
        let (refined, _) = refine(&first, &cloud, &ws, &spec, 64, &predictor).unwrap();
        let fine_err = refined.position.distance(target);
        assert!(fine_err < coarse_spacing, "fine error {fine_err} vs spacing {coarse_spacing}");
        assert!(fine_err <= coarse_err);
        assert!(ws.contains(refined.position));
    }

    #[test]
    fn corner_first_pass_clamps_crop_inside_workspace() {
        let ws = Workspace::new(Vec3::ZERO, Vec3::splat(1.0)).unwrap();
        let spec = RefineSpec::new(0.25, (8, 8, 8)).unwrap();
        let crop = spec.crop_cuboid(Vec3::ZERO, &ws);
        assert_eq!(crop.min(), Vec3::ZERO);
        assert!(crop.max().distance(Vec3::splat(0.25)) < 1e-12);
        let crop2 = spec.crop_cuboid(Vec3::splat(1.0), &ws);
        assert!(crop2.min().distance(Vec3::splat(0.75)) < 1e-12);
    }

    #[test]
    fn empty_crop_falls_back_to_first_pass() {
        let ws = Workspace::new(Vec3::ZERO, Vec3::splat(1.0)).unwrap();
        let cloud = ColoredPointCloud::empty();
        let predictor = OracleMapPredictor { target: Vec3::splat(0.5), spec: HeatmapSpec::default() };
        let first = KeyframeAction::new(Vec3::splat(1.8), Quat::IDENTITY, false, true).unwrap();
        let spec = RefineSpec::new(0.25, (8, 8, 8)).unwrap();
        let (action, diag) = refine(&first, &cloud, &ws, &spec, 32, &predictor).unwrap();
        assert!(diag.empty_crop_fallback);
        assert!(diag.clamped_first_pass);
        // Position clamped into the workspace even on fallback.
        assert!(ws.contains(action.position));
        assert_eq!(action.gripper, first.gripper);
    }
}
