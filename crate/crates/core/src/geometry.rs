//! Camera models, RGB-D reconstruction, workspace cropping and rigid
//! transforms. World frame is right-handed with z up; depth images are in
//! meters with 0 marking an invalid pixel.

use std::path::Path;

use crate::error::{Error, Result};
use crate::io;
use crate::math::{Mat3, Quat, Vec3, ORTHONORMALITY_TOL};

/// Rigid motion: `p -> R p + t`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RigidTransform {
    rotation: Mat3,
    translation: Vec3,
}

impl RigidTransform {
    pub fn new(rotation: Mat3, translation: Vec3) -> Result<Self> {
        if !rotation.is_rotation(ORTHONORMALITY_TOL) {
            return Err(Error::config(format!(
                "rotation not orthonormal with det +1 (err {:.3e}, det {:.12})",
                rotation.orthonormality_error(),
                rotation.det()
            )));
        }
        if !translation.is_finite() {
            return Err(Error::config("translation not finite"));
        }
        Ok(RigidTransform { rotation, translation })
    }

    pub fn identity() -> Self {
        RigidTransform {
            rotation: Mat3::IDENTITY,
            translation: Vec3::ZERO,
        }
    }

    pub fn from_quat(q: Quat, translation: Vec3) -> Self {
        RigidTransform {
            rotation: q.normalized().to_matrix(),
            translation,
        }
    }

    pub fn rotation(&self) -> Mat3 {
        self.rotation
    }

    pub fn translation(&self) -> Vec3 {
        self.translation
    }

    pub fn apply(&self, p: Vec3) -> Vec3 {
        self.rotation.mul_vec(p) + self.translation
    }

    pub fn inverse(&self) -> RigidTransform {
        let rt = self.rotation.transpose();
        RigidTransform {
            rotation: rt,
            translation: -rt.mul_vec(self.translation),
        }
    }

    /// `self` after `first` (i.e. `(self ∘ first)(p) = self(first(p))`).
    pub fn compose(&self, first: &RigidTransform) -> RigidTransform {
        RigidTransform {
            rotation: self.rotation.mul_mat(first.rotation),
            translation: self.rotation.mul_vec(first.translation) + self.translation,
        }
    }
}

/// Pinhole camera: intrinsics in pixels, extrinsics mapping camera frame to
/// world. Camera looks along its +z axis; pixel (u, v) samples at the pixel
/// center (u + 0.5, v + 0.5).
#[derive(Debug, Clone)]
pub struct CameraModel {
    pub intrinsics: Mat3,
    pub extrinsics: RigidTransform,
    pub width: usize,
    pub height: usize,
}

impl CameraModel {
    pub fn new(intrinsics: Mat3, extrinsics: RigidTransform, width: usize, height: usize) -> Result<Self> {
        let fx = intrinsics[(0, 0)];
        let fy = intrinsics[(1, 1)];
        if !(fx > 0.0 && fy > 0.0) {
            return Err(Error::config("camera focal lengths must be positive"));
        }
        if intrinsics[(0, 1)] != 0.0 {
            return Err(Error::config(
                "camera skew must be zero (use new_with_skew to opt in)",
            ));
        }
        Self::validate_common(&intrinsics, width, height)?;
        Ok(CameraModel { intrinsics, extrinsics, width, height })
    }

    /// Skewed intrinsics are unusual; this constructor states the intent.
    pub fn new_with_skew(intrinsics: Mat3, extrinsics: RigidTransform, width: usize, height: usize) -> Result<Self> {
        if !(intrinsics[(0, 0)] > 0.0 && intrinsics[(1, 1)] > 0.0) {
            return Err(Error::config("camera focal lengths must be positive"));
        }
        Self::validate_common(&intrinsics, width, height)?;
        Ok(CameraModel { intrinsics, extrinsics, width, height })
    }

    fn validate_common(k: &Mat3, width: usize, height: usize) -> Result<()> {
        if width == 0 || height == 0 {
            return Err(Error::config("camera resolution must be nonzero"));
        }
        let bottom_ok = k[(1, 0)] == 0.0 && k[(2, 0)] == 0.0 && k[(2, 1)] == 0.0 && k[(2, 2)] == 1.0;
        if !bottom_ok {
            return Err(Error::config("intrinsics must be upper-triangular with 1 at (2,2)"));
        }
        Ok(())
    }

    pub fn simple(focal_px: f64, width: usize, height: usize, extrinsics: RigidTransform) -> Result<Self> {
        let k = Mat3::from_rows(
            [focal_px, 0.0, width as f64 / 2.0],
            [0.0, focal_px, height as f64 / 2.0],
            [0.0, 0.0, 1.0],
        );
        Self::new(k, extrinsics, width, height)
    }

    /// Unproject pixel center (u+0.5, v+0.5) at camera-frame depth `d` (along +z).
    pub fn unproject(&self, u: usize, v: usize, depth: f64) -> Vec3 {
        let k = &self.intrinsics;
        let (fx, fy) = (k[(0, 0)], k[(1, 1)]);
        let (cx, cy) = (k[(0, 2)], k[(1, 2)]);
        let skew = k[(0, 1)];
        let yc = (v as f64 + 0.5 - cy) / fy;
        let xc = (u as f64 + 0.5 - cx - skew * yc) / fx;
        let cam = Vec3::new(xc * depth, yc * depth, depth);
        self.extrinsics.apply(cam)
    }

    /// Project a world point to continuous pixel coordinates and camera depth.
    /// Returns None for points at or behind the camera plane.
    pub fn project(&self, world: Vec3) -> Option<(f64, f64, f64)> {
        let cam = self.extrinsics.inverse().apply(world);
        if cam.z <= 0.0 {
            return None;
        }
        let k = &self.intrinsics;
        let u = k[(0, 0)] * cam.x / cam.z + k[(0, 1)] * cam.y / cam.z + k[(0, 2)];
        let v = k[(1, 1)] * cam.y / cam.z + k[(1, 2)];
        Some((u, v, cam.z))
    }
}

/// Row-major RGB image with channels in [0, 1].
#[derive(Debug, Clone)]
pub struct RgbImage {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<[f64; 3]>,
}

impl RgbImage {
    pub fn filled(width: usize, height: usize, color: [f64; 3]) -> Self {
        RgbImage { width, height, pixels: vec![color; width * height] }
    }

    pub fn at(&self, u: usize, v: usize) -> [f64; 3] {
        self.pixels[v * self.width + u]
    }

    pub fn set(&mut self, u: usize, v: usize, c: [f64; 3]) {
        self.pixels[v * self.width + u] = c;
    }
}

/// Row-major depth image in meters; 0 marks an invalid pixel.
#[derive(Debug, Clone)]
pub struct DepthImage {
    pub width: usize,
    pub height: usize,
    pub depths: Vec<f64>,
}

impl DepthImage {
    pub fn filled(width: usize, height: usize, depth: f64) -> Self {
        DepthImage { width, height, depths: vec![depth; width * height] }
    }

    pub fn at(&self, u: usize, v: usize) -> f64 {
        self.depths[v * self.width + u]
    }

    pub fn set(&mut self, u: usize, v: usize, d: f64) {
        self.depths[v * self.width + u] = d;
    }
}

/// World-frame point cloud with per-point RGB in [0, 1].
#[derive(Debug, Clone, Default)]
pub struct ColoredPointCloud {
    points: Vec<Vec3>,
    colors: Vec<[f64; 3]>,
}

impl ColoredPointCloud {
    pub fn new(points: Vec<Vec3>, colors: Vec<[f64; 3]>) -> Result<Self> {
        if points.len() != colors.len() {
            return Err(Error::config(format!(
                "point/color length mismatch: {} vs {}",
                points.len(),
                colors.len()
            )));
        }
        if let Some(p) = points.iter().find(|p| !p.is_finite()) {
            return Err(Error::config(format!("non-finite point {:?}", p)));
        }
        Ok(ColoredPointCloud { points, colors })
    }

    pub fn empty() -> Self {
        ColoredPointCloud::default()
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn points(&self) -> &[Vec3] {
        &self.points
    }

    pub fn colors(&self) -> &[[f64; 3]] {
        &self.colors
    }

    pub fn push(&mut self, p: Vec3, c: [f64; 3]) {
        debug_assert!(p.is_finite());
        self.points.push(p);
        self.colors.push(c);
    }

    /// Concatenate, preserving order: all of `self`, then all of `other`.
    pub fn merged(&self, other: &ColoredPointCloud) -> ColoredPointCloud {
        let mut points = self.points.clone();
        let mut colors = self.colors.clone();
        points.extend_from_slice(&other.points);
        colors.extend_from_slice(&other.colors);
        ColoredPointCloud { points, colors }
    }
}

/// Axis-aligned workspace cuboid, min < max componentwise.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Workspace {
    min: Vec3,
    max: Vec3,
}

impl Workspace {
    pub fn new(min: Vec3, max: Vec3) -> Result<Self> {
        if !(min.x < max.x && min.y < max.y && min.z < max.z) {
            return Err(Error::config(format!(
                "workspace min must be < max componentwise: {:?} vs {:?}",
                min, max
            )));
        }
        if !min.is_finite() || !max.is_finite() {
            return Err(Error::config("workspace corners must be finite"));
        }
        Ok(Workspace { min, max })
    }

    pub fn min(&self) -> Vec3 {
        self.min
    }

    pub fn max(&self) -> Vec3 {
        self.max
    }

    pub fn extent(&self) -> Vec3 {
        self.max - self.min
    }

    pub fn center(&self) -> Vec3 {
        (self.min + self.max) * 0.5
    }

    /// Closed-cuboid membership.
    pub fn contains(&self, p: Vec3) -> bool {
        p.x >= self.min.x
            && p.x <= self.max.x
            && p.y >= self.min.y
            && p.y <= self.max.y
            && p.z >= self.min.z
            && p.z <= self.max.z
    }

    pub fn clamp(&self, p: Vec3) -> Vec3 {
        p.clamp(self.min, self.max)
    }
}

/// One RGB-D capture with its calibrated camera.
#[derive(Debug, Clone)]
pub struct CameraFrame {
    pub rgb: RgbImage,
    pub depth: DepthImage,
    pub camera: CameraModel,
}

/// Per-call tallies from [`reconstruct_cloud`].
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct ReconstructStats {
    pub valid_pixels: usize,
    pub invalid_pixels: usize,
    pub rejected_non_finite: usize,
}

/// Unproject every valid depth pixel into a world-frame colored point.
/// Depth 0 marks an invalid pixel; negative or non-finite depths are rejected
/// and tallied.
pub fn reconstruct_cloud(
    rgb: &RgbImage,
    depth: &DepthImage,
    cam: &CameraModel,
) -> Result<(ColoredPointCloud, ReconstructStats)> {
    if rgb.width != cam.width || rgb.height != cam.height || depth.width != cam.width || depth.height != cam.height {
        return Err(Error::config(format!(
            "rgb {}x{} / depth {}x{} do not match camera {}x{}",
            rgb.width, rgb.height, depth.width, depth.height, cam.width, cam.height
        )));
    }
    let mut cloud = ColoredPointCloud::empty();
    let mut stats = ReconstructStats::default();
    for v in 0..cam.height {
        for u in 0..cam.width {
            let d = depth.at(u, v);
            if !d.is_finite() || d < 0.0 {
                stats.rejected_non_finite += 1;
                continue;
            }
            if d == 0.0 {
                stats.invalid_pixels += 1;
                continue;
            }
            cloud.push(cam.unproject(u, v, d), rgb.at(u, v));
            stats.valid_pixels += 1;
        }
    }
    Ok((cloud, stats))
}

/// Keep exactly the points inside the closed cuboid, preserving order.
pub fn crop_to_workspace(cloud: &ColoredPointCloud, ws: &Workspace) -> ColoredPointCloud {
    let mut out = ColoredPointCloud::empty();
    for (p, c) in cloud.points().iter().zip(cloud.colors()) {
        if ws.contains(*p) {
            out.push(*p, *c);
        }
    }
    out
}

/// Map every point through `t`; colors unchanged.
pub fn apply_transform(cloud: &ColoredPointCloud, t: &RigidTransform) -> ColoredPointCloud {
    let points = cloud.points().iter().map(|p| t.apply(*p)).collect();
    ColoredPointCloud {
        points,
        colors: cloud.colors().to_vec(),
    }
}

/// Transform a 6-DoF pose: position moves like a point, orientation is
/// left-composed with the transform's rotation.
pub fn apply_transform_pose(position: Vec3, orientation: Quat, t: &RigidTransform) -> (Vec3, Quat) {
    let q_rot = Quat::from_matrix(t.rotation());
    (t.apply(position), q_rot.mul(orientation).normalized())
}

const PC_MAGIC: &[u8; 4] = b"BVPC";

/// Write the point-cloud file format: magic "BVPC", u32 count, then
/// count x 6 float32 (x, y, z, r, g, b), little-endian.
pub fn write_point_cloud(path: &Path, cloud: &ColoredPointCloud) -> Result<()> {
    let mut w = io::create_writer(path)?;
    let err = |e| Error::io(path, e);
    use std::io::Write;
    w.write_all(PC_MAGIC).map_err(err)?;
    io::write_u32(&mut w, cloud.len() as u32).map_err(err)?;
    for (p, c) in cloud.points().iter().zip(cloud.colors()) {
        for v in [p.x, p.y, p.z, c[0], c[1], c[2]] {
            io::write_f32(&mut w, v as f32).map_err(err)?;
        }
    }
    w.flush().map_err(err)?;
    Ok(())
}

pub fn read_point_cloud(path: &Path) -> Result<ColoredPointCloud> {
    let mut r = io::open_reader(path)?;
    io::read_magic(&mut r, PC_MAGIC, "bvpc", path)?;
    let count = io::read_u32(&mut r).map_err(|e| Error::io(path, e))? as usize;
    let mut cloud = ColoredPointCloud::empty();
    for _ in 0..count {
        let mut vals = [0f64; 6];
        for v in vals.iter_mut() {
            *v = io::read_f32(&mut r).map_err(|e| Error::io(path, e))? as f64;
        }
        if !Vec3::new(vals[0], vals[1], vals[2]).is_finite() {
            return Err(Error::format("bvpc", path, "non-finite point"));
        }
        cloud.push(Vec3::new(vals[0], vals[1], vals[2]), [vals[3], vals[4], vals[5]]);
    }
    Ok(cloud)
}
