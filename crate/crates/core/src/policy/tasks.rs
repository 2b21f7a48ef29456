//! Synthetic desk-scale manipulation tasks: seeded scene generation, a
//! kinematic (teleporting) environment with RGB-D virtual cameras, scripted
//! experts, and demo collection.

use std::path::{Path, PathBuf};

use rand::Rng;
use rand_chacha::ChaCha12Rng;

use super::{Environment, Observation, PipelineConfig, RolloutConfig, StepOutcome};
use crate::actionspace::{discretize_action, euler_from_quat, quat_from_euler, KeyframeAction};
use crate::data::{extract_keyframes, write_demo, write_observation, Trajectory, TrajectoryStep, DEFAULT_VELOCITY_THRESHOLD};
use crate::error::{Error, Result};
use crate::geometry::{CameraFrame, CameraModel, ColoredPointCloud, DepthImage, RgbImage, RigidTransform, Workspace};
use crate::math::{deg_to_rad, Mat3, Quat, Vec3};

/// Desk workspace: 0.6 x 0.6 m tabletop, 0.3 m of reachable height.
pub fn desk_workspace() -> Workspace {
    Workspace::new(Vec3::new(-0.3, -0.3, 0.0), Vec3::new(0.3, 0.3, 0.3)).unwrap()
}

const EE_HOME: Vec3 = Vec3 { x: 0.0, y: 0.0, z: 0.26 };
const GRASP_RADIUS: f64 = 0.03;
const STEP_CEILING: usize = 25;
const CAMERA_RESOLUTION: usize = 96;
const PRECISE_INSERT_TOL: f64 = 0.005;

const TRANSIT_VELOCITIES: [f64; 7] = [0.55, 0.42, 0.31, 0.47, 0.23, 0.36, 0.18];
const KEYFRAME_VELOCITIES: [f64; 7] = [0.02, 0.015, 0.01, 0.02, 0.01, 0.015, 0.005];

const PALETTE: [(&str, [f64; 3]); 7] = [
    ("red", [0.85, 0.10, 0.10]),
    ("green", [0.10, 0.70, 0.15]),
    ("blue", [0.15, 0.25, 0.85]),
    ("yellow", [0.85, 0.78, 0.10]),
    ("purple", [0.55, 0.15, 0.70]),
    ("orange", [0.90, 0.50, 0.08]),
    ("cyan", [0.10, 0.75, 0.75]),
];

const TABLE_COLOR: [f64; 3] = [0.78, 0.77, 0.75];
const SOCKET_BODY_COLOR: [f64; 3] = [0.22, 0.22, 0.26];
const SOCKET_NOTCH_COLOR: [f64; 3] = [0.92, 0.92, 0.85];
const EE_OPEN_COLOR: [f64; 3] = [1.0, 1.0, 1.0];
const EE_CLOSED_COLOR: [f64; 3] = [0.95, 0.05, 0.95];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum TaskKind {
    ReachBlock,
    PressButton,
    PickPlaceToPlate,
    PreciseInsert,
}

/// A synthetic task definition; `build_env` instantiates a fresh environment.
#[derive(Debug, Clone, Copy)]
pub struct SyntheticTask {
    pub kind: TaskKind,
}

impl SyntheticTask {
    pub fn all() -> Vec<SyntheticTask> {
        [
            TaskKind::ReachBlock,
            TaskKind::PressButton,
            TaskKind::PickPlaceToPlate,
            TaskKind::PreciseInsert,
        ]
        .iter()
        .map(|&kind| SyntheticTask { kind })
        .collect()
    }

    pub fn by_name(name: &str) -> Result<SyntheticTask> {
        let kind = match name {
            "reach-block" => TaskKind::ReachBlock,
            "press-button" => TaskKind::PressButton,
            "pick-place-to-plate" => TaskKind::PickPlaceToPlate,
            "precise-insert" => TaskKind::PreciseInsert,
            _ => return Err(Error::config(format!("unknown task '{name}'"))),
        };
        Ok(SyntheticTask { kind })
    }

    pub fn name(&self) -> &'static str {
        match self.kind {
            TaskKind::ReachBlock => "reach-block",
            TaskKind::PressButton => "press-button",
            TaskKind::PickPlaceToPlate => "pick-place-to-plate",
            TaskKind::PreciseInsert => "precise-insert",
        }
    }

    pub fn keyframe_count(&self) -> usize {
        match self.kind {
            TaskKind::ReachBlock => 1,
            TaskKind::PressButton => 2,
            TaskKind::PickPlaceToPlate | TaskKind::PreciseInsert => 3,
        }
    }

    pub fn build_env(&self, rcfg: &RolloutConfig) -> SyntheticEnv {
        let pos_tol = match self.kind {
            TaskKind::PreciseInsert => PRECISE_INSERT_TOL,
            _ => rcfg.pos_tol,
        };
        SyntheticEnv::new(self.kind, pos_tol, rcfg.rot_tol_deg)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum ObjKind {
    Block,
    Plate,
    Button,
    Socket,
}

#[derive(Debug, Clone)]
struct SceneObject {
    kind: ObjKind,
    color: [f64; 3],
    center: Vec3,
    size: Vec3,
    yaw_deg: f64,
    /// Secondary color (socket marker).
    accent: Option<[f64; 3]>,
}

impl SceneObject {
    fn top_z(&self) -> f64 {
        self.center.z + self.size.z / 2.0
    }

    fn half(&self) -> Vec3 {
        self.size * 0.5
    }

    /// Horizontal offset of `p` in the object's yaw frame.
    fn local_xy(&self, p: Vec3) -> (f64, f64) {
        let d = p - self.center;
        let c = deg_to_rad(self.yaw_deg).cos();
        let s = deg_to_rad(self.yaw_deg).sin();
        (c * d.x + s * d.y, -s * d.x + c * d.y)
    }
}

/// Kinematic tabletop environment. Motion teleports the end-effector to the
/// commanded pose; the collision flag is recorded but does not change the
/// dynamics. Deterministic given the reset seed and action sequence.
pub struct SyntheticEnv {
    kind: TaskKind,
    ws: Workspace,
    pos_tol: f64,
    rot_tol_deg: f64,
    cameras: Vec<CameraModel>,
    objects: Vec<SceneObject>,
    target_idx: usize,
    dest_idx: Option<usize>,
    instruction: String,
    ee_pos: Vec3,
    ee_quat: Quat,
    gripper_open: bool,
    attached: Option<usize>,
    hover_reached: bool,
    pressed: bool,
    success: bool,
    done: bool,
    step_count: usize,
    /// Collision flags commanded so far, for agreement diagnostics.
    pub collision_log: Vec<bool>,
}

fn look_at_camera(eye: Vec3, target: Vec3, focal_px: f64) -> CameraModel {
    let forward = (target - eye).normalized();
    let mut up = Vec3::new(0.0, 0.0, 1.0);
    if forward.cross(up).norm() < 1e-6 {
        up = Vec3::new(0.0, 1.0, 0.0);
    }
    let x_cam = forward.cross(up).normalized(); // image-right
    let y_cam = forward.cross(x_cam); // image-down
    let rotation = Mat3::from_cols(x_cam, y_cam, forward);
    let extrinsics = RigidTransform::new(rotation, eye).expect("camera basis orthonormal");
    CameraModel::simple(focal_px, CAMERA_RESOLUTION, CAMERA_RESOLUTION, extrinsics).unwrap()
}

impl SyntheticEnv {
    pub fn new(kind: TaskKind, pos_tol: f64, rot_tol_deg: f64) -> Self {
        let cameras = vec![
            look_at_camera(Vec3::new(0.0, -0.78, 0.58), Vec3::new(0.0, 0.0, 0.05), 118.0),
            look_at_camera(Vec3::new(0.62, 0.40, 0.62), Vec3::new(0.0, 0.0, 0.05), 118.0),
        ];
        SyntheticEnv {
            kind,
            ws: desk_workspace(),
            pos_tol,
            rot_tol_deg,
            cameras,
            objects: Vec::new(),
            target_idx: 0,
            dest_idx: None,
            instruction: String::new(),
            ee_pos: EE_HOME,
            ee_quat: Quat::IDENTITY,
            gripper_open: true,
            attached: None,
            hover_reached: false,
            pressed: false,
            success: false,
            done: false,
            step_count: 0,
            collision_log: Vec::new(),
        }
    }

    pub fn instruction(&self) -> &str {
        &self.instruction
    }

    fn sample_position(rng: &mut ChaCha12Rng, margin: f64, others: &[Vec3], min_sep: f64) -> Vec3 {
        loop {
            let p = Vec3::new(
                rng.random_range(-0.3 + margin..0.3 - margin),
                rng.random_range(-0.3 + margin..0.3 - margin),
                0.0,
            );
            if others.iter().all(|o| {
                let d = *o - p;
                (d.x * d.x + d.y * d.y).sqrt() >= min_sep
            }) {
                return p;
            }
        }
    }

    fn pick_colors(rng: &mut ChaCha12Rng, n: usize) -> Vec<(&'static str, [f64; 3])> {
        let mut order: Vec<usize> = (0..PALETTE.len()).collect();
        for i in (1..order.len()).rev() {
            let j = rng.random_range(0..=i);
            order.swap(i, j);
        }
        order.into_iter().take(n).map(|i| PALETTE[i]).collect()
    }

    fn block(center_xy: Vec3, color: (&'static str, [f64; 3])) -> SceneObject {
        let size = Vec3::new(0.04, 0.04, 0.04);
        SceneObject {
            kind: ObjKind::Block,
            color: color.1,
            center: Vec3::new(center_xy.x, center_xy.y, size.z / 2.0),
            size,
            yaw_deg: 0.0,
            accent: None,
        }
    }

    fn generate_scene(&mut self, seed: u64) {
        let mut rng = crate::rng::derive_rng(seed, "scene", self.kind as u64);
        self.objects.clear();
        self.dest_idx = None;
        match self.kind {
            TaskKind::ReachBlock => {
                let colors = Self::pick_colors(&mut rng, 3);
                let mut placed = Vec::new();
                for color in &colors {
                    let p = Self::sample_position(&mut rng, 0.08, &placed, 0.16);
                    placed.push(p);
                    self.objects.push(Self::block(p, *color));
                }
                self.target_idx = 0;
                self.instruction = format!("reach the {} block", colors[0].0);
            }
            TaskKind::PressButton => {
                let colors = Self::pick_colors(&mut rng, 2);
                let p_button = Self::sample_position(&mut rng, 0.08, &[], 0.0);
                let size = Vec3::new(0.05, 0.05, 0.018);
                self.objects.push(SceneObject {
                    kind: ObjKind::Button,
                    color: colors[0].1,
                    center: Vec3::new(p_button.x, p_button.y, size.z / 2.0),
                    size,
                    yaw_deg: 0.0,
                    accent: None,
                });
                let p_block = Self::sample_position(&mut rng, 0.08, &[p_button], 0.16);
                self.objects.push(Self::block(p_block, colors[1]));
                self.target_idx = 0;
                self.instruction = format!("press the {} button", colors[0].0);
            }
            TaskKind::PickPlaceToPlate => {
                let colors = Self::pick_colors(&mut rng, 3);
                let p_block = Self::sample_position(&mut rng, 0.08, &[], 0.0);
                let p_plate = Self::sample_position(&mut rng, 0.10, &[p_block], 0.20);
                let p_dist = Self::sample_position(&mut rng, 0.08, &[p_block, p_plate], 0.17);
                self.objects.push(Self::block(p_block, colors[0]));
                let plate_size = Vec3::new(0.13, 0.13, 0.01);
                self.objects.push(SceneObject {
                    kind: ObjKind::Plate,
                    color: colors[1].1,
                    center: Vec3::new(p_plate.x, p_plate.y, plate_size.z / 2.0),
                    size: plate_size,
                    yaw_deg: 0.0,
                    accent: None,
                });
                self.objects.push(Self::block(p_dist, colors[2]));
                self.target_idx = 0;
                self.dest_idx = Some(1);
                self.instruction = format!("put the {} block on the {} plate", colors[0].0, colors[1].0);
            }
            TaskKind::PreciseInsert => {
                let colors = Self::pick_colors(&mut rng, 2);
                let p_peg = Self::sample_position(&mut rng, 0.08, &[], 0.0);
                let p_socket = Self::sample_position(&mut rng, 0.10, &[p_peg], 0.22);
                let yaw_options = [-30.0, -15.0, 0.0, 15.0, 30.0];
                let yaw = yaw_options[rng.random_range(0..yaw_options.len())];
                let peg_size = Vec3::new(0.03, 0.03, 0.05);
                self.objects.push(SceneObject {
                    kind: ObjKind::Block,
                    color: colors[0].1,
                    center: Vec3::new(p_peg.x, p_peg.y, peg_size.z / 2.0),
                    size: peg_size,
                    yaw_deg: 0.0,
                    accent: None,
                });
                let socket_size = Vec3::new(0.11, 0.11, 0.012);
                self.objects.push(SceneObject {
                    kind: ObjKind::Socket,
                    color: SOCKET_BODY_COLOR,
                    center: Vec3::new(p_socket.x, p_socket.y, socket_size.z / 2.0),
                    size: socket_size,
                    yaw_deg: yaw,
                    accent: Some(colors[1].1),
                });
                self.target_idx = 0;
                self.dest_idx = Some(1);
                self.instruction = format!("insert the {} peg into the {} socket", colors[0].0, colors[1].0);
            }
        }
    }

    fn ee_yaw_deg(&self) -> f64 {
        euler_from_quat(self.ee_quat)[2]
    }

    /// The expert's next keyframe given the current state; None when the
    /// task is finished (or unrecoverable).
    pub fn expert_next_keyframe(&self) -> Option<KeyframeAction> {
        if self.success {
            return None;
        }
        let target = &self.objects[self.target_idx];
        match self.kind {
            TaskKind::ReachBlock => {
                let goal = Vec3::new(target.center.x, target.center.y, target.top_z() + 0.02);
                Some(KeyframeAction {
                    position: goal,
                    orientation: Quat::IDENTITY,
                    gripper: true,
                    collision: false,
                })
            }
            TaskKind::PressButton => {
                let press = self.press_point();
                let hover = Vec3::new(press.x, press.y, press.z + 0.05);
                if self.hover_reached {
                    Some(KeyframeAction { position: press, orientation: Quat::IDENTITY, gripper: true, collision: false })
                } else {
                    Some(KeyframeAction { position: hover, orientation: Quat::IDENTITY, gripper: true, collision: true })
                }
            }
            TaskKind::PickPlaceToPlate | TaskKind::PreciseInsert => {
                let dest = &self.objects[self.dest_idx.unwrap()];
                let place_quat = if self.kind == TaskKind::PreciseInsert {
                    quat_from_euler([0.0, 0.0, dest.yaw_deg.rem_euclid(360.0)])
                } else {
                    Quat::IDENTITY
                };
                if self.attached == Some(self.target_idx) {
                    // Hold above the destination and release.
                    let z = dest.top_z() + target.size.z / 2.0 + 0.002;
                    Some(KeyframeAction {
                        position: Vec3::new(dest.center.x, dest.center.y, z),
                        orientation: place_quat,
                        gripper: true,
                        collision: false,
                    })
                } else {
                    let grasp = target.center;
                    let pregrasp = Vec3::new(grasp.x, grasp.y, target.top_z() + 0.05);
                    let near_pregrasp = self.ee_pos.distance(pregrasp) <= 0.02;
                    if near_pregrasp && self.gripper_open {
                        Some(KeyframeAction { position: grasp, orientation: Quat::IDENTITY, gripper: false, collision: false })
                    } else {
                        Some(KeyframeAction { position: pregrasp, orientation: Quat::IDENTITY, gripper: true, collision: true })
                    }
                }
            }
        }
    }

    fn press_point(&self) -> Vec3 {
        let b = &self.objects[self.target_idx];
        Vec3::new(b.center.x, b.center.y, b.top_z() + 0.002)
    }

    fn check_success(&mut self) {
        let target = &self.objects[self.target_idx];
        let ok = match self.kind {
            TaskKind::ReachBlock => {
                let goal = Vec3::new(target.center.x, target.center.y, target.top_z() + 0.02);
                self.ee_pos.distance(goal) <= self.pos_tol
            }
            TaskKind::PressButton => self.pressed,
            TaskKind::PickPlaceToPlate => {
                let dest = &self.objects[self.dest_idx.unwrap()];
                let (lx, ly) = dest.local_xy(target.center);
                let fits = lx.abs() <= dest.half().x - target.half().x && ly.abs() <= dest.half().y - target.half().y;
                let resting = (target.center.z - (dest.top_z() + target.half().z)).abs() <= 0.004;
                self.attached.is_none() && fits && resting
            }
            TaskKind::PreciseInsert => {
                let dest = &self.objects[self.dest_idx.unwrap()];
                let (lx, ly) = dest.local_xy(target.center);
                let centered = (lx * lx + ly * ly).sqrt() <= self.pos_tol;
                let resting = (target.center.z - (dest.top_z() + target.half().z)).abs() <= 0.004;
                let yaw_err = crate::math::wrap_angle_dist_deg(target.yaw_deg, dest.yaw_deg);
                self.attached.is_none() && centered && resting && yaw_err <= self.rot_tol_deg
            }
        };
        if ok {
            self.success = true;
            self.done = true;
        }
    }

    /// Scene point cloud: table plane, objects, and the end-effector marker.
    fn scene_cloud(&self) -> ColoredPointCloud {
        let mut cloud = ColoredPointCloud::empty();
        // Table plane on an 8 mm grid.
        let step = 0.008;
        let mut x = -0.3 + step / 2.0;
        while x < 0.3 {
            let mut y = -0.3 + step / 2.0;
            while y < 0.3 {
                cloud.push(Vec3::new(x, y, 0.0005), TABLE_COLOR);
                y += step;
            }
            x += step;
        }
        for obj in &self.objects {
            sample_box(&mut cloud, obj);
        }
        // End-effector marker cube, colored by gripper state.
        let color = if self.gripper_open { EE_OPEN_COLOR } else { EE_CLOSED_COLOR };
        let marker = SceneObject {
            kind: ObjKind::Block,
            color,
            center: self.ee_pos,
            size: Vec3::new(0.024, 0.024, 0.024),
            yaw_deg: 0.0,
            accent: None,
        };
        sample_box(&mut cloud, &marker);
        cloud
    }

    fn observe(&self) -> Observation {
        let cloud = self.scene_cloud();
        let frames = self
            .cameras
            .iter()
            .map(|cam| render_rgbd(&cloud, cam))
            .collect();
        Observation {
            frames,
            instruction: self.instruction.clone(),
            expert_hint: self.expert_next_keyframe(),
        }
    }
}

/// Perspective z-buffer point splat into an RGB-D frame. Depth 0 marks empty
/// pixels (the invalid sentinel).
pub fn render_rgbd(cloud: &ColoredPointCloud, cam: &CameraModel) -> CameraFrame {
    let (w, h) = (cam.width, cam.height);
    let mut rgb = RgbImage::filled(w, h, [0.0, 0.0, 0.0]);
    let mut depth = DepthImage::filled(w, h, 0.0);
    for (p, c) in cloud.points().iter().zip(cloud.colors()) {
        let Some((u, v, z)) = cam.project(*p) else { continue };
        if u < 0.0 || v < 0.0 {
            continue;
        }
        let (ui, vi) = (u.floor() as usize, v.floor() as usize);
        if ui >= w || vi >= h {
            continue;
        }
        let existing = depth.at(ui, vi);
        if existing == 0.0 || z < existing {
            depth.set(ui, vi, z);
            rgb.set(ui, vi, *c);
        }
    }
    CameraFrame { rgb, depth, camera: cam.clone() }
}

fn sample_box(cloud: &mut ColoredPointCloud, obj: &SceneObject) {
    let half = obj.half();
    let yaw = deg_to_rad(obj.yaw_deg);
    let (s, c) = yaw.sin_cos();
    let place = |cloud: &mut ColoredPointCloud, local: Vec3, color: [f64; 3]| {
        let world = Vec3::new(
            obj.center.x + c * local.x - s * local.y,
            obj.center.y + s * local.x + c * local.y,
            obj.center.z + local.z,
        );
        cloud.push(world, color);
    };
    let top_color = |lx: f64, ly: f64| -> [f64; 3] {
        if obj.kind == ObjKind::Socket {
            if let Some(accent) = obj.accent {
                // Center marker square.
                if lx.abs() <= 0.012 && ly.abs() <= 0.012 {
                    return accent;
                }
                // Notch stripe toward the +x edge states the yaw.
                if lx >= half.x - 0.024 && lx <= half.x - 0.004 && ly.abs() <= 0.009 {
                    return SOCKET_NOTCH_COLOR;
                }
            }
        }
        obj.color
    };
    // Top face, 5 mm grid.
    let step_top = 0.005;
    let mut lx = -half.x + step_top / 2.0;
    while lx < half.x {
        let mut ly = -half.y + step_top / 2.0;
        while ly < half.y {
            place(cloud, Vec3::new(lx, ly, half.z), top_color(lx, ly));
            ly += step_top;
        }
        lx += step_top;
    }
    // Side faces, 6 mm grid.
    let step_side = 0.006;
    let mut a = -half.x + step_side / 2.0;
    while a < half.x {
        let mut lz = -half.z + step_side / 2.0;
        while lz < half.z {
            place(cloud, Vec3::new(a, -half.y, lz), obj.color);
            place(cloud, Vec3::new(a, half.y, lz), obj.color);
            lz += step_side;
        }
        a += step_side;
    }
    let mut b = -half.y + step_side / 2.0;
    while b < half.y {
        let mut lz = -half.z + step_side / 2.0;
        while lz < half.z {
            place(cloud, Vec3::new(-half.x, b, lz), obj.color);
            place(cloud, Vec3::new(half.x, b, lz), obj.color);
            lz += step_side;
        }
        b += step_side;
    }
}

impl Environment for SyntheticEnv {
    fn reset(&mut self, seed: u64) -> Result<Observation> {
        self.generate_scene(seed);
        self.ee_pos = EE_HOME;
        self.ee_quat = Quat::IDENTITY;
        self.gripper_open = true;
        self.attached = None;
        self.hover_reached = false;
        self.pressed = false;
        self.success = false;
        self.done = false;
        self.step_count = 0;
        self.collision_log.clear();
        Ok(self.observe())
    }

    fn step(&mut self, action: &KeyframeAction) -> Result<StepOutcome> {
        if self.done {
            return Err(Error::EnvFault("step called after the episode finished".into()));
        }
        if self.objects.is_empty() {
            return Err(Error::EnvFault("step called before reset".into()));
        }
        // Teleport to the commanded pose.
        self.ee_pos = self.ws.clamp(action.position);
        self.ee_quat = action.orientation;
        self.collision_log.push(action.collision);
        if let Some(idx) = self.attached {
            let yaw = self.ee_yaw_deg().rem_euclid(360.0);
            let obj = &mut self.objects[idx];
            obj.center = self.ee_pos;
            obj.yaw_deg = yaw;
        }
        // Gripper transitions.
        let was_open = self.gripper_open;
        self.gripper_open = action.gripper;
        if was_open && !action.gripper {
            // Closing: grasp the nearest block within reach.
            let mut best: Option<(usize, f64)> = None;
            for (i, obj) in self.objects.iter().enumerate() {
                if obj.kind != ObjKind::Block {
                    continue;
                }
                let d = obj.center.distance(self.ee_pos);
                if d <= GRASP_RADIUS && best.map_or(true, |(_, bd)| d < bd) {
                    best = Some((i, d));
                }
            }
            if let Some((i, _)) = best {
                self.attached = Some(i);
                let yaw = self.ee_yaw_deg().rem_euclid(360.0);
                let obj = &mut self.objects[i];
                obj.center = self.ee_pos;
                obj.yaw_deg = yaw;
            }
        } else if !was_open && action.gripper {
            // Opening: release and settle onto the support below.
            if let Some(idx) = self.attached.take() {
                let (cx, cy) = (self.objects[idx].center.x, self.objects[idx].center.y);
                let half_z = self.objects[idx].half().z;
                let mut rest = half_z; // table
                for (i, support) in self.objects.iter().enumerate() {
                    if i == idx || !matches!(support.kind, ObjKind::Plate | ObjKind::Socket) {
                        continue;
                    }
                    let (lx, ly) = support.local_xy(Vec3::new(cx, cy, 0.0));
                    if lx.abs() <= support.half().x && ly.abs() <= support.half().y {
                        rest = support.top_z() + half_z;
                    }
                }
                let obj = &mut self.objects[idx];
                obj.center = Vec3::new(cx, cy, rest);
            }
        }
        // Button latch.
        if self.kind == TaskKind::PressButton {
            let press = self.press_point();
            let hover = Vec3::new(press.x, press.y, press.z + 0.05);
            if self.ee_pos.distance(hover) <= 0.02 {
                self.hover_reached = true;
            }
            if self.ee_pos.distance(press) <= self.pos_tol {
                self.pressed = true;
            }
        }
        self.step_count += 1;
        self.check_success();
        if self.step_count >= STEP_CEILING {
            self.done = true;
        }
        Ok(StepOutcome {
            observation: self.observe(),
            done: self.done,
            success: self.success,
        })
    }

    fn workspace(&self) -> Workspace {
        self.ws
    }
}

/// Run the scripted expert through the environment, recording a dense
/// trajectory (two transit micro-steps between keyframes, synthesized joint
/// velocities above/below the stationarity threshold), then extract keyframes
/// and write a demo shard. Scenes where the expert fails are resampled.
pub fn collect_demos(
    task: &SyntheticTask,
    n: usize,
    root_seed: u64,
    pcfg: &PipelineConfig,
    rcfg: &RolloutConfig,
    out_dir: &Path,
) -> Result<Vec<PathBuf>> {
    if n == 0 {
        return Err(Error::config("demo count must be >= 1"));
    }
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let mut dirs = Vec::with_capacity(n);
    for demo_idx in 0..n {
        let mut written = false;
        for attempt in 0..20u64 {
            let scene_seed = crate::rng::derive_seed(
                root_seed,
                &format!("demo-scene/{}", task.name()),
                demo_idx as u64 * 1000 + attempt,
            );
            let demo_dir = out_dir.join(format!("demo_{demo_idx:03}"));
            match run_expert(task, scene_seed, pcfg, rcfg, &demo_dir)? {
                true => {
                    dirs.push(demo_dir);
                    written = true;
                    break;
                }
                false => {
                    log::warn!(
                        "expert failed on {} scene (demo {demo_idx}, attempt {attempt}); resampling",
                        task.name()
                    );
                    if demo_dir.exists() {
                        std::fs::remove_dir_all(&demo_dir).map_err(|e| Error::io(&demo_dir, e))?;
                    }
                }
            }
        }
        if !written {
            return Err(Error::EnvFault(format!(
                "expert could not solve any sampled {} scene for demo {demo_idx}",
                task.name()
            )));
        }
    }
    Ok(dirs)
}

fn run_expert(
    task: &SyntheticTask,
    scene_seed: u64,
    pcfg: &PipelineConfig,
    rcfg: &RolloutConfig,
    demo_dir: &Path,
) -> Result<bool> {
    let mut env = task.build_env(rcfg);
    let mut obs = env.reset(scene_seed)?;
    std::fs::create_dir_all(demo_dir).map_err(|e| Error::io(demo_dir, e))?;

    let mut steps: Vec<TrajectoryStep> = Vec::new();
    let first_obs = write_observation(demo_dir, &obs.frames)?;
    steps.push(TrajectoryStep {
        observation: first_obs,
        position: EE_HOME,
        orientation: Quat::IDENTITY,
        gripper: true,
        collision: true,
        joint_velocities: TRANSIT_VELOCITIES.to_vec(),
        is_final: false,
    });

    let mut prev_pos = EE_HOME;
    let mut prev_quat = Quat::IDENTITY;
    let mut prev_gripper = true;
    let mut success = false;
    for _ in 0..task.keyframe_count() + 2 {
        let Some(kf) = obs.expert_hint else { break };
        // Two transit micro-steps, then the keyframe itself.
        for frac in [1.0 / 3.0, 2.0 / 3.0] {
            let micro = KeyframeAction {
                position: prev_pos + (kf.position - prev_pos) * frac,
                orientation: prev_quat.slerp(kf.orientation, frac),
                gripper: prev_gripper,
                collision: kf.collision,
            };
            let outcome = env.step(&micro)?;
            let obs_path = write_observation(demo_dir, &outcome.observation.frames)?;
            steps.push(TrajectoryStep {
                observation: obs_path,
                position: micro.position,
                orientation: micro.orientation,
                gripper: micro.gripper,
                collision: micro.collision,
                joint_velocities: TRANSIT_VELOCITIES.to_vec(),
                is_final: false,
            });
            obs = outcome.observation;
            if env.done {
                break;
            }
        }
        if env.done && !env.success {
            break;
        }
        if !env.done {
            let outcome = env.step(&kf)?;
            let obs_path = write_observation(demo_dir, &outcome.observation.frames)?;
            steps.push(TrajectoryStep {
                observation: obs_path,
                position: kf.position,
                orientation: kf.orientation,
                gripper: kf.gripper,
                collision: kf.collision,
                joint_velocities: KEYFRAME_VELOCITIES.to_vec(),
                is_final: false,
            });
            obs = outcome.observation;
            prev_pos = kf.position;
            prev_quat = kf.orientation;
            prev_gripper = kf.gripper;
        }
        success = env.success;
        if env.done {
            break;
        }
    }
    if !success || steps.len() < 2 {
        return Ok(false);
    }
    if let Some(last) = steps.last_mut() {
        last.is_final = true;
    }
    let traj = Trajectory { instruction: env.instruction().to_string(), steps };
    traj.validate()?;
    let demo = extract_keyframes(&traj, DEFAULT_VELOCITY_THRESHOLD);
    let ws = env.workspace();
    let discretized: Vec<_> = demo
        .pairs
        .iter()
        .map(|pair| discretize_action(&pair.action, &ws, pcfg.coarse_dims))
        .collect();
    write_demo(demo_dir, &traj, &demo, &discretized)?;
    Ok(true)
}
