//! Desk-scale 3D manipulation policy pipeline: orthographic tri-view
//! rendering of colored point clouds, per-view heatmap action prediction
//! with a pluggable backbone, back-projection to 3D keyframe actions,
//! coarse-to-fine refinement, and a train/evaluate loop over synthetic
//! tabletop tasks and detection-grounding pre-training data.

pub mod actionspace;
pub mod config;
pub mod data;
pub mod dataset;
pub mod error;
pub mod geometry;
pub mod heatmap;
pub mod io;
pub mod math;
pub mod model;
pub mod policy;
pub mod projection;
pub mod rng;

pub use actionspace::{DiscretizedAction, KeyframeAction, RefineSpec};
pub use config::RunConfig;
pub use error::{Error, Result};
pub use geometry::{CameraModel, ColoredPointCloud, RigidTransform, Workspace};
pub use heatmap::{Heatmap, HeatmapSpec};
pub use math::{Mat3, Quat, Vec3};
pub use projection::{GridScores, OrthoViewSpec, RenderedView, ViewAxis};
