//! Training sample sources: fine-tuning samples assembled from demo shards
//! (with per-epoch rigid augmentation and second-stage crop views) and
//! pre-training samples from grounding splits. Also the synthetic grounding
//! dataset generator used by tests and the collect command.

use std::path::{Path, PathBuf};

use rand::Rng;

use crate::actionspace::{discretize_rotation, KeyframeAction, RefineSpec};
use crate::data::{
    augment, grounding_target, list_demo_dirs, read_demo, read_grounding_split, read_observation,
    write_grounding_split, AugmentSpec, BoxPx, GroundingRecord,
};
use crate::error::{Error, Result};
use crate::geometry::{crop_to_workspace, reconstruct_cloud, ColoredPointCloud, Workspace};
use crate::heatmap::{action_target_map, HeatmapSpec};
use crate::io;
use crate::model::{image_input, tokenize, view_input, BatchSource, ModelConfig, Sample, Scalar, Target};
use crate::projection::{render_standard_views, standard_views};

/// One fine-tuning supervision unit: a workspace-cropped cloud and the next
/// keyframe action.
pub struct FinetuneEntry {
    pub cloud: ColoredPointCloud,
    pub action: KeyframeAction,
    pub tokens: Vec<u32>,
}

/// Fine-tuning source. Every entry yields two dataset items: the full
/// workspace rendering and a zoomed second-stage crop centered near the
/// (augmented) target, jittered to mimic first-pass error, so one model
/// serves both refinement passes.
pub struct FinetuneSource<F: Scalar> {
    entries: Vec<FinetuneEntry>,
    ws: Workspace,
    model: ModelConfig,
    heat_spec: HeatmapSpec,
    augment_spec: Option<AugmentSpec>,
    refine: RefineSpec,
    seed: u64,
    _marker: std::marker::PhantomData<F>,
}

impl<F: Scalar> FinetuneSource<F> {
    pub fn new(
        entries: Vec<FinetuneEntry>,
        ws: Workspace,
        model: ModelConfig,
        heat_spec: HeatmapSpec,
        augment_spec: Option<AugmentSpec>,
        refine: RefineSpec,
        seed: u64,
    ) -> Self {
        FinetuneSource {
            entries,
            ws,
            model,
            heat_spec,
            augment_spec,
            refine,
            seed,
            _marker: std::marker::PhantomData,
        }
    }

    /// Load every keyframe pair from every demo shard under `root`.
    pub fn load_entries(root: &Path, ws: &Workspace) -> Result<Vec<FinetuneEntry>> {
        let dirs = list_demo_dirs(root)?;
        if dirs.is_empty() {
            return Err(Error::config(format!("no demo shards under {}", root.display())));
        }
        let mut entries = Vec::new();
        for dir in &dirs {
            let (_, demo, _) = read_demo(dir)?;
            let tokens = tokenize(&demo.instruction);
            for pair in &demo.pairs {
                let frames = read_observation(dir, &pair.observation)?;
                let mut merged = ColoredPointCloud::empty();
                for frame in &frames {
                    let (cloud, _) = reconstruct_cloud(&frame.rgb, &frame.depth, &frame.camera)?;
                    merged = merged.merged(&cloud);
                }
                entries.push(FinetuneEntry {
                    cloud: crop_to_workspace(&merged, ws),
                    action: pair.action,
                    tokens: tokens.clone(),
                });
            }
        }
        Ok(entries)
    }

    fn build_sample(&self, entry_idx: usize, fine_stage: bool, epoch: u64) -> Result<Sample<F>> {
        let entry = &self.entries[entry_idx];
        let r = self.model.view_resolution;
        let draw_seed = crate::rng::derive_seed(
            self.seed,
            "sample",
            (epoch << 32) ^ (entry_idx as u64 * 2 + fine_stage as u64),
        );
        let (cloud, action) = match &self.augment_spec {
            Some(spec) => {
                let (c, a, _) = augment(&entry.cloud, &entry.action, &self.ws, spec, draw_seed);
                (c, a)
            }
            None => (entry.cloud.clone(), entry.action),
        };
        let cuboid = if fine_stage {
            // Center the crop near the target with a jitter mimicking the
            // first pass's residual error.
            let mut rng = crate::rng::derive_rng(draw_seed, "fine-jitter", 0);
            let edge = self.ws.extent() * self.refine.crop_fraction;
            let jitter = crate::math::Vec3::new(
                rng.random_range(-0.15..0.15) * edge.x,
                rng.random_range(-0.15..0.15) * edge.y,
                rng.random_range(-0.15..0.15) * edge.z,
            );
            self.refine.crop_cuboid(action.position + jitter, &self.ws)
        } else {
            self.ws
        };
        let stage_cloud = if fine_stage { crop_to_workspace(&cloud, &cuboid) } else { cloud };
        let views = render_standard_views(&stage_cloud, &cuboid, r)?;
        let specs = standard_views(&cuboid, r)?;
        let mut gt: [Vec<F>; 3] = [vec![], vec![], vec![]];
        for (i, spec) in specs.iter().enumerate() {
            let hm = action_target_map(action.position, spec, &self.heat_spec)?;
            gt[i] = hm.values().iter().map(|&v| F::of(v)).collect();
        }
        Ok(Sample {
            views: [
                view_input(&views[0], self.model.input_channels),
                view_input(&views[1], self.model.input_channels),
                view_input(&views[2], self.model.input_channels),
            ],
            tokens: entry.tokens.clone(),
            target: Target {
                gt_heatmaps: gt,
                rotation_bins: discretize_rotation(action.orientation),
                gripper: action.gripper,
                collision: action.collision,
            },
        })
    }
}

impl<F: Scalar> BatchSource<F> for FinetuneSource<F> {
    fn len(&self) -> usize {
        self.entries.len() * 2
    }

    fn sample(&self, idx: usize, epoch: u64) -> Result<Sample<F>> {
        self.build_sample(idx / 2, idx % 2 == 1, epoch)
    }
}

/// Pre-training source: single images repeated across the three view slots,
/// supervised by grounding heatmaps only.
pub struct PretrainSource<F: Scalar> {
    samples: Vec<Sample<F>>,
}

impl<F: Scalar> PretrainSource<F> {
    pub fn load(split: &Path, model: &ModelConfig, p_min: f64, sigma_override: Option<f64>) -> Result<Self> {
        let records = read_grounding_split(split)?;
        if records.is_empty() {
            return Err(Error::config(format!("empty grounding split {}", split.display())));
        }
        let base = split.parent().unwrap_or_else(|| Path::new("."));
        let mut samples = Vec::with_capacity(records.len());
        for rec in &records {
            match Self::build_sample(&rec_with_base(rec, base), model, p_min, sigma_override) {
                Ok(s) => samples.push(s),
                Err(Error::DegenerateTarget(msg)) => {
                    log::warn!("skipping degenerate grounding record {}: {msg}", rec.image);
                }
                Err(e) => return Err(e),
            }
        }
        if samples.is_empty() {
            return Err(Error::config("every grounding record was degenerate"));
        }
        Ok(PretrainSource { samples })
    }

    fn build_sample(rec: &GroundingRecord, model: &ModelConfig, p_min: f64, sigma_override: Option<f64>) -> Result<Sample<F>> {
        let (w, h, pixels) = io::read_ppm(Path::new(&rec.image))?;
        if w != model.view_resolution || h != model.view_resolution {
            return Err(Error::config(format!(
                "grounding image {} is {}x{}, model expects {}",
                rec.image, w, h, model.view_resolution
            )));
        }
        let hm = grounding_target(rec, (w, h), model.view_resolution, p_min, sigma_override)?;
        let gt: Vec<F> = hm.values().iter().map(|&v| F::of(v)).collect();
        let view: Vec<F> = image_input(&pixels, model.input_channels);
        Ok(Sample {
            views: [view.clone(), view.clone(), view],
            tokens: tokenize(&rec.phrase),
            target: Target {
                gt_heatmaps: [gt.clone(), gt.clone(), gt],
                rotation_bins: [0, 0, 0],
                gripper: false,
                collision: false,
            },
        })
    }
}

fn rec_with_base(rec: &GroundingRecord, base: &Path) -> GroundingRecord {
    GroundingRecord {
        image: base.join(&rec.image).to_string_lossy().to_string(),
        phrase: rec.phrase.clone(),
        boxes: rec.boxes.clone(),
    }
}

impl<F: Scalar> BatchSource<F> for PretrainSource<F> {
    fn len(&self) -> usize {
        self.samples.len()
    }

    fn sample(&self, idx: usize, _epoch: u64) -> Result<Sample<F>> {
        Ok(self.samples[idx].clone())
    }
}

const GROUNDING_PALETTE: [(&str, [f64; 3]); 7] = [
    ("red", [0.85, 0.10, 0.10]),
    ("green", [0.10, 0.70, 0.15]),
    ("blue", [0.15, 0.25, 0.85]),
    ("yellow", [0.85, 0.78, 0.10]),
    ("purple", [0.55, 0.15, 0.70]),
    ("orange", [0.90, 0.50, 0.08]),
    ("cyan", [0.10, 0.75, 0.75]),
];

/// Generate a synthetic detection-grounding dataset: mid-gray images with
/// colored squares, phrases naming one color, boxes over every square of
/// that color. Returns the split file path.
pub fn generate_grounding_dataset(dir: &Path, count: usize, resolution: usize, seed: u64) -> Result<PathBuf> {
    if count == 0 {
        return Err(Error::config("grounding record count must be >= 1"));
    }
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let r = resolution;
    let mut records = Vec::with_capacity(count);
    for i in 0..count {
        let mut rng = crate::rng::derive_rng(seed, "grounding", i as u64);
        let mut pixels = vec![[0.5, 0.5, 0.5]; r * r];
        // 2-4 squares; the first color is the phrase target and may repeat.
        let n_squares = rng.random_range(2..=4usize);
        let mut color_order: Vec<usize> = (0..GROUNDING_PALETTE.len()).collect();
        for k in (1..color_order.len()).rev() {
            let j = rng.random_range(0..=k);
            color_order.swap(k, j);
        }
        let target_color = color_order[0];
        let duplicate_target = n_squares >= 3 && rng.random_range(0..4usize) == 0;
        let mut boxes: Vec<BoxPx> = Vec::new();
        let mut occupied: Vec<BoxPx> = Vec::new();
        for s in 0..n_squares {
            let color_idx = if s == 0 || (s == 1 && duplicate_target) {
                target_color
            } else {
                color_order[s]
            };
            let side = rng.random_range(r / 8..r / 4) as u32;
            let mut attempt = 0;
            let placed = loop {
                attempt += 1;
                if attempt > 50 {
                    break None;
                }
                let x0 = rng.random_range(1..(r as u32 - side - 1));
                let y0 = rng.random_range(1..(r as u32 - side - 1));
                let b = BoxPx::new(x0, y0, x0 + side, y0 + side)?;
                let overlaps = occupied.iter().any(|o| {
                    b.x0 < o.x1 + 2 && o.x0 < b.x1 + 2 && b.y0 < o.y1 + 2 && o.y0 < b.y1 + 2
                });
                if !overlaps {
                    break Some(b);
                }
            };
            let Some(b) = placed else { continue };
            occupied.push(b);
            let color = GROUNDING_PALETTE[color_idx].1;
            for y in b.y0..b.y1 {
                for x in b.x0..b.x1 {
                    pixels[y as usize * r + x as usize] = color;
                }
            }
            if color_idx == target_color {
                boxes.push(b);
            }
        }
        if boxes.is_empty() {
            // Target square failed to place; fall back to one centered box.
            let side = (r / 5) as u32;
            let x0 = (r as u32 - side) / 2;
            let b = BoxPx::new(x0, x0, x0 + side, x0 + side)?;
            let color = GROUNDING_PALETTE[target_color].1;
            for y in b.y0..b.y1 {
                for x in b.x0..b.x1 {
                    pixels[y as usize * r + x as usize] = color;
                }
            }
            boxes.push(b);
        }
        let image_name = format!("img_{i:04}.ppm");
        io::write_ppm(&dir.join(&image_name), r, r, &pixels)?;
        records.push(GroundingRecord {
            image: image_name,
            phrase: format!("find the {} block", GROUNDING_PALETTE[target_color].0),
            boxes,
        });
    }
    let split = dir.join("split.txt");
    write_grounding_split(&split, &records)?;
    Ok(split)
}
