//! Run configuration: a flat `key = value` text format with `[section]`
//! headers. Every field is validated through the owning module's
//! constructors at load time; unknown keys are rejected by name.

use std::collections::BTreeMap;
use std::path::Path;

use crate::actionspace::RefineSpec;
use crate::data::AugmentSpec;
use crate::error::{Error, Result};
use crate::geometry::Workspace;
use crate::heatmap::HeatmapSpec;
use crate::math::Vec3;
use crate::model::{ModelConfig, TrainConfig, TrainMode, VOCAB_SIZE};
use crate::policy::{PipelineConfig, RolloutConfig};

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub workspace_min: Vec3,
    pub workspace_max: Vec3,
    pub view_resolution: usize,
    pub coarse_dims: (usize, usize, usize),
    pub heat_sigma_px: f64,
    pub heat_p_min: f64,
    pub grounding_p_min: f64,
    pub grounding_sigma_override: Option<f64>,
    pub augment_enabled: bool,
    pub augment_max_yaw_deg: f64,
    pub augment_max_translation: Vec3,
    pub augment_resample_limit: usize,
    pub refine_enabled: bool,
    pub refine_crop_fraction: f64,
    pub refine_fine_dims: (usize, usize, usize),
    pub model_patch: usize,
    pub model_feature_dim: usize,
    pub model_vocab: usize,
    pub model_aux_hidden: usize,
    pub model_channels: usize,
    pub train_steps: usize,
    pub train_batch_size: usize,
    pub train_learning_rate: f64,
    pub train_grad_clip: f64,
    pub pretrain_steps: usize,
    pub pretrain_batch_size: usize,
    pub pretrain_learning_rate: f64,
    pub pretrain_grad_clip: f64,
    pub rollout_h_max: usize,
    pub rollout_trials: usize,
    pub rollout_pos_tol: f64,
    pub rollout_rot_tol_deg: f64,
    pub root_seed: u64,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            workspace_min: Vec3::new(-0.3, -0.3, 0.0),
            workspace_max: Vec3::new(0.3, 0.3, 0.3),
            view_resolution: 224,
            coarse_dims: (100, 100, 100),
            heat_sigma_px: 1.5,
            heat_p_min: 0.05,
            grounding_p_min: 0.05,
            grounding_sigma_override: None,
            augment_enabled: true,
            augment_max_yaw_deg: 45.0,
            augment_max_translation: Vec3::new(0.1, 0.1, 0.02),
            augment_resample_limit: 10,
            refine_enabled: true,
            refine_crop_fraction: 0.25,
            refine_fine_dims: (128, 128, 128),
            model_patch: 16,
            model_feature_dim: 32,
            model_vocab: VOCAB_SIZE,
            model_aux_hidden: 128,
            model_channels: 3,
            train_steps: 1500,
            train_batch_size: 8,
            train_learning_rate: 0.4,
            train_grad_clip: 5.0,
            pretrain_steps: 600,
            pretrain_batch_size: 8,
            pretrain_learning_rate: 0.4,
            pretrain_grad_clip: 5.0,
            rollout_h_max: 25,
            rollout_trials: 25,
            rollout_pos_tol: 0.010,
            rollout_rot_tol_deg: 10.0,
            root_seed: 7,
        }
    }
}

impl RunConfig {
    pub fn workspace(&self) -> Result<Workspace> {
        Workspace::new(self.workspace_min, self.workspace_max)
    }

    pub fn heat_spec(&self) -> Result<HeatmapSpec> {
        HeatmapSpec::new(self.heat_sigma_px, self.heat_p_min)
    }

    pub fn augment_spec(&self) -> Result<Option<AugmentSpec>> {
        if !self.augment_enabled {
            return Ok(None);
        }
        Ok(Some(AugmentSpec::new(
            self.augment_max_yaw_deg,
            self.augment_max_translation,
            self.augment_resample_limit,
        )?))
    }

    pub fn refine_spec(&self) -> Result<RefineSpec> {
        RefineSpec::new(self.refine_crop_fraction, self.refine_fine_dims)
    }

    pub fn model_config(&self) -> Result<ModelConfig> {
        let config = ModelConfig {
            view_resolution: self.view_resolution,
            patch: self.model_patch,
            feature_dim: self.model_feature_dim,
            vocab: self.model_vocab,
            aux_hidden: self.model_aux_hidden,
            input_channels: self.model_channels,
        };
        config.validate()?;
        Ok(config)
    }

    pub fn pipeline_config(&self) -> Result<PipelineConfig> {
        Ok(PipelineConfig {
            view_resolution: self.view_resolution,
            coarse_dims: self.coarse_dims,
            refine: self.refine_spec()?,
            use_refine: self.refine_enabled,
        })
    }

    pub fn rollout_config(&self) -> Result<RolloutConfig> {
        let cfg = RolloutConfig {
            h_max: self.rollout_h_max,
            trials: self.rollout_trials,
            pos_tol: self.rollout_pos_tol,
            rot_tol_deg: self.rollout_rot_tol_deg,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn train_config(&self, mode: TrainMode, seed_label: &str) -> Result<TrainConfig> {
        let (steps, batch_size, learning_rate, grad_clip) = match mode {
            TrainMode::Pretrain => (
                self.pretrain_steps,
                self.pretrain_batch_size,
                self.pretrain_learning_rate,
                self.pretrain_grad_clip,
            ),
            TrainMode::Finetune => (
                self.train_steps,
                self.train_batch_size,
                self.train_learning_rate,
                self.train_grad_clip,
            ),
        };
        let cfg = TrainConfig {
            steps,
            batch_size,
            learning_rate,
            grad_clip,
            mode,
            seed: crate::rng::derive_seed(self.root_seed, seed_label, 0),
        };
        cfg.validate()?;
        Ok(cfg)
    }

    /// Validate every section through the owning constructors.
    pub fn validate(&self) -> Result<()> {
        self.workspace()?;
        self.heat_spec()?;
        HeatmapSpec::new(2.0, self.grounding_p_min)?;
        self.augment_spec()?;
        self.refine_spec()?;
        self.model_config()?;
        self.pipeline_config()?;
        self.rollout_config()?;
        self.train_config(TrainMode::Finetune, "check")?;
        self.train_config(TrainMode::Pretrain, "check")?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<RunConfig> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let cfg = RunConfig::from_text(&text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_text(text: &str) -> Result<RunConfig> {
        let mut cfg = RunConfig::default();
        let mut section = String::new();
        let mut seen: BTreeMap<String, String> = BTreeMap::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            if let Some(name) = line.strip_prefix('[').and_then(|l| l.strip_suffix(']')) {
                section = name.trim().to_string();
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::config(format!("line {}: expected `key = value`", lineno + 1)))?;
            let full = format!("{}.{}", section, key.trim());
            seen.insert(full, value.trim().to_string());
        }
        for (key, value) in &seen {
            cfg.apply(key, value)?;
        }
        Ok(cfg)
    }

    fn apply(&mut self, key: &str, value: &str) -> Result<()> {
        let parse_f64 = |v: &str| -> Result<f64> {
            v.parse().map_err(|_| Error::config(format!("field {key}: bad number '{v}'")))
        };
        let parse_usize = |v: &str| -> Result<usize> {
            v.parse().map_err(|_| Error::config(format!("field {key}: bad integer '{v}'")))
        };
        let parse_vec3 = |v: &str| -> Result<Vec3> {
            let parts: Vec<f64> = v.split_whitespace().filter_map(|t| t.parse().ok()).collect();
            if parts.len() != 3 {
                return Err(Error::config(format!("field {key}: expected 3 numbers, got '{v}'")));
            }
            Ok(Vec3::new(parts[0], parts[1], parts[2]))
        };
        let parse_dims = |v: &str| -> Result<(usize, usize, usize)> {
            let parts: Vec<usize> = v.split_whitespace().filter_map(|t| t.parse().ok()).collect();
            if parts.len() != 3 {
                return Err(Error::config(format!("field {key}: expected 3 integers, got '{v}'")));
            }
            Ok((parts[0], parts[1], parts[2]))
        };
        let parse_bool = |v: &str| -> Result<bool> {
            match v {
                "true" | "1" | "yes" => Ok(true),
                "false" | "0" | "no" => Ok(false),
                _ => Err(Error::config(format!("field {key}: bad bool '{v}'"))),
            }
        };
        match key {
            "workspace.min" => self.workspace_min = parse_vec3(value)?,
            "workspace.max" => self.workspace_max = parse_vec3(value)?,
            "views.resolution" => self.view_resolution = parse_usize(value)?,
            "grid.coarse" => self.coarse_dims = parse_dims(value)?,
            "heatmap.sigma_px" => self.heat_sigma_px = parse_f64(value)?,
            "heatmap.p_min" => self.heat_p_min = parse_f64(value)?,
            "heatmap.grounding_p_min" => self.grounding_p_min = parse_f64(value)?,
            "heatmap.grounding_sigma_override" => {
                self.grounding_sigma_override = if value == "none" { None } else { Some(parse_f64(value)?) };
            }
            "augment.enabled" => self.augment_enabled = parse_bool(value)?,
            "augment.max_yaw_deg" => self.augment_max_yaw_deg = parse_f64(value)?,
            "augment.max_translation" => self.augment_max_translation = parse_vec3(value)?,
            "augment.resample_limit" => self.augment_resample_limit = parse_usize(value)?,
            "refine.enabled" => self.refine_enabled = parse_bool(value)?,
            "refine.crop_fraction" => self.refine_crop_fraction = parse_f64(value)?,
            "refine.fine" => self.refine_fine_dims = parse_dims(value)?,
            "model.patch" => self.model_patch = parse_usize(value)?,
            "model.feature_dim" => self.model_feature_dim = parse_usize(value)?,
            "model.vocab" => self.model_vocab = parse_usize(value)?,
            "model.aux_hidden" => self.model_aux_hidden = parse_usize(value)?,
            "model.channels" => {
                self.model_channels = match value {
                    "rgb" => 3,
                    "rgbd" => 4,
                    _ => return Err(Error::config(format!("field {key}: expected rgb or rgbd, got '{value}'"))),
                };
            }
            "train.steps" => self.train_steps = parse_usize(value)?,
            "train.batch_size" => self.train_batch_size = parse_usize(value)?,
            "train.learning_rate" => self.train_learning_rate = parse_f64(value)?,
            "train.grad_clip" => self.train_grad_clip = parse_f64(value)?,
            "pretrain.steps" => self.pretrain_steps = parse_usize(value)?,
            "pretrain.batch_size" => self.pretrain_batch_size = parse_usize(value)?,
            "pretrain.learning_rate" => self.pretrain_learning_rate = parse_f64(value)?,
            "pretrain.grad_clip" => self.pretrain_grad_clip = parse_f64(value)?,
            "rollout.h_max" => self.rollout_h_max = parse_usize(value)?,
            "rollout.trials" => self.rollout_trials = parse_usize(value)?,
            "rollout.pos_tol" => self.rollout_pos_tol = parse_f64(value)?,
            "rollout.rot_tol_deg" => self.rollout_rot_tol_deg = parse_f64(value)?,
            "seeds.root" => {
                self.root_seed = value
                    .parse()
                    .map_err(|_| Error::config(format!("field {key}: bad seed '{value}'")))?;
            }
            _ => return Err(Error::config(format!("unknown config field '{key}'"))),
        }
        Ok(())
    }

    pub fn to_text(&self) -> String {
        let v3 = |v: Vec3| format!("{} {} {}", v.x, v.y, v.z);
        let d3 = |d: (usize, usize, usize)| format!("{} {} {}", d.0, d.1, d.2);
        format!(
            "[workspace]\nmin = {}\nmax = {}\n\n[views]\nresolution = {}\n\n[grid]\ncoarse = {}\n\n\
             [heatmap]\nsigma_px = {}\np_min = {}\ngrounding_p_min = {}\ngrounding_sigma_override = {}\n\n\
             [augment]\nenabled = {}\nmax_yaw_deg = {}\nmax_translation = {}\nresample_limit = {}\n\n\
             [refine]\nenabled = {}\ncrop_fraction = {}\nfine = {}\n\n\
             [model]\npatch = {}\nfeature_dim = {}\nvocab = {}\naux_hidden = {}\nchannels = {}\n\n\
             [train]\nsteps = {}\nbatch_size = {}\nlearning_rate = {}\ngrad_clip = {}\n\n\
             [pretrain]\nsteps = {}\nbatch_size = {}\nlearning_rate = {}\ngrad_clip = {}\n\n\
             [rollout]\nh_max = {}\ntrials = {}\npos_tol = {}\nrot_tol_deg = {}\n\n[seeds]\nroot = {}\n",
            v3(self.workspace_min),
            v3(self.workspace_max),
            self.view_resolution,
            d3(self.coarse_dims),
            self.heat_sigma_px,
            self.heat_p_min,
            self.grounding_p_min,
            self.grounding_sigma_override.map_or("none".to_string(), |v| v.to_string()),
            self.augment_enabled,
            self.augment_max_yaw_deg,
            v3(self.augment_max_translation),
            self.augment_resample_limit,
            self.refine_enabled,
            self.refine_crop_fraction,
            d3(self.refine_fine_dims),
            self.model_patch,
            self.model_feature_dim,
            self.model_vocab,
            self.model_aux_hidden,
            if self.model_channels == 4 { "rgbd" } else { "rgb" },
            self.train_steps,
            self.train_batch_size,
            self.train_learning_rate,
            self.train_grad_clip,
            self.pretrain_steps,
            self.pretrain_batch_size,
            self.pretrain_learning_rate,
            self.pretrain_grad_clip,
            self.rollout_h_max,
            self.rollout_trials,
            self.rollout_pos_tol,
            self.rollout_rot_tol_deg,
            self.root_seed
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn text_round_trip() {
        let mut cfg = RunConfig::default();
        cfg.view_resolution = 64;
        cfg.coarse_dims = (50, 50, 40);
        cfg.model_channels = 4;
        cfg.grounding_sigma_override = Some(2.5);
        let text = cfg.to_text();
        let back = RunConfig::from_text(&text).unwrap();
        assert_eq!(cfg, back);
    }

    #[test]
    fn unknown_field_is_named() {
        let err = RunConfig::from_text("[views]\nresolutoin = 64\n").unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("views.resolutoin"), "{msg}");
    }

    #[test]
    fn default_validates() {
        RunConfig::default().validate().unwrap();
    }
}
