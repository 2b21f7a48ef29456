//! The closed-loop keyframe rollout, the environment contract, the policy
//! adapters (trained model and ground-truth oracle), and the evaluation
//! harness over synthetic desk tasks.

pub mod tasks;

use std::path::Path;

use crate::actionspace::{
    discretize_rotation, refine, undiscretize_rotation, ActionPredictor, KeyframeAction,
    PredictorOutput, RefineSpec,
};
use crate::error::{Error, Result};
use crate::geometry::{crop_to_workspace, reconstruct_cloud, CameraFrame, ColoredPointCloud, Workspace};
use crate::heatmap::{action_target_map, write_heatmap_dump, Heatmap, HeatmapSpec};
use crate::io;
use crate::math::Vec3;
use crate::model::{forward, tokenize, view_input, ModelConfig, ToyBackboneParams};
use crate::projection::{argmax_grid, render_standard_views, score_grid, standard_views, write_view, RenderedView};

/// What an environment hands the policy after reset/step.
#[derive(Debug, Clone)]
pub struct Observation {
    pub frames: Vec<CameraFrame>,
    pub instruction: String,
    /// The expert's next keyframe, populated by synthetic environments for
    /// oracle rollouts and diagnostics. Model policies ignore it.
    pub expert_hint: Option<KeyframeAction>,
}

#[derive(Debug, Clone)]
pub struct StepOutcome {
    pub observation: Observation,
    pub done: bool,
    pub success: bool,
}

/// Environment contract: deterministic given the reset seed and the action
/// sequence; success implies done. Motion is kinematic (the commanded pose is
/// reached exactly).
pub trait Environment {
    fn reset(&mut self, seed: u64) -> Result<Observation>;
    fn step(&mut self, action: &KeyframeAction) -> Result<StepOutcome>;
    fn workspace(&self) -> Workspace;
}

/// Geometry settings shared by every pipeline stage.
#[derive(Debug, Clone)]
pub struct PipelineConfig {
    pub view_resolution: usize,
    pub coarse_dims: (usize, usize, usize),
    pub refine: RefineSpec,
    pub use_refine: bool,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            view_resolution: crate::projection::DEFAULT_VIEW_RESOLUTION,
            coarse_dims: (100, 100, 100),
            refine: RefineSpec::default(),
            use_refine: true,
        }
    }
}

/// Rollout budget and synthetic-task success tolerances.
#[derive(Debug, Clone, Copy)]
pub struct RolloutConfig {
    pub h_max: usize,
    pub trials: usize,
    /// Position tolerance (m) for reach/press style goals.
    pub pos_tol: f64,
    /// Orientation tolerance (degrees) where a task checks it.
    pub rot_tol_deg: f64,
}

impl RolloutConfig {
    pub fn validate(&self) -> Result<()> {
        if self.h_max < 1 || self.trials < 1 {
            return Err(Error::config("h_max and trials must be >= 1"));
        }
        Ok(())
    }
}

impl Default for RolloutConfig {
    fn default() -> Self {
        RolloutConfig { h_max: 25, trials: 25, pos_tol: 0.010, rot_tol_deg: 10.0 }
    }
}

/// Supplies a per-observation predictor (the instruction is fixed per trial,
/// the expert hint changes per step).
pub trait StepPolicy {
    fn predictor_for<'a>(&'a self, obs: &Observation) -> Result<Box<dyn ActionPredictor + 'a>>;
}

/// Trained-model policy.
pub struct ModelPolicy<'a> {
    pub params: &'a ToyBackboneParams<f32>,
    pub config: &'a ModelConfig,
}

struct ModelPredictor<'a> {
    params: &'a ToyBackboneParams<f32>,
    config: &'a ModelConfig,
    tokens: Vec<u32>,
}

impl ActionPredictor for ModelPredictor<'_> {
    fn predict(&self, views: &[RenderedView; 3]) -> Result<PredictorOutput> {
        let r = self.config.view_resolution;
        if views.iter().any(|v| v.resolution() != r) {
            return Err(Error::config(format!(
                "model expects {r}x{r} views, got {}",
                views[0].resolution()
            )));
        }
        let inputs: [Vec<f32>; 3] = [
            view_input(&views[0], self.config.input_channels),
            view_input(&views[1], self.config.input_channels),
            view_input(&views[2], self.config.input_channels),
        ];
        let out = forward(self.params, self.config, &inputs, &self.tokens);
        Ok(PredictorOutput {
            heatmaps: [out.heatmap(0, r), out.heatmap(1, r), out.heatmap(2, r)],
            rotation_bins: out.rotation_bins(),
            gripper: out.gripper_bit(),
            collision: out.collision_bit(),
        })
    }
}

impl StepPolicy for ModelPolicy<'_> {
    fn predictor_for<'a>(&'a self, obs: &Observation) -> Result<Box<dyn ActionPredictor + 'a>> {
        Ok(Box::new(ModelPredictor {
            params: self.params,
            config: self.config,
            tokens: tokenize(&obs.instruction),
        }))
    }
}

/// Test-only stand-in that emits ground-truth target maps for the expert's
/// next keyframe, isolating the geometric pipeline from learning quality.
pub struct OraclePolicy {
    pub heat_spec: HeatmapSpec,
}

impl Default for OraclePolicy {
    fn default() -> Self {
        OraclePolicy { heat_spec: HeatmapSpec::default() }
    }
}

pub struct OraclePredictor {
    pub target: KeyframeAction,
    pub heat_spec: HeatmapSpec,
}

impl ActionPredictor for OraclePredictor {
    fn predict(&self, views: &[RenderedView; 3]) -> Result<PredictorOutput> {
        let maps: Vec<Heatmap> = views
            .iter()
            .map(|v| {
                let clamped = v.spec.cuboid.clamp(self.target.position);
                action_target_map(clamped, &v.spec, &self.heat_spec)
            })
            .collect::<Result<_>>()?;
        Ok(PredictorOutput {
            heatmaps: [maps[0].clone(), maps[1].clone(), maps[2].clone()],
            rotation_bins: discretize_rotation(self.target.orientation),
            gripper: self.target.gripper,
            collision: self.target.collision,
        })
    }
}

impl StepPolicy for OraclePolicy {
    fn predictor_for<'a>(&'a self, obs: &Observation) -> Result<Box<dyn ActionPredictor + 'a>> {
        let target = obs
            .expert_hint
            .ok_or_else(|| Error::EnvFault("oracle policy needs an expert hint in the observation".into()))?;
        Ok(Box::new(OraclePredictor { target, heat_spec: self.heat_spec }))
    }
}

#[derive(Debug, Clone)]
pub struct StepLog {
    pub step: usize,
    pub coarse_argmax: Vec3,
    pub action: KeyframeAction,
    pub refined: bool,
}

#[derive(Debug, Clone)]
pub struct TrialResult {
    pub success: bool,
    pub steps: Vec<StepLog>,
}

/// Reconstruct and merge all camera frames, then crop to the workspace.
/// Merge first, crop second.
pub fn observation_cloud(obs: &Observation, ws: &Workspace) -> Result<ColoredPointCloud> {
    let mut merged = ColoredPointCloud::empty();
    for frame in &obs.frames {
        let (cloud, stats) = reconstruct_cloud(&frame.rgb, &frame.depth, &frame.camera)?;
        if stats.rejected_non_finite > 0 {
            log::debug!("observation frame rejected {} non-finite depths", stats.rejected_non_finite);
        }
        merged = merged.merged(&cloud);
    }
    Ok(crop_to_workspace(&merged, ws))
}

/// One closed-loop trial: reconstruct, render, predict, back-project, refine,
/// step; repeat until done or the step budget runs out.
pub fn rollout(
    env: &mut dyn Environment,
    policy: &dyn StepPolicy,
    pcfg: &PipelineConfig,
    h_max: usize,
    seed: u64,
    log_dir: Option<&Path>,
) -> Result<TrialResult> {
    if h_max < 1 {
        return Err(Error::config("h_max must be >= 1"));
    }
    let ws = env.workspace();
    let mut obs = env.reset(seed)?;
    let mut steps = Vec::new();
    let mut success = false;
    for step in 0..h_max {
        let cloud = observation_cloud(&obs, &ws)?;
        let views = render_standard_views(&cloud, &ws, pcfg.view_resolution)?;
        let predictor = policy.predictor_for(&obs)?;
        let out = predictor.predict(&views)?;
        let specs = standard_views(&ws, pcfg.view_resolution)?;
        let scores = score_grid(&out.heatmaps, &specs, pcfg.coarse_dims)?;
        let (_, coarse_pos) = argmax_grid(&scores);
        let first_action = KeyframeAction {
            position: coarse_pos,
            orientation: undiscretize_rotation(out.rotation_bins),
            gripper: out.gripper,
            collision: out.collision,
        };
        let action = if pcfg.use_refine {
            refine(&first_action, &cloud, &ws, &pcfg.refine, pcfg.view_resolution, predictor.as_ref())?.0
        } else {
            first_action
        };
        debug_assert!(ws.contains(action.position));
        if let Some(dir) = log_dir {
            log_step(dir, step, &views, &out, &action, coarse_pos)?;
        }
        steps.push(StepLog {
            step,
            coarse_argmax: coarse_pos,
            action,
            refined: pcfg.use_refine,
        });
        let outcome = env.step(&action)?;
        obs = outcome.observation;
        success = outcome.success;
        if outcome.done {
            break;
        }
    }
    if let Some(dir) = log_dir {
        let summary = dir.join("summary.txt");
        let mut text = format!("success {}\nsteps {}\n", success as u8, steps.len());
        for s in &steps {
            text.push_str(&format!(
                "step {} position {:.4} {:.4} {:.4} gripper {} collision {}\n",
                s.step, s.action.position.x, s.action.position.y, s.action.position.z,
                s.action.gripper as u8, s.action.collision as u8
            ));
        }
        std::fs::write(&summary, text).map_err(|e| Error::io(&summary, e))?;
    }
    Ok(TrialResult { success, steps })
}

fn log_step(
    dir: &Path,
    step: usize,
    views: &[RenderedView; 3],
    out: &PredictorOutput,
    action: &KeyframeAction,
    coarse_pos: Vec3,
) -> Result<()> {
    let step_dir = dir.join(format!("step_{step:02}"));
    std::fs::create_dir_all(&step_dir).map_err(|e| Error::io(&step_dir, e))?;
    for (view, hm) in views.iter().zip(&out.heatmaps) {
        let name = view.spec.axis.name();
        write_view(
            view,
            &step_dir.join(format!("{name}.ppm")),
            &step_dir.join(format!("{name}.depth.f32")),
        )?;
        write_heatmap_dump(&step_dir.join(format!("{name}.bvhm")), hm)?;
    }
    let note = step_dir.join("action.txt");
    std::fs::write(
        &note,
        format!(
            "coarse {:.4} {:.4} {:.4}\nfinal {:.4} {:.4} {:.4}\nbins {} {} {}\ngripper {}\ncollision {}\n",
            coarse_pos.x, coarse_pos.y, coarse_pos.z,
            action.position.x, action.position.y, action.position.z,
            out.rotation_bins[0], out.rotation_bins[1], out.rotation_bins[2],
            out.gripper as u8, out.collision as u8
        ),
    )
    .map_err(|e| Error::io(&note, e))?;
    Ok(())
}

#[derive(Debug, Clone)]
pub struct EvalRow {
    pub task: String,
    pub trials: usize,
    pub successes: usize,
}

impl EvalRow {
    pub fn rate(&self) -> f64 {
        self.successes as f64 / self.trials as f64
    }
}

#[derive(Debug, Clone)]
pub struct EvalReport {
    pub rows: Vec<EvalRow>,
}

impl EvalReport {
    pub fn mean_rate(&self) -> f64 {
        if self.rows.is_empty() {
            return 0.0;
        }
        self.rows.iter().map(|r| r.rate()).sum::<f64>() / self.rows.len() as f64
    }
}

/// Seeded evaluation: `trials` rollouts per task; trial scenes derive from
/// the root seed, the task name and the trial index, so reports reproduce
/// byte-for-byte and are invariant to task order.
pub fn evaluate(
    task_suite: &[tasks::SyntheticTask],
    policy: &dyn StepPolicy,
    pcfg: &PipelineConfig,
    rcfg: &RolloutConfig,
    root_seed: u64,
) -> Result<EvalReport> {
    rcfg.validate()?;
    if task_suite.is_empty() {
        return Err(Error::config("evaluation suite is empty"));
    }
    let mut rows = Vec::with_capacity(task_suite.len());
    for task in task_suite {
        let mut successes = 0usize;
        for trial in 0..rcfg.trials {
            let seed = crate::rng::derive_seed(root_seed, &format!("eval/{}", task.name()), trial as u64);
            let mut env = task.build_env(rcfg);
            match rollout(&mut env, policy, pcfg, rcfg.h_max, seed, None) {
                Ok(result) => {
                    if result.success {
                        successes += 1;
                    }
                }
                Err(Error::EnvFault(msg)) => {
                    log::warn!("trial {trial} of {}: environment fault: {msg}", task.name());
                }
                Err(e) => return Err(e),
            }
        }
        rows.push(EvalRow { task: task.name().to_string(), trials: rcfg.trials, successes });
    }
    Ok(EvalReport { rows })
}

/// Evaluation report CSV: one row per task plus an unweighted mean.
pub fn write_report_csv(path: &Path, report: &EvalReport) -> Result<()> {
    use std::io::Write;
    let mut w = io::create_writer(path)?;
    let err = |e| Error::io(path, e);
    writeln!(w, "task,trials,successes,rate").map_err(err)?;
    for row in &report.rows {
        writeln!(w, "{},{},{},{:.4}", row.task, row.trials, row.successes, row.rate()).map_err(err)?;
    }
    writeln!(w, "mean,,,{:.4}", report.mean_rate()).map_err(err)?;
    w.flush().map_err(err)?;
    Ok(())
}
