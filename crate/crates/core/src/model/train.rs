//! Seeded mini-batch gradient-descent training loop over a batch source.

use std::path::Path;

use super::{backward, sgd_step, LossBreakdown, ModelConfig, Sample, Scalar, ToyBackboneParams, TrainMode};
use crate::error::{Error, Result};
use crate::io;

/// Materializes samples on demand; augmentation may vary with the epoch.
pub trait BatchSource<F: Scalar> {
    fn len(&self) -> usize;
    fn is_empty(&self) -> bool {
        self.len() == 0
    }
    fn sample(&self, idx: usize, epoch: u64) -> Result<Sample<F>>;
}

/// A fixed slice of pre-built samples.
pub struct SliceSource<'a, F: Scalar>(pub &'a [Sample<F>]);

impl<F: Scalar> BatchSource<F> for SliceSource<'_, F> {
    fn len(&self) -> usize {
        self.0.len()
    }
    fn sample(&self, idx: usize, _epoch: u64) -> Result<Sample<F>> {
        Ok(self.0[idx].clone())
    }
}

#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Global gradient-norm clip; <= 0 disables clipping.
    pub grad_clip: f64,
    pub mode: TrainMode,
    pub seed: u64,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 || self.batch_size == 0 {
            return Err(Error::config("steps and batch size must be nonzero"));
        }
        if !(self.learning_rate > 0.0) {
            return Err(Error::config("learning rate must be positive"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy)]
pub struct CurvePoint {
    pub step: usize,
    pub loss: LossBreakdown,
}

/// Shuffled mini-batch descent for a fixed number of steps. Degenerate
/// samples are skipped and logged; an epoch is one pass over the shuffled
/// index set.
pub fn train<F: Scalar>(
    mut params: ToyBackboneParams<F>,
    config: &ModelConfig,
    source: &dyn BatchSource<F>,
    tcfg: &TrainConfig,
) -> Result<(ToyBackboneParams<F>, Vec<CurvePoint>)> {
    tcfg.validate()?;
    if source.is_empty() {
        return Err(Error::config("training dataset is empty"));
    }
    let n = source.len();
    let mut curve = Vec::with_capacity(tcfg.steps);
    let mut epoch: u64 = 0;
    let mut order = shuffled_indices(n, tcfg.seed, epoch);
    let mut cursor = 0usize;
    let mut skipped = 0usize;
    let mut step = 0usize;
    let mut dry_batches = 0usize;
    while step < tcfg.steps {
        let mut batch: Vec<Sample<F>> = Vec::with_capacity(tcfg.batch_size);
        let mut attempts = 0usize;
        while batch.len() < tcfg.batch_size && attempts < tcfg.batch_size * 8 {
            attempts += 1;
            if cursor >= order.len() {
                epoch += 1;
                order = shuffled_indices(n, tcfg.seed, epoch);
                cursor = 0;
            }
            let idx = order[cursor];
            cursor += 1;
            match source.sample(idx, epoch) {
                Ok(s) => batch.push(s),
                Err(Error::DegenerateTarget(msg)) => {
                    skipped += 1;
                    log::warn!("skipping degenerate sample {idx}: {msg}");
                }
                Err(e) => return Err(e),
            }
        }
        if batch.is_empty() {
            dry_batches += 1;
            if dry_batches > 16 {
                return Err(Error::config("every sample in the dataset is degenerate"));
            }
            continue;
        }
        let (grads, loss) = backward(&params, config, &batch, tcfg.mode)?;
        sgd_step(&mut params, &grads, tcfg.learning_rate, tcfg.grad_clip);
        curve.push(CurvePoint { step, loss });
        step += 1;
    }
    if skipped > 0 {
        log::info!("training skipped {skipped} degenerate samples");
    }
    Ok((params, curve))
}

fn shuffled_indices(n: usize, seed: u64, epoch: u64) -> Vec<usize> {
    use rand::Rng;
    let mut rng = crate::rng::derive_rng(seed, "shuffle", epoch);
    let mut order: Vec<usize> = (0..n).collect();
    // Fisher-Yates.
    for i in (1..n).rev() {
        let j = rng.random_range(0..=i);
        order.swap(i, j);
    }
    order
}

/// Loss curve as plain CSV: step, four components, total.
pub fn write_curve_csv(path: &Path, curve: &[CurvePoint]) -> Result<()> {
    use std::io::Write;
    let mut w = io::create_writer(path)?;
    let err = |e| Error::io(path, e);
    writeln!(w, "step,trans,rot,gripper,collision,total").map_err(err)?;
    for point in curve {
        writeln!(
            w,
            "{},{:.6e},{:.6e},{:.6e},{:.6e},{:.6e}",
            point.step,
            point.loss.trans,
            point.loss.rot,
            point.loss.gripper,
            point.loss.collision,
            point.loss.total
        )
        .map_err(err)?;
    }
    w.flush().map_err(err)?;
    Ok(())
}
