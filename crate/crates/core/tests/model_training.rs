//! Gradient correctness against finite differences, loss oracle agreement,
//! and small training-loop behavior.

use rand::Rng;
use triview_core::error::Error;
use triview_core::heatmap::{fuse_and_normalize, single_object_map, HeatmapSpec};
use triview_core::model::{
    backward, forward, init_params, loss, sgd_step, train, BatchSource, ModelConfig, Sample,
    Scalar, SliceSource, Target, ToyBackboneParams, TrainConfig, TrainMode, BLOCK_NAMES,
};
use triview_core::rng::derive_rng;
use triview_oracle::{fd_gradients, slow_loss};

fn fd_config() -> ModelConfig {
    ModelConfig {
        view_resolution: 8,
        patch: 4,
        feature_dim: 4,
        vocab: 8,
        aux_hidden: 6,
        input_channels: 3,
    }
}

fn train_config() -> ModelConfig {
    ModelConfig {
        view_resolution: 32,
        patch: 16,
        feature_dim: 12,
        vocab: 16,
        aux_hidden: 16,
        input_channels: 3,
    }
}

fn random_sample<F: Scalar>(config: &ModelConfig, seed: u64, sigma: f64) -> Sample<F> {
    let mut rng = derive_rng(seed, "train-test-sample", 0);
    let r = config.view_resolution;
    let n = r * r * config.input_channels;
    let spec = HeatmapSpec::new(sigma, 0.05).unwrap();
    let mut view = || (0..n).map(|_| F::of(rng.random_range(0.0..1.0))).collect::<Vec<F>>();
    let views = [view(), view(), view()];
    let mut gt = || {
        let center = (
            rng.random_range(1.0..r as f64 - 1.0),
            rng.random_range(1.0..r as f64 - 1.0),
        );
        let hm = fuse_and_normalize(&[single_object_map(center, &spec, r)]).unwrap();
        hm.values().iter().map(|&v| F::of(v)).collect::<Vec<F>>()
    };
    Sample {
        views,
        tokens: vec![1, 3, 5],
        target: Target {
            gt_heatmaps: [gt(), gt(), gt()],
            rotation_bins: [
                rng.random_range(0..72) as u8,
                rng.random_range(0..72) as u8,
                rng.random_range(0..72) as u8,
            ],
            gripper: rng.random_range(0..2) == 1,
            collision: rng.random_range(0..2) == 1,
        },
    }
}

fn block_relative_error(a: &ToyBackboneParams<f64>, b: &ToyBackboneParams<f64>, name: &str) -> f64 {
    let (xa, xb) = (a.block(name), b.block(name));
    let mut diff = 0.0f64;
    let mut na = 0.0f64;
    let mut nb = 0.0f64;
    for (&va, &vb) in xa.iter().zip(xb) {
        diff += (va - vb) * (va - vb);
        na += va * va;
        nb += vb * vb;
    }
    diff.sqrt() / (na.sqrt() + nb.sqrt()).max(1e-8)
}

/// Every parameter block passes central finite differences in f64 shadow
/// mode, in both training modes, across 5 seeds.
#[test]
fn analytic_gradients_match_finite_differences() {
    let config = fd_config();
    for seed in 0..5u64 {
        let params = init_params::<f64>(&config, 100 + seed);
        let batch = vec![
            random_sample::<f64>(&config, 200 + seed, 1.0),
            random_sample::<f64>(&config, 300 + seed, 1.0),
        ];
        for mode in [TrainMode::Finetune, TrainMode::Pretrain] {
            let (analytic, _) = backward(&params, &config, &batch, mode).unwrap();
            let fd = fd_gradients(&params, &config, &batch, mode, 1e-4).unwrap();
            for name in BLOCK_NAMES {
                let rel = block_relative_error(&analytic, &fd, name);
                assert!(
                    rel < 1e-4,
                    "seed {seed} mode {mode:?} block {name}: rel err {rel:.3e}"
                );
            }
        }
    }
}

#[test]
fn loss_matches_direct_summation_oracle() {
    let config = fd_config();
    let params = init_params::<f64>(&config, 7);
    let sample = random_sample::<f64>(&config, 8, 1.0);
    let out = forward(&params, &config, &sample.views, &sample.tokens);
    for mode in [TrainMode::Finetune, TrainMode::Pretrain] {
        let fast = loss(&out, &sample.target, mode);
        let pred: [Vec<f64>; 3] = [
            out.views[0].fine_probs.clone(),
            out.views[1].fine_probs.clone(),
            out.views[2].fine_probs.clone(),
        ];
        let gt = sample.target.gt_heatmaps.clone();
        let rot = out.rotation_probs.clone();
        let slow = slow_loss(
            &pred,
            &gt,
            &rot,
            sample.target.rotation_bins,
            out.gripper_prob,
            sample.target.gripper,
            out.collision_prob,
            sample.target.collision,
            mode,
        );
        assert!((fast.trans - slow.trans).abs() < 1e-6);
        assert!((fast.rot - slow.rot).abs() < 1e-6);
        assert!((fast.gripper - slow.gripper).abs() < 1e-6);
        assert!((fast.collision - slow.collision).abs() < 1e-6);
        assert!((fast.total - slow.total).abs() < 1e-6);
    }
}

#[test]
fn zero_learning_rate_leaves_params_unchanged() {
    let config = fd_config();
    let mut params = init_params::<f64>(&config, 1);
    let before = params.clone();
    let batch = vec![random_sample::<f64>(&config, 2, 1.0)];
    let (grads, _) = backward(&params, &config, &batch, TrainMode::Finetune).unwrap();
    sgd_step(&mut params, &grads, 0.0, 1.0);
    for name in BLOCK_NAMES {
        assert_eq!(params.block(name), before.block(name), "block {name}");
    }
}

#[test]
fn one_small_step_strictly_decreases_loss() {
    let config = fd_config();
    let mut params = init_params::<f64>(&config, 5);
    let batch = vec![random_sample::<f64>(&config, 6, 1.0)];
    let (grads, before) = backward(&params, &config, &batch, TrainMode::Finetune).unwrap();
    sgd_step(&mut params, &grads, 1e-3, 0.0);
    let out = forward(&params, &config, &batch[0].views, &batch[0].tokens);
    let after = loss(&out, &batch[0].target, TrainMode::Finetune);
    assert!(
        after.total < before.total,
        "loss did not decrease: {} -> {}",
        before.total,
        after.total
    );
}

/// Overfit a single supervision unit. Sharp targets keep the cross-entropy
/// floor (the ground-truth entropy) well below 10% of the initial loss.
#[test]
fn overfits_one_sample_below_ten_percent() {
    let config = train_config();
    let params = init_params::<f32>(&config, 9);
    let sample = random_sample::<f32>(&config, 10, 0.5);
    let source = SliceSource(std::slice::from_ref(&sample));
    let tcfg = TrainConfig {
        steps: 200,
        batch_size: 1,
        learning_rate: 0.5,
        grad_clip: 5.0,
        mode: TrainMode::Finetune,
        seed: 1,
    };
    let (_, curve) = train(params, &config, &source, &tcfg).unwrap();
    let initial = curve.first().unwrap().loss.total;
    let last = curve.last().unwrap().loss.total;
    assert!(
        last < 0.1 * initial,
        "after 200 steps: {last:.4} vs initial {initial:.4}"
    );
}

#[test]
fn empty_dataset_is_a_configuration_error() {
    let config = fd_config();
    let params = init_params::<f32>(&config, 1);
    let empty: Vec<Sample<f32>> = Vec::new();
    let source = SliceSource(&empty);
    let tcfg = TrainConfig {
        steps: 5,
        batch_size: 2,
        learning_rate: 0.1,
        grad_clip: 1.0,
        mode: TrainMode::Finetune,
        seed: 0,
    };
    let err = train(params, &config, &source, &tcfg).unwrap_err();
    assert!(matches!(err, Error::Config(_)));
}

#[test]
fn degenerate_samples_are_skipped() {
    struct Flaky {
        good: Sample<f32>,
    }
    impl BatchSource<f32> for Flaky {
        fn len(&self) -> usize {
            2
        }
        fn sample(&self, idx: usize, _epoch: u64) -> triview_core::error::Result<Sample<f32>> {
            if idx == 0 {
                Err(Error::DegenerateTarget("synthetic degenerate".into()))
            } else {
                Ok(self.good.clone())
            }
        }
    }
    let config = fd_config();
    let params = init_params::<f32>(&config, 2);
    let source = Flaky { good: random_sample::<f32>(&config, 3, 1.0) };
    let tcfg = TrainConfig {
        steps: 4,
        batch_size: 2,
        learning_rate: 0.05,
        grad_clip: 1.0,
        mode: TrainMode::Finetune,
        seed: 3,
    };
    let (_, curve) = train(params, &config, &source, &tcfg).unwrap();
    assert_eq!(curve.len(), 4);
}

#[test]
fn training_curve_is_deterministic() {
    let config = fd_config();
    let samples = vec![
        random_sample::<f32>(&config, 1, 1.0),
        random_sample::<f32>(&config, 2, 1.0),
        random_sample::<f32>(&config, 3, 1.0),
    ];
    let tcfg = TrainConfig {
        steps: 10,
        batch_size: 2,
        learning_rate: 0.1,
        grad_clip: 2.0,
        mode: TrainMode::Finetune,
        seed: 77,
    };
    let run = |s: u64| {
        let params = init_params::<f32>(&config, s);
        let source = SliceSource(&samples);
        let (p, curve) = train(params, &config, &source, &tcfg).unwrap();
        (p, curve)
    };
    let (p1, c1) = run(50);
    let (p2, c2) = run(50);
    for name in BLOCK_NAMES {
        assert_eq!(p1.block(name), p2.block(name));
    }
    for (a, b) in c1.iter().zip(&c2) {
        assert_eq!(a.loss.total, b.loss.total);
    }
}
