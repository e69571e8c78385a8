mod common;

use std::fs;

use common::{ema, generate, load, reference_run, tiny_run};
use proptest::prelude::*;
use qks_core::io::{InMemorySplit, Split};
use qks_core::numerics::Rng;
use qks_core::train::{adamw_step, train, train_in_memory, AdamWConfig, Checkpoint, OptimState, Trainer, SEED_INIT};
use qks_core::{QksError, QksModel, SpatialFeatures, Tensor};

fn half_sq_dist(theta: &Tensor<f64>, center: &Tensor<f64>) -> f64 {
    theta.data().iter().zip(center.data()).map(|(a, b)| 0.5 * (a - b).powi(2)).sum()
}

#[test]
fn single_step_descends_a_quadratic_bowl() {
    for seed in 0..100 {
        let mut rng = Rng::new(seed);
        let n = rng.int_inclusive(1, 20);
        let mut theta: Tensor<f64> = rng.normal_tensor(&[n], 1.0);
        let center: Tensor<f64> = rng.normal_tensor(&[n], 1.0);
        let grad = Tensor::from_f64(
            &[n],
            &theta.data().iter().zip(center.data()).map(|(a, b)| a - b).collect::<Vec<_>>(),
        )
        .unwrap();
        let cfg = AdamWConfig {
            lr: 1e-4,
            ..AdamWConfig::default()
        };
        let mut state = OptimState::new(&cfg, [&theta]);
        let before = half_sq_dist(&theta, &center);
        adamw_step(&mut [("theta".to_string(), &mut theta)], &[&grad], &mut state).unwrap();
        assert!(half_sq_dist(&theta, &center) < before, "seed {seed}");
    }
}

#[test]
fn zero_steps_saves_the_initialization() {
    let run = tiny_run(5, 0);
    let dir = tempfile::tempdir().unwrap();
    let manifest = generate(&run, &dir.path().join("data"));
    let out = train(&manifest, &run, dir.path().join("run")).unwrap();
    assert!(out.log.is_empty());
    let ckpt = Checkpoint::<f32>::load(&out.checkpoint).unwrap();
    let fitted = run.fit_to_manifest(&manifest);
    let init = QksModel::<f32>::init(fitted.model.clone(), &mut Rng::new(Rng::derive_seed(5, SEED_INIT))).unwrap();
    assert_eq!(ckpt.step, 0);
    assert_eq!(ckpt.model, init);
    assert_eq!(ckpt.run, fitted);
}

#[test]
fn same_seed_gives_identical_logs() {
    let run = tiny_run(11, 100);
    let dir = tempfile::tempdir().unwrap();
    let manifest = generate(&run, &dir.path().join("data"));
    train(&manifest, &run, dir.path().join("a")).unwrap();
    train(&manifest, &run, dir.path().join("b")).unwrap();
    let a = fs::read(dir.path().join("a/loss.csv")).unwrap();
    let b = fs::read(dir.path().join("b/loss.csv")).unwrap();
    assert_eq!(a, b);
    assert_eq!(String::from_utf8(a).unwrap().lines().count(), 101);

    let other = train(&manifest, &tiny_run(12, 100), dir.path().join("c")).unwrap();
    assert_ne!(fs::read(dir.path().join("c/loss.csv")).unwrap(), b);
    assert_eq!(other.log.len(), 100);
}

#[test]
fn checkpoint_forward_is_bit_identical() {
    let run = tiny_run(2, 15);
    let dir = tempfile::tempdir().unwrap();
    let manifest = generate(&run, &dir.path().join("data"));
    let out = train(&manifest, &run, dir.path().join("run")).unwrap();
    let ckpt = Checkpoint::<f32>::load(&out.checkpoint).unwrap();
    assert_eq!(ckpt.step, 15);
    let test = InMemorySplit::<f32>::load(&manifest, Split::Test).unwrap();
    let labels = manifest.label_table::<f32>().unwrap();
    let a = out.model.forward_batch(&test.features, &labels, true).unwrap();
    let b = ckpt.model.forward_batch(&test.features, &labels, true).unwrap();
    for (x, y) in a.iter().zip(&b) {
        assert_eq!(x.scores, y.scores);
        assert_eq!(x.cross_attention_trace, y.cross_attention_trace);
    }
}

#[test]
fn resumed_training_continues_identically() {
    let data = load(&tiny_run(4, 20));
    let (_, straight) = train_in_memory(data.run.clone(), data.train.clone(), data.labels.clone()).unwrap();

    let mut first = Trainer::new(data.run.clone(), data.train.clone(), data.labels.clone()).unwrap();
    let mut log: Vec<_> = (0..9).map(|_| first.step().unwrap()).collect();
    let dir = tempfile::tempdir().unwrap();
    first.checkpoint().save(dir.path().join("ckpt")).unwrap();
    let ckpt = Checkpoint::<f32>::load(dir.path().join("ckpt")).unwrap();
    let mut second = Trainer::resume(ckpt, data.train.clone(), data.labels.clone()).unwrap();
    log.extend((9..20).map(|_| second.step().unwrap()));
    assert_eq!(log, straight);
}

#[test]
fn checkpoint_rejects_a_different_config() {
    let run = tiny_run(1, 2);
    let dir = tempfile::tempdir().unwrap();
    let manifest = generate(&run, &dir.path().join("data"));
    let out = train(&manifest, &run, dir.path().join("run")).unwrap();
    let ckpt = Checkpoint::<f32>::load(&out.checkpoint).unwrap();
    ckpt.check_config(&run.fit_to_manifest(&manifest)).unwrap();
    let changed = run.with_overrides(&["train.adamw.lr=2e-3"]).unwrap().fit_to_manifest(&manifest);
    assert!(matches!(ckpt.check_config(&changed), Err(QksError::HashMismatch { .. })));
}

#[test]
fn overflowing_features_abort_with_divergence() {
    let mut data = load(&tiny_run(3, 5));
    let f = &data.train.features[0];
    let poisoned: Vec<f64> = (0..f.cells() * f.channels()).map(|i| if i % 2 == 0 { 3e38 } else { -3e38 }).collect();
    let shape = f.values().shape().to_vec();
    for f in data.train.features.iter_mut() {
        *f = SpatialFeatures::new(Tensor::from_f64(&shape, &poisoned).unwrap()).unwrap();
    }
    let mut trainer = Trainer::new(data.run, data.train, data.labels).unwrap();
    let err = trainer.step().unwrap_err();
    assert!(matches!(err, QksError::Divergence { step: 0, .. }), "{err:?}");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(8))]

    #[test]
    fn lr_never_increases(seed in 0u64..1000, every in 1usize..4) {
        let run = tiny_run(seed, 40)
            .with_overrides(&[format!("train.plateau.every={every}"), "train.plateau.patience=1".into()])
            .unwrap();
        let data = load(&run);
        let (_, log) = train_in_memory(data.run, data.train, data.labels).unwrap();
        prop_assert!(log.windows(2).all(|w| w[1].lr <= w[0].lr));
    }
}

/// Loss ratio (first batch over the mean of the last 20 batches before step
/// 2000) measured on the first run of the easy task.
const EASY_TASK_RECORDED_RATIO: f64 = 22.06;

#[test]
fn easy_task_loss_drops_tenfold() {
    let run = reference_run(0)
        .with_overrides(&["data.sigma=0.05", "train.steps=2000"])
        .unwrap();
    let data = load(&run);
    let (_, log) = train_in_memory(data.run, data.train, data.labels).unwrap();
    let tail: f64 = log[1980..].iter().map(|r| r.loss).sum::<f64>() / 20.0;
    let ratio = log[0].loss / tail;
    println!("easy task: loss {:.4} -> {tail:.4}, ratio {ratio:.2}", log[0].loss);
    assert!(ratio >= 10.0);
    assert!(ratio >= 0.8 * EASY_TASK_RECORDED_RATIO);
}

#[test]
fn classification_loss_ema_decreases_over_500_step_windows() {
    let run = reference_run(0);
    let data = load(&run);
    let (_, log) = train_in_memory(data.run, data.train, data.labels).unwrap();
    let losses: Vec<f64> = log.iter().map(|r| r.loss).collect();
    let smooth = ema(&losses, 0.9);
    let windows = smooth.len() - 500;
    let violations = (0..windows).filter(|&t| smooth[t + 500] > smooth[t]).count();
    let frac = violations as f64 / windows as f64;
    println!("EMA rose over {violations} of {windows} windows ({:.2}%)", 100.0 * frac);
    assert!(frac <= 0.05);
}
