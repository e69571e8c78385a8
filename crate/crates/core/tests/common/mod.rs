//! Shared fixtures for the integration tests.
#![allow(dead_code)]

pub mod oracle;

use std::path::Path;

use qks_core::io::{generate_synthetic, DatasetManifest, InMemorySplit, Split};
use qks_core::{LabelEmbeddingTable, RunConfig};

/// A run small enough to train in well under a second.
pub fn tiny_run(seed: u64, steps: usize) -> RunConfig {
    RunConfig::default()
        .with_overrides(&[
            format!("seed={seed}"),
            "data.height=4".into(),
            "data.width=4".into(),
            "data.d=16".into(),
            "data.n_seen=8".into(),
            "data.n_unseen=4".into(),
            "data.n_train=48".into(),
            "data.n_test=24".into(),
            "data.region_size=[1,2]".into(),
            "model.m=4".into(),
            "model.layers=2".into(),
            "model.heads=2".into(),
            "model.ffn_mult=2".into(),
            format!("train.steps={steps}"),
            "train.batch_size=8".into(),
            "train.adamw.lr=1e-3".into(),
            "train.checkpoint_every=0".into(),
            "eval.ks=[1,3]".into(),
        ])
        .unwrap()
}

/// The reference synthetic task and model with the learning rate and head
/// count used for the synthetic experiments.
pub fn reference_run(seed: u64) -> RunConfig {
    RunConfig::default()
        .with_overrides(&[
            format!("seed={seed}"),
            "model.m=12".into(),
            "model.layers=3".into(),
            "model.heads=1".into(),
            "train.steps=5000".into(),
            "train.adamw.lr=1e-4".into(),
            "train.checkpoint_every=0".into(),
        ])
        .unwrap()
}

pub fn generate(run: &RunConfig, dir: &Path) -> DatasetManifest {
    generate_synthetic(&run.synthetic(), dir).unwrap()
}

pub struct Loaded {
    pub run: RunConfig,
    pub train: InMemorySplit<f32>,
    pub test: InMemorySplit<f32>,
    pub labels: LabelEmbeddingTable<f32>,
}

/// Generate the run's dataset and hold both splits in memory.
pub fn load(run: &RunConfig) -> Loaded {
    let dir = tempfile::tempdir().unwrap();
    let manifest = generate(run, dir.path());
    Loaded {
        run: run.fit_to_manifest(&manifest),
        train: InMemorySplit::load(&manifest, Split::Train).unwrap(),
        test: InMemorySplit::load(&manifest, Split::Test).unwrap(),
        labels: manifest.label_table().unwrap(),
    }
}

/// EMA of a loss sequence with the given coefficient, seeded with the first value.
pub fn ema(losses: &[f64], beta: f64) -> Vec<f64> {
    let mut out = Vec::with_capacity(losses.len());
    let mut s = losses[0];
    for &l in losses {
        s = beta * s + (1.0 - beta) * l;
        out.push(s);
    }
    out
}
