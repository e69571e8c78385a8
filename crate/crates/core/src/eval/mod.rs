//! ZSL and GZSL evaluation, attention maps and token preference statistics.

pub mod attention;
pub mod metrics;
pub mod preference;

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::error::{QksError, Result};
use crate::io::{DatasetManifest, InMemorySplit, Split};
use crate::model::{QksModel, ScoreVector};
use crate::numerics::Scalar;
use crate::prompt_pool::LabelEmbeddingTable;
use crate::train::Checkpoint;

pub use attention::{attention_map, export_attention_map, AttentionMap};
pub use metrics::{average_precision, mean_ap, topk_prf, MeanAp, Prf};
pub use preference::{token_preference_stats, PreferenceStats};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    /// Candidates are the unseen labels only.
    Zsl,
    /// Candidates are all labels.
    Gzsl,
}

impl Task {
    pub fn candidates<T: Scalar>(self, labels: &LabelEmbeddingTable<T>) -> Result<Vec<usize>> {
        let c = match self {
            Task::Zsl => labels.unseen(),
            Task::Gzsl => (0..labels.len()).collect(),
        };
        if c.is_empty() {
            return Err(QksError::Config(format!("{self} needs at least one candidate label")));
        }
        Ok(c)
    }
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Task::Zsl => "zsl",
            Task::Gzsl => "gzsl",
        })
    }
}

impl FromStr for Task {
    type Err = QksError;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "zsl" => Ok(Task::Zsl),
            "gzsl" => Ok(Task::Gzsl),
            other => Err(QksError::Config(format!("unknown task {other:?} (zsl or gzsl)"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub task: Task,
    pub map: f64,
    pub topk: Vec<Prf>,
    /// Aligned with `candidates`; `null` for labels without test positives.
    pub per_label_ap: Vec<Option<f64>>,
    pub candidates: Vec<usize>,
    pub n_images: usize,
}

impl EvalReport {
    pub fn at(&self, k: usize) -> Option<&Prf> {
        self.topk.iter().find(|p| p.k == k)
    }

    /// Mean of mAP, F1@3 and F1@5, when both cutoffs were computed.
    pub fn avg_score(&self) -> Option<f64> {
        Some((self.map + self.at(3)?.f1 + self.at(5)?.f1) / 3.0)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_json() + "\n").map_err(|e| QksError::io(path, e))
    }

    pub fn table(&self) -> String {
        let mut s = format!(
            "task {}  images {}  candidates {}\n  mAP   {:.4}\n",
            self.task,
            self.n_images,
            self.candidates.len(),
            self.map
        );
        for p in &self.topk {
            s += &format!(
                "  @{:<3}  P {:.4}  R {:.4}  F1 {:.4}\n",
                p.k, p.precision, p.recall, p.f1
            );
        }
        s
    }
}

/// Metrics from a precomputed image×label score matrix.
pub fn evaluate_scores(
    scores: &[Vec<f64>],
    annotations: &[Vec<usize>],
    candidates: &[usize],
    task: Task,
    ks: &[usize],
) -> Result<EvalReport> {
    let m = mean_ap(scores, annotations, candidates)?;
    let topk = ks
        .iter()
        .map(|&k| topk_prf(scores, annotations, k, candidates))
        .collect::<Result<_>>()?;
    Ok(EvalReport {
        task,
        map: m.map,
        topk,
        per_label_ap: m.per_label,
        candidates: candidates.to_vec(),
        n_images: scores.len(),
    })
}

/// Scores every image once, in order.
pub fn score_images<T: Scalar>(
    model: &QksModel<T>,
    data: &InMemorySplit<T>,
    labels: &LabelEmbeddingTable<T>,
) -> Result<Vec<ScoreVector<T>>> {
    model.forward_batch(&data.features, labels, false)
}

/// Evaluate a model on the manifest's test split.
pub fn evaluate<T: Scalar>(model: &QksModel<T>, manifest: &DatasetManifest, task: Task, ks: &[usize]) -> Result<EvalReport> {
    let labels = manifest.label_table::<T>()?;
    let data = InMemorySplit::<T>::load(manifest, Split::Test)?;
    evaluate_split(model, &data, &labels, task, ks)
}

pub fn evaluate_split<T: Scalar>(
    model: &QksModel<T>,
    data: &InMemorySplit<T>,
    labels: &LabelEmbeddingTable<T>,
    task: Task,
    ks: &[usize],
) -> Result<EvalReport> {
    let candidates = task.candidates(labels)?;
    let scores: Vec<Vec<f64>> = score_images(model, data, labels)?
        .iter()
        .map(ScoreVector::scores_f64)
        .collect();
    evaluate_scores(&scores, &data.labels, &candidates, task, ks)
}

/// Load a checkpoint for use with `manifest`. With `expected`, its hash
/// (after fitting to the manifest) must match the checkpoint's.
pub fn load_checkpoint_for(
    dir: impl AsRef<Path>,
    manifest: &DatasetManifest,
    expected: Option<&RunConfig>,
) -> Result<Checkpoint<f32>> {
    let ckpt = Checkpoint::<f32>::load(dir)?;
    if let Some(run) = expected {
        ckpt.check_config(&run.fit_to_manifest(manifest))?;
    }
    let c = &ckpt.model.config;
    if (c.d, c.channels, c.height, c.width) != (manifest.d, manifest.channels, manifest.height, manifest.width) {
        return Err(QksError::Manifest(format!(
            "checkpoint expects d={} C={} H={} W={}, manifest has d={} C={} H={} W={}",
            c.d, c.channels, c.height, c.width, manifest.d, manifest.channels, manifest.height, manifest.width
        )));
    }
    Ok(ckpt)
}

/// Evaluate a saved checkpoint with its own top-K cutoffs.
pub fn evaluate_checkpoint(
    dir: impl AsRef<Path>,
    manifest: &DatasetManifest,
    task: Task,
    expected: Option<&RunConfig>,
) -> Result<EvalReport> {
    let ckpt = load_checkpoint_for(dir, manifest, expected)?;
    evaluate(&ckpt.model, manifest, task, &ckpt.run.eval.ks)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn task_parsing() {
        assert_eq!("ZSL".parse::<Task>().unwrap(), Task::Zsl);
        assert_eq!("gzsl".parse::<Task>().unwrap(), Task::Gzsl);
        assert!("both".parse::<Task>().is_err());
        assert_eq!(Task::Gzsl.to_string(), "gzsl");
    }

    #[test]
    fn zsl_ignores_seen_scores() {
        let ann = vec![vec![0, 2], vec![1, 3], vec![2]];
        let mut scores = vec![
            vec![0.3, 0.1, 0.9, 0.2],
            vec![0.0, 0.7, 0.4, 0.6],
            vec![0.5, 0.2, 0.8, 0.1],
        ];
        let candidates = [2, 3];
        let a = evaluate_scores(&scores, &ann, &candidates, Task::Zsl, &[1, 2]).unwrap();
        for row in &mut scores {
            row[0] = 1e6;
            row[1] = -1e6;
        }
        let b = evaluate_scores(&scores, &ann, &candidates, Task::Zsl, &[1, 2]).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn report_bounds_and_avg() {
        let ann = vec![vec![0], vec![1], vec![0, 1]];
        let scores = vec![vec![0.9, 0.1, 0.0, 0.2, 0.3], vec![0.2, 0.8, 0.1, 0.0, 0.4], vec![0.6, 0.5, 0.3, 0.2, 0.1]];
        let r = evaluate_scores(&scores, &ann, &[0, 1, 2, 3, 4], Task::Gzsl, &[3, 5]).unwrap();
        for p in &r.topk {
            for v in [p.precision, p.recall, p.f1] {
                assert!((0.0..=1.0).contains(&v));
            }
        }
        assert!((0.0..=1.0).contains(&r.map));
        let avg = r.avg_score().unwrap();
        assert!((avg - (r.map + r.at(3).unwrap().f1 + r.at(5).unwrap().f1) / 3.0).abs() < 1e-15);
        assert!(r.table().contains("mAP"));
    }
}
