//! Which query token wins for each label's positive images.

use serde::{Deserialize, Serialize};

use super::Task;
use crate::error::Result;
use crate::io::{DatasetManifest, InMemorySplit, Split};
use crate::model::{QksModel, ScoreVector};
use crate::numerics::Scalar;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PreferenceStats {
    pub labels: Vec<usize>,
    /// `counts[i][j]`: positive images of `labels[i]` whose best token is `j`.
    pub counts: Vec<Vec<u64>>,
    /// Column sums of `counts`.
    pub histogram: Vec<u64>,
}

impl PreferenceStats {
    /// Count the argmax token of every (image, positive candidate) pair.
    pub fn from_argmax(argmax: &[Vec<usize>], annotations: &[Vec<usize>], candidates: &[usize], m: usize) -> Self {
        let mut counts = vec![vec![0u64; m]; candidates.len()];
        for (tokens, ann) in argmax.iter().zip(annotations) {
            for (row, &l) in counts.iter_mut().zip(candidates) {
                if ann.contains(&l) {
                    row[tokens[l]] += 1;
                }
            }
        }
        let histogram = (0..m).map(|j| counts.iter().map(|r| r[j]).sum()).collect();
        Self {
            labels: candidates.to_vec(),
            counts,
            histogram,
        }
    }

    /// Among labels with any mass, the fraction whose most frequent token
    /// holds at least `share` of it.
    pub fn concentrated_fraction(&self, share: f64) -> f64 {
        let rows: Vec<&Vec<u64>> = self.counts.iter().filter(|r| r.iter().sum::<u64>() > 0).collect();
        if rows.is_empty() {
            return 0.0;
        }
        let hits = rows
            .iter()
            .filter(|r| {
                let total: u64 = r.iter().sum();
                *r.iter().max().unwrap() as f64 >= share * total as f64
            })
            .count();
        hits as f64 / rows.len() as f64
    }

    /// Tokens that win for at least one positive pair.
    pub fn tokens_used(&self) -> usize {
        self.histogram.iter().filter(|&&c| c > 0).count()
    }

    /// One row per label plus a final `all` row with the histogram.
    pub fn to_csv(&self) -> String {
        let m = self.histogram.len();
        let mut s = String::from("label");
        for j in 0..m {
            s += &format!(",token{j}");
        }
        s.push('\n');
        let line = |name: String, row: &[u64]| {
            let cells: Vec<String> = row.iter().map(u64::to_string).collect();
            format!("{name},{}\n", cells.join(","))
        };
        for (l, row) in self.labels.iter().zip(&self.counts) {
            s += &line(l.to_string(), row);
        }
        s += &line("all".into(), &self.histogram);
        s
    }
}

/// Preference statistics over the test split for the task's candidates.
pub fn token_preference_stats<T: Scalar>(
    model: &QksModel<T>,
    manifest: &DatasetManifest,
    task: Task,
) -> Result<PreferenceStats> {
    let labels = manifest.label_table::<T>()?;
    let data = InMemorySplit::<T>::load(manifest, Split::Test)?;
    let candidates = task.candidates(&labels)?;
    let argmax: Vec<Vec<usize>> = model
        .forward_batch(&data.features, &labels, false)?
        .into_iter()
        .map(|sv: ScoreVector<T>| sv.argmax_token)
        .collect();
    Ok(PreferenceStats::from_argmax(&argmax, &data.labels, &candidates, model.config.m))
}
