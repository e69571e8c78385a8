//! Ranking metrics. Scores are compared by value only, descending, with ties
//! broken by ascending index.

use serde::{Deserialize, Serialize};

use crate::error::{QksError, Result};

/// Indices sorted by descending score; a stable sort keeps equal scores in
/// ascending index order.
pub fn rank_desc(scores: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    order
}

/// Mean of precision@k over the ranks `k` of the relevant items. `None` when
/// nothing is relevant.
pub fn average_precision(scores: &[f64], relevance: &[bool]) -> Option<f64> {
    assert_eq!(scores.len(), relevance.len(), "one relevance flag per score");
    let total = relevance.iter().filter(|&&r| r).count();
    if total == 0 {
        return None;
    }
    let mut hits = 0usize;
    let mut sum = 0.0;
    for (rank, &i) in rank_desc(scores).iter().enumerate() {
        if relevance[i] {
            hits += 1;
            sum += hits as f64 / (rank + 1) as f64;
        }
    }
    Some(sum / total as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MeanAp {
    pub map: f64,
    /// Aligned with the candidate list; `None` for labels without positives.
    pub per_label: Vec<Option<f64>>,
}

/// Label-centric mAP: for each candidate label, rank all images by that
/// label's score. `scores[i][l]` is image `i`, label `l`; `annotations[i]`
/// lists the positives of image `i`.
pub fn mean_ap(scores: &[Vec<f64>], annotations: &[Vec<usize>], candidates: &[usize]) -> Result<MeanAp> {
    check_inputs(scores, annotations, candidates)?;
    let per_label: Vec<Option<f64>> = candidates
        .iter()
        .map(|&l| {
            let column: Vec<f64> = scores.iter().map(|row| row[l]).collect();
            let relevance: Vec<bool> = annotations.iter().map(|a| a.contains(&l)).collect();
            let ap = average_precision(&column, &relevance);
            if ap.is_none() {
                log::warn!("label {l} has no positive test image; skipped from mAP");
            }
            ap
        })
        .collect();
    let defined: Vec<f64> = per_label.iter().flatten().copied().collect();
    if defined.is_empty() {
        return Err(QksError::Undefined("no candidate label has a positive image".into()));
    }
    Ok(MeanAp {
        map: defined.iter().sum::<f64>() / defined.len() as f64,
        per_label,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Prf {
    pub k: usize,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

pub fn f1(precision: f64, recall: f64) -> f64 {
    if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    }
}

/// Top-K precision, recall and F1 over the images that have at least one
/// candidate positive. Each such image predicts its K highest-scoring
/// candidates; `P = hits/(K·N)`, `R = hits/Σ|Yᵢ|`. Images with more than K
/// positives count all of them in the recall denominator.
pub fn topk_prf(scores: &[Vec<f64>], annotations: &[Vec<usize>], k: usize, candidates: &[usize]) -> Result<Prf> {
    check_inputs(scores, annotations, candidates)?;
    if k == 0 || k > candidates.len() {
        return Err(QksError::Config(format!(
            "K = {k} must lie in 1..={}",
            candidates.len()
        )));
    }
    let (mut hits, mut annotated, mut positives) = (0usize, 0usize, 0usize);
    for (row, ann) in scores.iter().zip(annotations) {
        let relevant: Vec<bool> = candidates.iter().map(|l| ann.contains(l)).collect();
        let n_pos = relevant.iter().filter(|&&r| r).count();
        if n_pos == 0 {
            continue;
        }
        annotated += 1;
        positives += n_pos;
        let cand_scores: Vec<f64> = candidates.iter().map(|&l| row[l]).collect();
        hits += rank_desc(&cand_scores)[..k].iter().filter(|&&j| relevant[j]).count();
    }
    if annotated == 0 {
        return Err(QksError::Undefined("no image has a candidate positive".into()));
    }
    let precision = hits as f64 / (k * annotated) as f64;
    let recall = hits as f64 / positives as f64;
    Ok(Prf {
        k,
        precision,
        recall,
        f1: f1(precision, recall),
    })
}

fn check_inputs(scores: &[Vec<f64>], annotations: &[Vec<usize>], candidates: &[usize]) -> Result<()> {
    if scores.len() != annotations.len() {
        return Err(QksError::Shape {
            op: "metrics",
            left: vec![scores.len()],
            right: vec![annotations.len()],
        });
    }
    if candidates.is_empty() {
        return Err(QksError::Config("candidate label set is empty".into()));
    }
    if let Some(&max) = candidates.iter().max() {
        if let Some(row) = scores.iter().find(|r| r.len() <= max) {
            return Err(QksError::Shape {
                op: "metrics candidates",
                left: vec![row.len()],
                right: vec![max + 1],
            });
        }
    }
    if scores.iter().flatten().any(|s| s.is_nan()) {
        return Err(QksError::NonFinite("score matrix".into()));
    }
    Ok(())
}
