//! Training objectives over label scores.
//!
//! Only seen labels take part: positives are the image's annotations,
//! negatives every other seen label. Unseen labels never contribute.

use serde::{Deserialize, Serialize};

use crate::error::{QksError, Result};
use crate::numerics::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LossKind {
    /// Per-label sigmoid cross-entropy on unnormalized scores.
    Classification,
    /// Margin-1 pairwise hinge, averaged over (positive, negative) pairs.
    Ranking,
}

impl std::str::FromStr for LossKind {
    type Err = QksError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "classification" => Ok(LossKind::Classification),
            "ranking" => Ok(LossKind::Ranking),
            other => Err(QksError::Config(format!("unknown loss kind {other:?}"))),
        }
    }
}

/// Loss value and its gradient with respect to every label score
/// (zero for labels that did not participate).
#[derive(Clone, Debug, PartialEq)]
pub struct LossOutput<T> {
    pub value: f64,
    pub dscores: Vec<T>,
}

/// `softplus(x) = ln(1 + eˣ)`, overflow-free.
pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn partition(seen_mask: &[bool], positives: &[usize]) -> Result<(Vec<bool>, Vec<usize>, Vec<usize>)> {
    let mut is_pos = vec![false; seen_mask.len()];
    for &p in positives {
        match seen_mask.get(p) {
            Some(true) => is_pos[p] = true,
            Some(false) => {
                return Err(QksError::Config(format!(
                    "positive label {p} is unseen; training annotations must be seen labels"
                )))
            }
            None => {
                return Err(QksError::Config(format!(
                    "positive label {p} out of range ({} labels)",
                    seen_mask.len()
                )))
            }
        }
    }
    let pos: Vec<usize> = (0..seen_mask.len()).filter(|&i| is_pos[i]).collect();
    let neg: Vec<usize> = (0..seen_mask.len())
        .filter(|&i| seen_mask[i] && !is_pos[i])
        .collect();
    Ok((is_pos, pos, neg))
}

/// `Σ_p softplus(−s_p) + Σ_n softplus(s_n)`, i.e.
/// `−Σ_p log σ(s_p) − Σ_n log(1 − σ(s_n))`.
pub fn classification_loss<T: Scalar>(
    scores: &[T],
    seen_mask: &[bool],
    positives: &[usize],
) -> Result<LossOutput<T>> {
    let (_, pos, neg) = partition(seen_mask, positives)?;
    if pos.is_empty() && neg.is_empty() {
        return Err(QksError::EmptyLabelSet);
    }
    let mut value = 0.0;
    let mut dscores = vec![T::zero(); scores.len()];
    for &p in &pos {
        let s = scores[p].to_f64_lossy();
        value += softplus(-s);
        dscores[p] = T::from_f64_lossy(sigmoid(s) - 1.0);
    }
    for &n in &neg {
        let s = scores[n].to_f64_lossy();
        value += softplus(s);
        dscores[n] = T::from_f64_lossy(sigmoid(s));
    }
    Ok(LossOutput { value, dscores })
}

/// `(1/(|P|·|N|)) Σ_p Σ_n max(0, 1 + s_n − s_p)`; zero subgradient at the kink.
pub fn ranking_loss<T: Scalar>(
    scores: &[T],
    seen_mask: &[bool],
    positives: &[usize],
) -> Result<LossOutput<T>> {
    let (_, pos, neg) = partition(seen_mask, positives)?;
    if pos.is_empty() || neg.is_empty() {
        return Err(QksError::EmptyLabelSet);
    }
    let norm = 1.0 / (pos.len() * neg.len()) as f64;
    let mut value = 0.0;
    let mut grad = vec![0f64; scores.len()];
    for &p in &pos {
        let sp = scores[p].to_f64_lossy();
        for &n in &neg {
            let margin = 1.0 + scores[n].to_f64_lossy() - sp;
            if margin > 0.0 {
                value += margin;
                grad[n] += norm;
                grad[p] -= norm;
            }
        }
    }
    Ok(LossOutput {
        value: value * norm,
        dscores: grad.into_iter().map(T::from_f64_lossy).collect(),
    })
}

pub fn loss<T: Scalar>(
    kind: LossKind,
    scores: &[T],
    seen_mask: &[bool],
    positives: &[usize],
) -> Result<LossOutput<T>> {
    match kind {
        LossKind::Classification => classification_loss(scores, seen_mask, positives),
        LossKind::Ranking => ranking_loss(scores, seen_mask, positives),
    }
}
