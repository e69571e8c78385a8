//! Knowledge sharing: each label scores the image by its best-matching token.

use crate::error::{QksError, Result};
use crate::numerics::kernels::dot;
use crate::numerics::{Scalar, Tensor};
use crate::prompt_pool::LabelEmbeddingTable;

#[derive(Clone, Debug, PartialEq)]
pub struct ScoreVector<T> {
    /// Unnormalized score per label.
    pub scores: Vec<T>,
    /// Token that produced each label's score.
    pub argmax_token: Vec<usize>,
    /// Cross-attention weights `[L × heads × m × HW]`, when requested.
    pub cross_attention_trace: Option<Tensor<T>>,
}

impl<T: Scalar> ScoreVector<T> {
    pub fn len(&self) -> usize {
        self.scores.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scores.is_empty()
    }

    pub fn scores_f64(&self) -> Vec<f64> {
        self.scores.iter().map(|s| s.to_f64_lossy()).collect()
    }
}

/// `s_i = max_j ⟨t_i, q_j⟩` over all tokens, raw inner products.
/// Ties go to the smallest token index.
pub fn share_knowledge<T: Scalar>(
    tokens: &Tensor<T>,
    labels: &LabelEmbeddingTable<T>,
) -> Result<ScoreVector<T>> {
    if tokens.cols() != labels.dim() {
        return Err(QksError::Shape {
            op: "share_knowledge",
            left: tokens.shape().to_vec(),
            right: labels.vectors().shape().to_vec(),
        });
    }
    let m = tokens.rows();
    let mut scores = Vec::with_capacity(labels.len());
    let mut argmax_token = Vec::with_capacity(labels.len());
    for i in 0..labels.len() {
        let t = labels.vector(i);
        let mut best = dot(t, tokens.row(0));
        let mut best_j = 0;
        for j in 1..m {
            let s = dot(t, tokens.row(j));
            if s > best {
                best = s;
                best_j = j;
            }
        }
        if !best.is_finite() {
            return Err(QksError::NonFinite(format!("score of label {i}")));
        }
        scores.push(best);
        argmax_token.push(best_j);
    }
    Ok(ScoreVector {
        scores,
        argmax_token,
        cross_attention_trace: None,
    })
}

/// Route score gradients to the winning token of each label:
/// `dQ[argmax_i] += g_i · t_i`.
pub fn share_knowledge_backward<T: Scalar>(
    sv: &ScoreVector<T>,
    labels: &LabelEmbeddingTable<T>,
    dscores: &[T],
    m: usize,
) -> Tensor<T> {
    let d = labels.dim();
    let mut dq = Tensor::zeros(&[m, d]);
    for (i, &g) in dscores.iter().enumerate() {
        if g == T::zero() {
            continue;
        }
        let row = dq.row_mut(sv.argmax_token[i]);
        for (o, &t) in row.iter_mut().zip(labels.vector(i)) {
            *o += g * t;
        }
    }
    dq
}
