//! Prompt-pool label embeddings: one embedding per label, averaged over the
//! per-template embeddings produced offline by a text encoder.

use crate::error::{QksError, Result};
use crate::numerics::{Scalar, Tensor};

/// Per-template label embeddings `[K × n_labels × d]`.
///
/// Template strings are kept as provenance only and never interpreted.
#[derive(Clone, Debug)]
pub struct TemplateEmbeddingBank<T> {
    templates: Vec<String>,
    embeddings: Tensor<T>,
    label_names: Vec<String>,
}

impl<T: Scalar> TemplateEmbeddingBank<T> {
    pub fn new(
        templates: Vec<String>,
        embeddings: Tensor<T>,
        label_names: Vec<String>,
    ) -> Result<Self> {
        if templates.is_empty() {
            return Err(QksError::EmptyBank);
        }
        let shape = embeddings.shape();
        if shape.len() != 3 || shape[0] != templates.len() || shape[1] != label_names.len() {
            return Err(QksError::Shape {
                op: "template bank",
                left: shape.to_vec(),
                right: vec![templates.len(), label_names.len(), 0],
            });
        }
        if !embeddings.all_finite() {
            return Err(QksError::NonFinite("template embeddings".into()));
        }
        Ok(Self {
            templates,
            embeddings,
            label_names,
        })
    }

    /// Stack one `[n_labels × d]` slice per template.
    pub fn from_slices(
        templates: Vec<String>,
        slices: &[Tensor<T>],
        label_names: Vec<String>,
    ) -> Result<Self> {
        let first = slices.first().ok_or(QksError::EmptyBank)?;
        let mut data = Vec::with_capacity(first.len() * slices.len());
        for s in slices {
            s.check_same(first, "template slices")?;
            data.extend_from_slice(s.data());
        }
        let mut shape = vec![slices.len()];
        shape.extend_from_slice(first.shape());
        Self::new(templates, Tensor::new(shape, data)?, label_names)
    }

    pub fn templates(&self) -> &[String] {
        &self.templates
    }

    pub fn embeddings(&self) -> &Tensor<T> {
        &self.embeddings
    }

    pub fn label_names(&self) -> &[String] {
        &self.label_names
    }

    pub fn n_templates(&self) -> usize {
        self.templates.len()
    }

    pub fn n_labels(&self) -> usize {
        self.label_names.len()
    }

    pub fn dim(&self) -> usize {
        self.embeddings.shape()[2]
    }
}

/// Final label embeddings `t_i` with the seen/unseen partition.
#[derive(Clone, Debug, PartialEq)]
pub struct LabelEmbeddingTable<T> {
    vectors: Tensor<T>,
    seen_mask: Vec<bool>,
    label_names: Vec<String>,
}

impl<T: Scalar> LabelEmbeddingTable<T> {
    pub fn new(vectors: Tensor<T>, seen_mask: Vec<bool>, label_names: Vec<String>) -> Result<Self> {
        if vectors.shape().len() != 2
            || vectors.rows() != seen_mask.len()
            || seen_mask.len() != label_names.len()
        {
            return Err(QksError::Shape {
                op: "label table",
                left: vectors.shape().to_vec(),
                right: vec![seen_mask.len(), label_names.len()],
            });
        }
        if !vectors.all_finite() {
            return Err(QksError::NonFinite("label embeddings".into()));
        }
        Ok(Self {
            vectors,
            seen_mask,
            label_names,
        })
    }

    pub fn vectors(&self) -> &Tensor<T> {
        &self.vectors
    }

    pub fn vector(&self, label: usize) -> &[T] {
        self.vectors().row(label)
    }

    pub fn len(&self) -> usize {
        self.seen_mask.len()
    }

    pub fn is_empty(&self) -> bool {
        self.seen_mask.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.vectors().cols()
    }

    pub fn seen_mask(&self) -> &[bool] {
        &self.seen_mask
    }

    pub fn is_seen(&self, label: usize) -> bool {
        self.seen_mask[label]
    }

    pub fn seen(&self) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.seen_mask[i]).collect()
    }

    pub fn unseen(&self) -> Vec<usize> {
        (0..self.len()).filter(|&i| !self.seen_mask[i]).collect()
    }

    pub fn label_names(&self) -> &[String] {
        &self.label_names
    }

    pub fn cast<U: Scalar>(&self) -> LabelEmbeddingTable<U> {
        LabelEmbeddingTable {
            vectors: self.vectors.cast(),
            seen_mask: self.seen_mask.clone(),
            label_names: self.label_names.clone(),
        }
    }
}

/// Unweighted mean over the template axis; no normalization afterwards.
///
/// The K values of each element are sorted and averaged as offsets from the
/// smallest, so the result does not depend on template order and equal values
/// average to themselves exactly.
pub fn combine_templates<T: Scalar>(
    bank: &TemplateEmbeddingBank<T>,
    seen_mask: Vec<bool>,
) -> Result<LabelEmbeddingTable<T>> {
    let k = bank.n_templates();
    if k == 0 {
        return Err(QksError::EmptyBank);
    }
    let (n, d) = (bank.n_labels(), bank.dim());
    let stride = n * d;
    let src = bank.embeddings().data();
    let mut column = vec![0f64; k];
    let mut out = Vec::with_capacity(stride);
    for e in 0..stride {
        for (slot, c) in column.iter_mut().enumerate() {
            *c = src[slot * stride + e].to_f64_lossy();
        }
        column.sort_by(f64::total_cmp);
        let base = column[0];
        let offset: f64 = column.iter().map(|c| c - base).sum();
        out.push(T::from_f64_lossy(base + offset / k as f64));
    }
    LabelEmbeddingTable::new(
        Tensor::new(vec![n, d], out)?,
        seen_mask,
        bank.label_names().to_vec(),
    )
}
