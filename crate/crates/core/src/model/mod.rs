//! The query-based knowledge sharing head.
//!
//! `raw features → projection → decoder over m query tokens → max-matching
//! against label embeddings`, with a hand-written backward pass.

pub mod attention;
pub mod config;
pub mod decoder;
pub mod loss;
pub mod params;
pub mod scoring;
pub mod verify;

use rayon::prelude::*;

pub use config::{ModelConfig, NormMode};
pub use decoder::{decode, decoder_layer, extract_knowledge, DecoderCache};
pub use loss::{classification_loss, ranking_loss, LossKind, LossOutput};
pub use params::{sinusoidal_2d, AttentionParams, LayerParams, NormParams, QksParams};
pub use scoring::{share_knowledge, ScoreVector};

use crate::error::{QksError, Result};
use crate::numerics::kernels::{col_sums, linear, matmul_tn};
use crate::numerics::{Scalar, Tensor};
use crate::prompt_pool::LabelEmbeddingTable;

/// One image's backbone output, flattened to `HW × C`.
#[derive(Clone, Debug, PartialEq)]
pub struct SpatialFeatures<T> {
    values: Tensor<T>,
}

impl<T: Scalar> SpatialFeatures<T> {
    /// Accepts `[HW, C]` or `[H, W, C]`.
    pub fn new(values: Tensor<T>) -> Result<Self> {
        let values = match values.shape().len() {
            2 => values,
            3 => {
                let s = values.shape().to_vec();
                values.reshape(&[s[0] * s[1], s[2]])?
            }
            _ => {
                return Err(QksError::Shape {
                    op: "SpatialFeatures",
                    left: values.shape().to_vec(),
                    right: vec![],
                })
            }
        };
        Ok(Self {
            values: values.ensure_finite("spatial features")?,
        })
    }

    pub fn values(&self) -> &Tensor<T> {
        &self.values
    }

    pub fn cells(&self) -> usize {
        self.values.rows()
    }

    pub fn channels(&self) -> usize {
        self.values.cols()
    }

    pub fn cast<U: Scalar>(&self) -> SpatialFeatures<U> {
        SpatialFeatures {
            values: self.values.cast(),
        }
    }

    fn check(&self, cfg: &ModelConfig) -> Result<()> {
        self.values
            .expect_shape(&[cfg.hw(), cfg.channels], "spatial features")
    }
}

/// `raw · proj_weight + proj_bias`, row-wise.
pub fn project_features<T: Scalar>(
    raw: &SpatialFeatures<T>,
    params: &QksParams<T>,
) -> Result<Tensor<T>> {
    if raw.channels() != params.proj_weight.rows() {
        return Err(QksError::Shape {
            op: "project_features",
            left: raw.values.shape().to_vec(),
            right: params.proj_weight.shape().to_vec(),
        });
    }
    linear(&raw.values, &params.proj_weight, &params.proj_bias)
}

/// Configuration and parameters together.
#[derive(Clone, Debug, PartialEq)]
pub struct QksModel<T> {
    pub config: ModelConfig,
    pub params: QksParams<T>,
}

/// Scalar loss of one image and gradients for every parameter tensor.
#[derive(Clone, Debug)]
pub struct LossAndGrad<T> {
    pub loss: f64,
    pub grads: QksParams<T>,
}

impl<T: Scalar> QksModel<T> {
    pub fn new(config: ModelConfig, params: QksParams<T>) -> Result<Self> {
        config.validate()?;
        params.validate(&config)?;
        Ok(Self { config, params })
    }

    pub fn init(config: ModelConfig, rng: &mut crate::numerics::Rng) -> Result<Self> {
        let params = QksParams::init(&config, rng)?;
        Ok(Self { config, params })
    }

    pub fn cast<U: Scalar>(&self) -> QksModel<U> {
        QksModel {
            config: self.config.clone(),
            params: self.params.cast(),
        }
    }

    /// Scores every label. With `trace`, the cross-attention weights of all
    /// layers are attached.
    pub fn forward(
        &self,
        raw: &SpatialFeatures<T>,
        labels: &LabelEmbeddingTable<T>,
        trace: bool,
    ) -> Result<ScoreVector<T>> {
        raw.check(&self.config)?;
        let feats = project_features(raw, &self.params)?;
        let (q, cache) = decode(&self.config, &self.params, &feats)?;
        let mut sv = share_knowledge(&q, labels)?;
        if trace {
            sv.cross_attention_trace = Some(cache.cross_attention_trace()?);
        }
        Ok(sv)
    }

    /// Final query tokens `Q_L` for one image.
    pub fn tokens(&self, raw: &SpatialFeatures<T>) -> Result<Tensor<T>> {
        raw.check(&self.config)?;
        let feats = project_features(raw, &self.params)?;
        Ok(decode(&self.config, &self.params, &feats)?.0)
    }

    /// Images are independent; results come back in input order.
    pub fn forward_batch(
        &self,
        images: &[SpatialFeatures<T>],
        labels: &LabelEmbeddingTable<T>,
        trace: bool,
    ) -> Result<Vec<ScoreVector<T>>> {
        images
            .par_iter()
            .map(|img| self.forward(img, labels, trace))
            .collect()
    }

    /// Loss of one image and its gradient for all parameters. The entry for
    /// the fixed spatial encoding is always zero.
    pub fn loss_and_grad(
        &self,
        raw: &SpatialFeatures<T>,
        labels: &LabelEmbeddingTable<T>,
        positives: &[usize],
        kind: LossKind,
    ) -> Result<LossAndGrad<T>> {
        let cfg = &self.config;
        let p = &self.params;
        raw.check(cfg)?;
        let feats = project_features(raw, p)?;
        let (q, cache) = decode(cfg, p, &feats)?;
        let sv = share_knowledge(&q, labels)?;
        let out = loss::loss(kind, &sv.scores, labels.seen_mask(), positives)?;

        let mut g = p.zeros_like();
        let mut dq = scoring::share_knowledge_backward(&sv, labels, &out.dscores, cfg.m);
        let mut dfeats = Tensor::zeros(&[cfg.hw(), cfg.d]);
        for (l, layer) in p.layers.iter().enumerate().rev() {
            let back = decoder::layer_backward(layer, &cache.layers[l], &dq, cfg.heads, &mut g.layers[l])?;
            dfeats.add_assign(&back.dfeats)?;
            g.query_pos.add_assign(&back.dquery_pos)?;
            dq = back.dq_prev;
        }
        g.query_init = dq;
        g.proj_weight = matmul_tn(raw.values(), &dfeats)?;
        g.proj_bias = col_sums(&dfeats);

        for (name, t) in g.trainable() {
            if !t.all_finite() {
                return Err(QksError::NonFiniteGradient(name));
            }
        }
        Ok(LossAndGrad {
            loss: out.value,
            grads: g,
        })
    }

    /// Mean loss and mean gradient over a batch. Per-image work may run in
    /// parallel; the reduction is always in image order.
    pub fn batch_loss_and_grad(
        &self,
        images: &[&SpatialFeatures<T>],
        positives: &[&[usize]],
        labels: &LabelEmbeddingTable<T>,
        kind: LossKind,
    ) -> Result<LossAndGrad<T>> {
        if images.is_empty() || images.len() != positives.len() {
            return Err(QksError::Config(format!(
                "batch of {} images with {} annotation sets",
                images.len(),
                positives.len()
            )));
        }
        let per_image: Vec<LossAndGrad<T>> = images
            .par_iter()
            .zip(positives.par_iter())
            .map(|(img, pos)| self.loss_and_grad(img, labels, pos, kind))
            .collect::<Result<_>>()?;
        let n = per_image.len();
        let mut iter = per_image.into_iter();
        let first = iter.next().expect("non-empty batch");
        let mut loss = first.loss;
        let mut grads = first.grads;
        for item in iter {
            loss += item.loss;
            for ((_, acc), (_, t)) in grads.named_mut().into_iter().zip(item.grads.named()) {
                acc.add_assign(t)?;
            }
        }
        let inv = T::one() / T::from_usize(n).unwrap();
        for (_, t) in grads.named_mut() {
            *t = t.scale(inv);
        }
        Ok(LossAndGrad {
            loss: loss / n as f64,
            grads,
        })
    }
}
