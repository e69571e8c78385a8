//! Finite-difference verification of the whole head at float64.

use super::{LossKind, ModelConfig, NormMode, QksModel, SpatialFeatures};
use crate::error::Result;
use crate::numerics::{grad_check_with, GradCheckReport, Rng, Stencil, Tensor};
use crate::prompt_pool::LabelEmbeddingTable;

/// `m=4, L=2, d=8, heads=2` over a 3×3 grid.
pub fn small_config(norm_mode: NormMode) -> ModelConfig {
    ModelConfig {
        m: 4,
        layers: 2,
        d: 8,
        heads: 2,
        ffn_mult: 4,
        channels: 6,
        height: 3,
        width: 3,
        norm_mode,
    }
}

/// A seeded model, one random image and 6 labels (4 seen, positives {0, 2}).
pub struct GradProblem {
    pub model: QksModel<f64>,
    pub image: SpatialFeatures<f64>,
    pub labels: LabelEmbeddingTable<f64>,
    pub positives: Vec<usize>,
}

impl GradProblem {
    pub fn new(cfg: &ModelConfig, seed: u64) -> Result<Self> {
        let mut rng = Rng::new(seed);
        let model = QksModel::<f64>::init(cfg.clone(), &mut rng)?;
        let image = SpatialFeatures::new(rng.normal_tensor(&[cfg.hw(), cfg.channels], 1.0))?;
        let n_labels = 6;
        let labels = LabelEmbeddingTable::new(
            rng.normal_tensor(&[n_labels, cfg.d], 1.0),
            vec![true, true, true, false, true, false],
            (0..n_labels).map(|i| format!("label{i}")).collect(),
        )?;
        Ok(Self {
            model,
            image,
            labels,
            positives: vec![0, 2],
        })
    }

    /// Analytic gradient of the loss against finite differences for every
    /// trainable tensor.
    pub fn check(&self, kind: LossKind, h: f64, tol: f64, stencil: Stencil) -> Result<GradCheckReport> {
        let named: Vec<(String, Tensor<f64>)> = self
            .model
            .params
            .trainable()
            .into_iter()
            .map(|(n, t)| (n, t.clone()))
            .collect();
        let mut objective = |values: &[Tensor<f64>]| -> Result<(f64, Vec<Tensor<f64>>)> {
            let trial = QksModel {
                config: self.model.config.clone(),
                params: self.model.params.with_trainable(values)?,
            };
            let out = trial.loss_and_grad(&self.image, &self.labels, &self.positives, kind)?;
            let grads = out.grads.trainable().into_iter().map(|(_, t)| t.clone()).collect();
            Ok((out.loss, grads))
        };
        grad_check_with(&mut objective, &named, h, tol, stencil)
    }
}

/// Central three-point check of a freshly seeded [`GradProblem`].
pub fn check_model_gradients(
    cfg: &ModelConfig,
    kind: LossKind,
    seed: u64,
    h: f64,
    tol: f64,
) -> Result<GradCheckReport> {
    GradProblem::new(cfg, seed)?.check(kind, h, tol, Stencil::ThreePoint)
}
