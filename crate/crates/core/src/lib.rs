//! Query-based knowledge sharing head for open-vocabulary multi-label
//! classification, operating on precomputed backbone features and label
//! embeddings.

pub mod config;
pub mod error;
pub mod eval;
pub mod io;
pub mod model;
pub mod numerics;
pub mod prompt_pool;
pub mod train;

pub use config::RunConfig;
pub use error::{QksError, Result};
pub use model::{ModelConfig, QksModel, QksParams, ScoreVector, SpatialFeatures};
pub use numerics::{DType, Rng, Scalar, Tensor};
pub use prompt_pool::{LabelEmbeddingTable, TemplateEmbeddingBank};

pub type Tensor32 = Tensor<f32>;
pub type Tensor64 = Tensor<f64>;
pub type QksModel32 = QksModel<f32>;
pub type QksModel64 = QksModel<f64>;
