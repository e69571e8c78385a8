use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, QksError>;

#[derive(Debug, Error)]
pub enum QksError {
    #[error("dimension mismatch in {op}: {left:?} vs {right:?}")]
    Shape {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },

    #[error("non-finite value produced by {0}")]
    NonFinite(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("template embedding bank is empty")]
    EmptyBank,

    #[error("loss needs at least one positive or negative label")]
    EmptyLabelSet,

    #[error("bad tensor file format: {0}")]
    Format(String),

    #[error("corrupt tensor file: {0}")]
    Corrupt(String),

    #[error("unsupported tensor dtype code {0}")]
    Version(u8),

    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{}: {source}", path.display())]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },

    #[error("invalid manifest: {0}")]
    Manifest(String),

    #[error("function is not deterministic: two evaluations gave {first} and {second}")]
    NonDeterministic { first: f64, second: f64 },

    #[error("non-finite gradient for parameter {0}")]
    NonFiniteGradient(String),

    #[error("training diverged at step {step} (loss {loss})")]
    Divergence { step: usize, loss: f64 },

    #[error("config hash mismatch: checkpoint has {checkpoint}, expected {expected}")]
    HashMismatch { checkpoint: String, expected: String },

    #[error("metric undefined: {0}")]
    Undefined(String),
}

impl QksError {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        QksError::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn json(path: impl Into<PathBuf>, source: serde_json::Error) -> Self {
        QksError::Json {
            path: path.into(),
            source,
        }
    }

    /// Data/format problems as opposed to verification failures or bad usage.
    pub fn is_data_error(&self) -> bool {
        matches!(
            self,
            QksError::Format(_)
                | QksError::Corrupt(_)
                | QksError::Version(_)
                | QksError::Io { .. }
                | QksError::Json { .. }
                | QksError::Manifest(_)
                | QksError::HashMismatch { .. }
                | QksError::Shape { .. }
                | QksError::EmptyBank
        )
    }
}
