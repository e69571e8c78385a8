use serde::{Deserialize, Serialize};

use crate::error::{QksError, Result};

/// Where layer normalization sits in each decoder layer.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NormMode {
    /// No normalization: residual sublayers exactly as written.
    Literal,
    /// Layer normalization on each sublayer input; residual stream untouched.
    Prenorm,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    /// Number of query tokens.
    pub m: usize,
    /// Number of decoder layers.
    pub layers: usize,
    /// Model width, equal to the label embedding width.
    pub d: usize,
    pub heads: usize,
    pub ffn_mult: usize,
    /// Raw feature channels.
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub norm_mode: NormMode,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            m: 12,
            layers: 7,
            d: 512,
            heads: 8,
            ffn_mult: 4,
            channels: 768,
            height: 14,
            width: 14,
            norm_mode: NormMode::Prenorm,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(QksError::Config(msg));
        if self.m == 0 {
            return bad("m must be at least 1".into());
        }
        if self.layers == 0 {
            return bad("layer count must be at least 1".into());
        }
        if self.d < 2 || self.heads == 0 || !self.d.is_multiple_of(self.heads) {
            return bad(format!(
                "d = {} must be at least 2 and divisible by heads = {}",
                self.d, self.heads
            ));
        }
        if self.ffn_mult == 0 || self.channels == 0 || self.height == 0 || self.width == 0 {
            return bad("ffn_mult, channels, height and width must be positive".into());
        }
        Ok(())
    }

    pub fn hw(&self) -> usize {
        self.height * self.width
    }

    pub fn head_dim(&self) -> usize {
        self.d / self.heads
    }

    pub fn ffn_dim(&self) -> usize {
        self.d * self.ffn_mult
    }
}
