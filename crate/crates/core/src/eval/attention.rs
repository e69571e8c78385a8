//! Where a label's winning query token looks in the feature grid.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{QksError, Result};
use crate::model::{QksModel, SpatialFeatures};
use crate::numerics::{Scalar, Tensor};
use crate::prompt_pool::LabelEmbeddingTable;

/// Relative spread below which a map counts as constant.
const DEGENERATE_SPREAD: f64 = 1e-9;

#[derive(Clone, Debug, PartialEq)]
pub struct AttentionMap {
    pub height: usize,
    pub width: usize,
    pub label: usize,
    /// The query token with the highest score for `label`.
    pub token: usize,
    /// Head-averaged final-layer attention of `token`, row-major; sums to 1.
    pub weights: Vec<f64>,
    /// `weights` min-max normalized to [0, 1]; all zeros when degenerate.
    pub values: Vec<f64>,
    pub degenerate: bool,
}

impl AttentionMap {
    /// Build from a `[L × heads × m × HW]` cross-attention trace.
    pub fn from_trace<T: Scalar>(
        trace: &Tensor<T>,
        token: usize,
        label: usize,
        height: usize,
        width: usize,
    ) -> Result<Self> {
        let s = trace.shape();
        if s.len() != 4 || s[3] != height * width || token >= s[2] || s[0] == 0 {
            return Err(QksError::Shape {
                op: "attention map",
                left: s.to_vec(),
                right: vec![token, height * width],
            });
        }
        let (heads, m, hw) = (s[1], s[2], s[3]);
        let last = &trace.data()[(s[0] - 1) * heads * m * hw..];
        let mut weights = vec![0.0; hw];
        for h in 0..heads {
            let row = &last[(h * m + token) * hw..][..hw];
            for (w, v) in weights.iter_mut().zip(row) {
                *w += v.to_f64_lossy();
            }
        }
        weights.iter_mut().for_each(|w| *w /= heads as f64);

        let lo = weights.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = weights.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let degenerate = hi - lo <= DEGENERATE_SPREAD * hi.abs().max(f64::MIN_POSITIVE);
        let values = if degenerate {
            log::warn!("attention map for label {label} is constant; emitting zeros");
            vec![0.0; hw]
        } else {
            weights.iter().map(|w| (w - lo) / (hi - lo)).collect()
        };
        Ok(Self {
            height,
            width,
            label,
            token,
            weights,
            values,
            degenerate,
        })
    }

    /// Attention mass on the cells where `inside` holds.
    pub fn mass_where(&self, inside: impl Fn(usize, usize) -> bool) -> f64 {
        let mut mass = 0.0;
        for y in 0..self.height {
            for x in 0..self.width {
                if inside(y, x) {
                    mass += self.weights[y * self.width + x];
                }
            }
        }
        mass
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::new();
        for row in self.values.chunks(self.width) {
            let cells: Vec<String> = row.iter().map(|v| format!("{v:.6}")).collect();
            s += &cells.join(",");
            s.push('\n');
        }
        s
    }

    /// One byte per cell, row-major, `round(255·v)`.
    pub fn to_gray8(&self) -> Vec<u8> {
        self.values.iter().map(|v| (v * 255.0).round().clamp(0.0, 255.0) as u8).collect()
    }
}

/// Forward one image and build the map for `label`.
pub fn attention_map<T: Scalar>(
    model: &QksModel<T>,
    image: &SpatialFeatures<T>,
    labels: &LabelEmbeddingTable<T>,
    label: usize,
) -> Result<AttentionMap> {
    if label >= labels.len() {
        return Err(QksError::Config(format!(
            "label {label} is not in the table of {}",
            labels.len()
        )));
    }
    let sv = model.forward(image, labels, true)?;
    let trace = sv.cross_attention_trace.as_ref().expect("trace requested");
    let c = &model.config;
    AttentionMap::from_trace(trace, sv.argmax_token[label], label, c.height, c.width)
}

#[derive(Serialize, Deserialize)]
struct Sidecar<'a> {
    height: usize,
    width: usize,
    format: &'a str,
    label: usize,
    token: usize,
    degenerate: bool,
}

/// Write `{stem}.csv`, `{stem}.gray` and the `{stem}.json` sidecar with the
/// raster dimensions. Returns the written paths.
pub fn export_attention_map(map: &AttentionMap, dir: impl AsRef<Path>, stem: &str) -> Result<Vec<PathBuf>> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| QksError::io(dir, e))?;
    let csv = dir.join(format!("{stem}.csv"));
    let raw = dir.join(format!("{stem}.gray"));
    let side = dir.join(format!("{stem}.json"));
    fs::write(&csv, map.to_csv()).map_err(|e| QksError::io(&csv, e))?;
    fs::write(&raw, map.to_gray8()).map_err(|e| QksError::io(&raw, e))?;
    let meta = Sidecar {
        height: map.height,
        width: map.width,
        format: "gray8",
        label: map.label,
        token: map.token,
        degenerate: map.degenerate,
    };
    let text = serde_json::to_string_pretty(&meta).map_err(|e| QksError::json(&side, e))?;
    fs::write(&side, text + "\n").map_err(|e| QksError::io(&side, e))?;
    Ok(vec![csv, raw, side])
}
