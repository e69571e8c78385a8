//! Checkpoint directory: `params/*.qtf`, `optim/{m,v}/*.qtf` and `meta.json`.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::adamw::OptimState;
use super::schedule::ScheduleState;
use crate::config::{FlatConfig, RunConfig};
use crate::error::{QksError, Result};
use crate::io::{read_tensor, write_tensor};
use crate::model::{ModelConfig, QksModel, QksParams};
use crate::numerics::{DType, Rng, Scalar};

const FORMAT: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct OptimMeta {
    step: u64,
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    weight_decay: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct Meta {
    format: u32,
    step: usize,
    config_hash: String,
    config: FlatConfig,
    model: ModelConfig,
    dtype: DType,
    optimizer: OptimMeta,
    schedule: ScheduleState,
    params: Vec<String>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint<T> {
    pub step: usize,
    pub run: RunConfig,
    pub model: QksModel<T>,
    pub optim: OptimState<T>,
    pub schedule: ScheduleState,
}

fn mkdir(p: &Path) -> Result<()> {
    fs::create_dir_all(p).map_err(|e| QksError::io(p, e))
}

fn staging_path(dir: &Path) -> PathBuf {
    let mut name = dir.file_name().unwrap_or_default().to_os_string();
    name.push(".partial");
    dir.with_file_name(name)
}

impl<T: Scalar> Checkpoint<T> {
    pub fn config_hash(&self) -> String {
        self.run.hash()
    }

    /// Writes into a staging directory and swaps it in, so an interrupted
    /// save never clobbers the previous checkpoint.
    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        let tmp = staging_path(dir);
        if tmp.exists() {
            fs::remove_dir_all(&tmp).map_err(|e| QksError::io(&tmp, e))?;
        }
        for sub in ["params", "optim/m", "optim/v"] {
            mkdir(&tmp.join(sub))?;
        }
        let named = self.model.params.named();
        for (name, t) in &named {
            write_tensor(tmp.join("params").join(format!("{name}.qtf")), *t)?;
        }
        let trainable = self.model.params.trainable();
        for (i, (name, _)) in trainable.iter().enumerate() {
            write_tensor(tmp.join("optim/m").join(format!("{name}.qtf")), &self.optim.first[i])?;
            write_tensor(tmp.join("optim/v").join(format!("{name}.qtf")), &self.optim.second[i])?;
        }
        let o = &self.optim;
        let meta = Meta {
            format: FORMAT,
            step: self.step,
            config_hash: self.run.hash(),
            config: self.run.to_flat(),
            model: self.model.config.clone(),
            dtype: T::DTYPE,
            optimizer: OptimMeta {
                step: o.step,
                lr: o.lr,
                beta1: o.beta1,
                beta2: o.beta2,
                eps: o.eps,
                weight_decay: o.weight_decay,
            },
            schedule: self.schedule.clone(),
            params: named.into_iter().map(|(n, _)| n).collect(),
        };
        let meta_path = tmp.join("meta.json");
        let text = serde_json::to_string_pretty(&meta).map_err(|e| QksError::json(&meta_path, e))?;
        fs::write(&meta_path, text + "\n").map_err(|e| QksError::io(&meta_path, e))?;

        if dir.exists() {
            fs::remove_dir_all(dir).map_err(|e| QksError::io(dir, e))?;
        }
        fs::rename(&tmp, dir).map_err(|e| QksError::io(dir, e))
    }

    /// Reads a checkpoint, casting tensors to `T`. The stored configuration
    /// must reproduce the stored hash.
    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let meta_path = dir.join("meta.json");
        let text = fs::read_to_string(&meta_path).map_err(|e| QksError::io(&meta_path, e))?;
        let meta: Meta = serde_json::from_str(&text).map_err(|e| QksError::json(&meta_path, e))?;
        if meta.format != FORMAT {
            return Err(QksError::Format(format!(
                "{}: checkpoint format {} is not supported",
                meta_path.display(),
                meta.format
            )));
        }
        let run = RunConfig::from_flat(&meta.config)?;
        let actual = run.hash();
        if actual != meta.config_hash {
            return Err(QksError::HashMismatch {
                checkpoint: meta.config_hash,
                expected: actual,
            });
        }

        let mut params = QksParams::<T>::init(&meta.model, &mut Rng::new(0))?;
        for (name, slot) in params.named_mut() {
            let t = read_tensor(dir.join("params").join(format!("{name}.qtf")))?;
            if t.shape() != slot.shape() {
                return Err(QksError::Corrupt(format!(
                    "{}: parameter {name} has shape {:?}, expected {:?}",
                    dir.display(),
                    t.shape(),
                    slot.shape()
                )));
            }
            *slot = t;
        }
        let names: Vec<String> = params.trainable().into_iter().map(|(n, _)| n).collect();
        let read_all = |sub: &str| -> Result<Vec<_>> {
            names
                .iter()
                .map(|n| read_tensor(dir.join("optim").join(sub).join(format!("{n}.qtf"))))
                .collect()
        };
        let o = &meta.optimizer;
        let optim = OptimState {
            first: read_all("m")?,
            second: read_all("v")?,
            step: o.step,
            lr: o.lr,
            beta1: o.beta1,
            beta2: o.beta2,
            eps: o.eps,
            weight_decay: o.weight_decay,
        };
        Ok(Self {
            step: meta.step,
            run,
            model: QksModel::new(meta.model, params)?,
            optim,
            schedule: meta.schedule,
        })
    }

    /// Error unless `run` hashes to this checkpoint's configuration.
    pub fn check_config(&self, run: &RunConfig) -> Result<()> {
        let (have, want) = (self.run.hash(), run.hash());
        if have == want {
            Ok(())
        } else {
            Err(QksError::HashMismatch {
                checkpoint: have,
                expected: want,
            })
        }
    }
}
