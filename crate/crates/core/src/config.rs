//! Run configuration: one flat JSON object with dotted keys
//! (`"model.m": 12`, `"train.adamw.lr": 1e-3`), overridable per key.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use sha2::{Digest, Sha256};

use crate::error::{QksError, Result};
use crate::io::{DatasetManifest, SyntheticConfig};
use crate::model::{LossKind, ModelConfig};
use crate::train::TrainConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    /// Top-K cutoffs for precision, recall and F1.
    pub ks: Vec<usize>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { ks: vec![3, 5] }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// The only source of randomness; every consumer derives from it.
    pub seed: u64,
    pub model: ModelConfig,
    pub data: SyntheticConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
}

pub type FlatConfig = BTreeMap<String, Value>;

fn flatten_into(prefix: &str, v: &Value, out: &mut FlatConfig) {
    match v {
        Value::Object(map) => {
            for (k, child) in map {
                let key = if prefix.is_empty() {
                    k.clone()
                } else {
                    format!("{prefix}.{k}")
                };
                flatten_into(&key, child, out);
            }
        }
        leaf => {
            out.insert(prefix.to_string(), leaf.clone());
        }
    }
}

fn unflatten(flat: &FlatConfig) -> Result<Value> {
    let mut root = Map::new();
    for (key, value) in flat {
        let parts: Vec<&str> = key.split('.').collect();
        let mut node = &mut root;
        for part in &parts[..parts.len() - 1] {
            let entry = node
                .entry(part.to_string())
                .or_insert_with(|| Value::Object(Map::new()));
            node = entry
                .as_object_mut()
                .ok_or_else(|| QksError::Config(format!("key {key:?} nests under a value")))?;
        }
        if node.insert(parts[parts.len() - 1].to_string(), value.clone()).is_some() {
            return Err(QksError::Config(format!("key {key:?} given twice")));
        }
    }
    Ok(Value::Object(root))
}

/// Parse an override value: JSON when it parses, otherwise a bare string.
fn parse_value(raw: &str) -> Value {
    serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()))
}

impl RunConfig {
    pub fn to_flat(&self) -> FlatConfig {
        let mut out = FlatConfig::new();
        flatten_into("", &serde_json::to_value(self).expect("config serializes"), &mut out);
        out
    }

    /// Missing keys take defaults; unknown keys are rejected.
    pub fn from_flat(flat: &FlatConfig) -> Result<Self> {
        serde_json::from_value(unflatten(flat)?).map_err(|e| QksError::Config(e.to_string()))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| QksError::io(path, e))?;
        let flat: FlatConfig = serde_json::from_str(&text).map_err(|e| QksError::json(path, e))?;
        if let Some(k) = flat.keys().find(|k| flat[*k].is_object()) {
            return Err(QksError::Config(format!(
                "{}: key {k:?} holds an object; use dotted keys",
                path.display()
            )));
        }
        Self::from_flat(&flat)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let text = serde_json::to_string_pretty(&self.to_flat()).map_err(|e| QksError::json(path, e))?;
        fs::write(path, text + "\n").map_err(|e| QksError::io(path, e))
    }

    /// Apply `key=value` overrides in order.
    pub fn with_overrides<S: AsRef<str>>(&self, overrides: &[S]) -> Result<Self> {
        let mut flat = self.to_flat();
        for o in overrides {
            let o = o.as_ref();
            let (key, raw) = o
                .split_once('=')
                .ok_or_else(|| QksError::Config(format!("override {o:?} is not key=value")))?;
            let key = key.trim();
            if !flat.contains_key(key) {
                return Err(QksError::Config(format!("unknown config key {key:?}")));
            }
            flat.insert(key.to_string(), parse_value(raw.trim()));
        }
        Self::from_flat(&flat)
    }

    /// SHA-256 of the canonical serialization: flat keys in sorted order,
    /// compact JSON. Independent of key order in any source file.
    pub fn hash(&self) -> String {
        let canonical = serde_json::to_string(&self.to_flat()).expect("config serializes");
        let digest = Sha256::digest(canonical.as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        if self.eval.ks.is_empty() || self.eval.ks.contains(&0) {
            return Err(QksError::Config("eval.ks must be non-empty and positive".into()));
        }
        Ok(())
    }

    /// Model dimensions taken from the data: width, channels and grid.
    pub fn fit_to_manifest(&self, manifest: &DatasetManifest) -> Self {
        let mut out = self.clone();
        out.model.d = manifest.d;
        out.model.channels = manifest.channels;
        out.model.height = manifest.height;
        out.model.width = manifest.width;
        out
    }

    /// Generator settings; the run seed drives generation.
    pub fn synthetic(&self) -> SyntheticConfig {
        SyntheticConfig {
            seed: self.seed,
            ..self.data.clone()
        }
    }

    pub fn loss(&self) -> LossKind {
        self.train.loss
    }
}
