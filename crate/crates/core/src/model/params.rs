//! Trainable parameters of the head and their initialization.

use super::config::{ModelConfig, NormMode};
use crate::error::{QksError, Result};
use crate::numerics::{Rng, Scalar, Tensor};

/// Multi-head attention projections. Keys carry no bias: a key bias shifts
/// every logit of a query row by the same amount, which softmax ignores.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionParams<T> {
    pub wq: Tensor<T>,
    pub bq: Tensor<T>,
    pub wk: Tensor<T>,
    pub wv: Tensor<T>,
    pub bv: Tensor<T>,
    pub wo: Tensor<T>,
    pub bo: Tensor<T>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct NormParams<T> {
    pub gain: Tensor<T>,
    pub bias: Tensor<T>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerParams<T> {
    pub self_attn: AttentionParams<T>,
    pub cross_attn: AttentionParams<T>,
    pub w1: Tensor<T>,
    pub b1: Tensor<T>,
    pub w2: Tensor<T>,
    pub b2: Tensor<T>,
    /// Present only in prenorm mode: before self-attention, cross-attention, FFN.
    pub norms: Option<[NormParams<T>; 3]>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct QksParams<T> {
    pub proj_weight: Tensor<T>,
    pub proj_bias: Tensor<T>,
    pub query_init: Tensor<T>,
    pub query_pos: Tensor<T>,
    /// Fixed 2D sinusoidal encoding of the feature grid; never trained.
    pub spatial_pos: Tensor<T>,
    pub layers: Vec<LayerParams<T>>,
}

const SPATIAL_POS: &str = "spatial_pos";

fn xavier<T: Scalar>(rng: &mut Rng, fan_in: usize, fan_out: usize) -> Tensor<T> {
    let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
    rng.uniform_tensor(&[fan_in, fan_out], bound)
}

impl<T: Scalar> AttentionParams<T> {
    fn init(rng: &mut Rng, d: usize) -> Self {
        Self {
            wq: xavier(rng, d, d),
            bq: Tensor::zeros(&[d]),
            wk: xavier(rng, d, d),
            wv: xavier(rng, d, d),
            bv: Tensor::zeros(&[d]),
            wo: xavier(rng, d, d),
            bo: Tensor::zeros(&[d]),
        }
    }

    fn named<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Tensor<T>)>) {
        for (n, t) in [
            ("wq", &self.wq),
            ("bq", &self.bq),
            ("wk", &self.wk),
            ("wv", &self.wv),
            ("bv", &self.bv),
            ("wo", &self.wo),
            ("bo", &self.bo),
        ] {
            out.push((format!("{prefix}.{n}"), t));
        }
    }

    fn named_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Tensor<T>)>) {
        for (n, t) in [
            ("wq", &mut self.wq),
            ("bq", &mut self.bq),
            ("wk", &mut self.wk),
            ("wv", &mut self.wv),
            ("bv", &mut self.bv),
            ("wo", &mut self.wo),
            ("bo", &mut self.bo),
        ] {
            out.push((format!("{prefix}.{n}"), t));
        }
    }
}

impl<T: Scalar> LayerParams<T> {
    fn init(rng: &mut Rng, cfg: &ModelConfig) -> Self {
        let (d, f) = (cfg.d, cfg.ffn_dim());
        let self_attn = AttentionParams::init(rng, d);
        let cross_attn = AttentionParams::init(rng, d);
        let w1 = xavier(rng, d, f);
        let w2 = xavier(rng, f, d);
        let norms = match cfg.norm_mode {
            NormMode::Literal => None,
            NormMode::Prenorm => Some(std::array::from_fn(|_| NormParams {
                gain: Tensor::full(&[d], T::one()),
                bias: Tensor::zeros(&[d]),
            })),
        };
        Self {
            self_attn,
            cross_attn,
            w1,
            b1: Tensor::zeros(&[f]),
            w2,
            b2: Tensor::zeros(&[d]),
            norms,
        }
    }

    fn named<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Tensor<T>)>) {
        self.self_attn.named(&format!("{prefix}.self_attn"), out);
        self.cross_attn.named(&format!("{prefix}.cross_attn"), out);
        out.push((format!("{prefix}.ffn.w1"), &self.w1));
        out.push((format!("{prefix}.ffn.b1"), &self.b1));
        out.push((format!("{prefix}.ffn.w2"), &self.w2));
        out.push((format!("{prefix}.ffn.b2"), &self.b2));
        if let Some(norms) = &self.norms {
            for (i, n) in norms.iter().enumerate() {
                out.push((format!("{prefix}.norm{}.gain", i + 1), &n.gain));
                out.push((format!("{prefix}.norm{}.bias", i + 1), &n.bias));
            }
        }
    }

    fn named_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Tensor<T>)>) {
        self.self_attn.named_mut(&format!("{prefix}.self_attn"), out);
        self.cross_attn.named_mut(&format!("{prefix}.cross_attn"), out);
        out.push((format!("{prefix}.ffn.w1"), &mut self.w1));
        out.push((format!("{prefix}.ffn.b1"), &mut self.b1));
        out.push((format!("{prefix}.ffn.w2"), &mut self.w2));
        out.push((format!("{prefix}.ffn.b2"), &mut self.b2));
        if let Some(norms) = &mut self.norms {
            for (i, n) in norms.iter_mut().enumerate() {
                out.push((format!("{prefix}.norm{}.gain", i + 1), &mut n.gain));
                out.push((format!("{prefix}.norm{}.bias", i + 1), &mut n.bias));
            }
        }
    }

    /// Zero both attention output projections and the FFN output layer, making
    /// the layer an exact identity on the query tokens.
    pub fn zero_outputs(&mut self) {
        self.self_attn.wo.fill(T::zero());
        self.self_attn.bo.fill(T::zero());
        self.cross_attn.wo.fill(T::zero());
        self.cross_attn.bo.fill(T::zero());
        self.w2.fill(T::zero());
        self.b2.fill(T::zero());
    }
}

/// 2D sinusoidal encoding of an `height × width` grid, row-major over cells.
///
/// The first `d/2` channels encode the row, the rest the column; within each
/// half, channel `c` uses frequency `10000^(-2⌊c/2⌋/half)` with sine on even
/// and cosine on odd channels.
pub fn sinusoidal_2d<T: Scalar>(height: usize, width: usize, d: usize) -> Tensor<T> {
    let half_y = d / 2;
    let half_x = d - half_y;
    let encode = |pos: usize, c: usize, half: usize| -> f64 {
        let k = (c / 2) as f64;
        let freq = 10000f64.powf(-2.0 * k / half as f64);
        let arg = pos as f64 * freq;
        if c.is_multiple_of(2) {
            arg.sin()
        } else {
            arg.cos()
        }
    };
    Tensor::from_fn(&[height * width, d], |idx| {
        let (cell, c) = (idx / d, idx % d);
        let (y, x) = (cell / width, cell % width);
        let v = if c < half_y {
            encode(y, c, half_y)
        } else {
            encode(x, c - half_y, half_x)
        };
        T::from_f64_lossy(v)
    })
}

impl<T: Scalar> QksParams<T> {
    /// Scaled-uniform weights, zero biases, `N(0, 0.02²)` query tokens and
    /// query positions.
    pub fn init(cfg: &ModelConfig, rng: &mut Rng) -> Result<Self> {
        cfg.validate()?;
        let proj_weight = xavier(rng, cfg.channels, cfg.d);
        let query_init = rng.normal_tensor(&[cfg.m, cfg.d], 0.02);
        let query_pos = rng.normal_tensor(&[cfg.m, cfg.d], 0.02);
        let layers = (0..cfg.layers).map(|_| LayerParams::init(rng, cfg)).collect();
        Ok(Self {
            proj_weight,
            proj_bias: Tensor::zeros(&[cfg.d]),
            query_init,
            query_pos,
            spatial_pos: sinusoidal_2d(cfg.height, cfg.width, cfg.d),
            layers,
        })
    }

    /// Every tensor including the fixed spatial encoding, in a stable order.
    pub fn named(&self) -> Vec<(String, &Tensor<T>)> {
        let mut out = vec![
            ("proj_weight".to_string(), &self.proj_weight),
            ("proj_bias".to_string(), &self.proj_bias),
            ("query_init".to_string(), &self.query_init),
            ("query_pos".to_string(), &self.query_pos),
            (SPATIAL_POS.to_string(), &self.spatial_pos),
        ];
        for (l, layer) in self.layers.iter().enumerate() {
            layer.named(&format!("layer{l}"), &mut out);
        }
        out
    }

    pub fn named_mut(&mut self) -> Vec<(String, &mut Tensor<T>)> {
        let mut out = vec![
            ("proj_weight".to_string(), &mut self.proj_weight),
            ("proj_bias".to_string(), &mut self.proj_bias),
            ("query_init".to_string(), &mut self.query_init),
            ("query_pos".to_string(), &mut self.query_pos),
            (SPATIAL_POS.to_string(), &mut self.spatial_pos),
        ];
        for (l, layer) in self.layers.iter_mut().enumerate() {
            layer.named_mut(&format!("layer{l}"), &mut out);
        }
        out
    }

    pub fn trainable(&self) -> Vec<(String, &Tensor<T>)> {
        self.named()
            .into_iter()
            .filter(|(n, _)| n != SPATIAL_POS)
            .collect()
    }

    pub fn trainable_mut(&mut self) -> Vec<(String, &mut Tensor<T>)> {
        self.named_mut()
            .into_iter()
            .filter(|(n, _)| n != SPATIAL_POS)
            .collect()
    }

    /// Same structure, all zeros; used as a gradient accumulator.
    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        for (_, t) in z.named_mut() {
            t.fill(T::zero());
        }
        z
    }

    /// Replace every trainable tensor, in [`trainable`](Self::trainable) order.
    pub fn with_trainable(&self, values: &[Tensor<T>]) -> Result<Self> {
        let mut out = self.clone();
        let slots = out.trainable_mut();
        if slots.len() != values.len() {
            return Err(QksError::Shape {
                op: "with_trainable",
                left: vec![slots.len()],
                right: vec![values.len()],
            });
        }
        for ((_, slot), v) in slots.into_iter().zip(values) {
            slot.check_same(v, "with_trainable")?;
            *slot = v.clone();
        }
        Ok(out)
    }

    pub fn cast<U: Scalar>(&self) -> QksParams<U> {
        let attn = |a: &AttentionParams<T>| AttentionParams {
            wq: a.wq.cast(),
            bq: a.bq.cast(),
            wk: a.wk.cast(),
            wv: a.wv.cast(),
            bv: a.bv.cast(),
            wo: a.wo.cast(),
            bo: a.bo.cast(),
        };
        QksParams {
            proj_weight: self.proj_weight.cast(),
            proj_bias: self.proj_bias.cast(),
            query_init: self.query_init.cast(),
            query_pos: self.query_pos.cast(),
            spatial_pos: self.spatial_pos.cast(),
            layers: self
                .layers
                .iter()
                .map(|l| LayerParams {
                    self_attn: attn(&l.self_attn),
                    cross_attn: attn(&l.cross_attn),
                    w1: l.w1.cast(),
                    b1: l.b1.cast(),
                    w2: l.w2.cast(),
                    b2: l.b2.cast(),
                    norms: l.norms.as_ref().map(|ns| {
                        std::array::from_fn(|i| NormParams {
                            gain: ns[i].gain.cast(),
                            bias: ns[i].bias.cast(),
                        })
                    }),
                })
                .collect(),
        }
    }

    pub fn all_finite(&self) -> bool {
        self.named().iter().all(|(_, t)| t.all_finite())
    }

    /// Check every tensor shape against `cfg`.
    pub fn validate(&self, cfg: &ModelConfig) -> Result<()> {
        let reference = Self::init(cfg, &mut Rng::new(0))?;
        let expected = reference.named();
        let actual = self.named();
        if expected.len() != actual.len() {
            return Err(QksError::Config(format!(
                "parameter count {} does not match config ({})",
                actual.len(),
                expected.len()
            )));
        }
        for ((name, e), (_, a)) in expected.iter().zip(&actual) {
            if e.shape() != a.shape() {
                return Err(QksError::Config(format!(
                    "parameter {name} has shape {:?}, config expects {:?}",
                    a.shape(),
                    e.shape()
                )));
            }
        }
        Ok(())
    }

    pub fn zero_outputs(&mut self) {
        self.layers.iter_mut().for_each(LayerParams::zero_outputs);
    }
}
