//! AdamW with decoupled weight decay.

use serde::{Deserialize, Serialize};

use crate::error::{QksError, Result};
use crate::numerics::{Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            lr: 1e-5,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

/// Moments per parameter, in the order the parameters are passed.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimState<T> {
    pub first: Vec<Tensor<T>>,
    pub second: Vec<Tensor<T>>,
    pub step: u64,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl<T: Scalar> OptimState<T> {
    pub fn new<'a>(cfg: &AdamWConfig, params: impl IntoIterator<Item = &'a Tensor<T>>) -> Self {
        let first: Vec<Tensor<T>> = params.into_iter().map(|p| Tensor::zeros(p.shape())).collect();
        Self {
            second: first.clone(),
            first,
            step: 0,
            lr: cfg.lr,
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            eps: cfg.eps,
            weight_decay: cfg.weight_decay,
        }
    }
}

/// One update:
///
/// ```text
/// m ← β1·m + (1−β1)·g        v ← β2·v + (1−β2)·g²
/// θ ← θ − lr·m̂/(√v̂ + eps) − lr·wd·θ
/// ```
///
/// with `m̂ = m/(1−β1ᵗ)`, `v̂ = v/(1−β2ᵗ)`. Arithmetic is carried in f64 per
/// element; no parameter is touched if any gradient is non-finite.
pub fn adamw_step<T: Scalar>(
    params: &mut [(String, &mut Tensor<T>)],
    grads: &[&Tensor<T>],
    state: &mut OptimState<T>,
) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.first.len() {
        return Err(QksError::Shape {
            op: "adamw_step",
            left: vec![params.len(), state.first.len()],
            right: vec![grads.len()],
        });
    }
    for ((name, p), g) in params.iter().zip(grads) {
        p.check_same(g, "adamw_step")?;
        if !g.all_finite() {
            return Err(QksError::NonFiniteGradient(name.clone()));
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let (b1, b2) = (state.beta1, state.beta2);
    let bc1 = 1.0 - b1.powi(t);
    let bc2 = 1.0 - b2.powi(t);
    let (lr, eps, wd) = (state.lr, state.eps, state.weight_decay);

    for (i, ((_, p), g)) in params.iter_mut().zip(grads).enumerate() {
        let m = state.first[i].data_mut();
        let v = state.second[i].data_mut();
        for (j, theta) in p.data_mut().iter_mut().enumerate() {
            let gj = g.data()[j].to_f64_lossy();
            let mj = b1 * m[j].to_f64_lossy() + (1.0 - b1) * gj;
            let vj = b2 * v[j].to_f64_lossy() + (1.0 - b2) * gj * gj;
            m[j] = T::from_f64_lossy(mj);
            v[j] = T::from_f64_lossy(vj);
            let th = theta.to_f64_lossy();
            let update = lr * (mj / bc1) / ((vj / bc2).sqrt() + eps) + lr * wd * th;
            *theta = T::from_f64_lossy(th - update);
        }
    }
    Ok(())
}
