//! Central finite-difference verification of analytic gradients.

use serde::Serialize;

use super::tensor::Tensor;
use crate::error::{QksError, Result};

/// A scalar function of a set of float64 tensors with an analytic gradient.
pub trait Objective {
    fn value(&mut self, params: &[Tensor<f64>]) -> Result<f64>;

    /// Value plus one gradient tensor per parameter, shaped like it.
    fn value_and_grad(&mut self, params: &[Tensor<f64>]) -> Result<(f64, Vec<Tensor<f64>>)>;
}

impl<F> Objective for F
where
    F: FnMut(&[Tensor<f64>]) -> Result<(f64, Vec<Tensor<f64>>)>,
{
    fn value(&mut self, params: &[Tensor<f64>]) -> Result<f64> {
        Ok(self(params)?.0)
    }

    fn value_and_grad(&mut self, params: &[Tensor<f64>]) -> Result<(f64, Vec<Tensor<f64>>)> {
        self(params)
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct ParamCheck {
    pub name: String,
    pub elements: usize,
    pub max_rel_err: f64,
    pub max_abs_err: f64,
    /// Flat index of the element with the largest relative error.
    pub worst_index: usize,
}

#[derive(Clone, Debug, Serialize)]
pub struct GradCheckReport {
    pub params: Vec<ParamCheck>,
    pub max_rel_err: f64,
    pub tol: f64,
    pub step: f64,
    pub passed: bool,
}

/// `|a − n| / max(1e-8, |a| + |n|)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / (analytic.abs() + numeric.abs()).max(1e-8)
}

/// Central difference stencil used for the numeric derivative.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub enum Stencil {
    /// `(f(θ+h) − f(θ−h)) / 2h`, error O(h²).
    ThreePoint,
    /// `(−f(θ+2h) + 8f(θ+h) − 8f(θ−h) + f(θ−2h)) / 12h`, error O(h⁴).
    FivePoint,
}

/// Compare the analytic gradient of `f` to `(f(θ+h) − f(θ−h)) / 2h` for every
/// element of every named parameter.
pub fn grad_check<O: Objective>(
    f: &mut O,
    params: &[(String, Tensor<f64>)],
    h: f64,
    tol: f64,
) -> Result<GradCheckReport> {
    grad_check_with(f, params, h, tol, Stencil::ThreePoint)
}

pub fn grad_check_with<O: Objective>(
    f: &mut O,
    params: &[(String, Tensor<f64>)],
    h: f64,
    tol: f64,
    stencil: Stencil,
) -> Result<GradCheckReport> {
    let mut theta: Vec<Tensor<f64>> = params.iter().map(|(_, t)| t.clone()).collect();

    let (v0, grads) = f.value_and_grad(&theta)?;
    let v1 = f.value(&theta)?;
    if v0.to_bits() != v1.to_bits() {
        return Err(QksError::NonDeterministic {
            first: v0,
            second: v1,
        });
    }
    if grads.len() != theta.len() {
        return Err(QksError::Shape {
            op: "grad_check",
            left: vec![theta.len()],
            right: vec![grads.len()],
        });
    }

    let mut checks = Vec::with_capacity(params.len());
    for (p, (name, _)) in params.iter().enumerate() {
        grads[p].check_same(&theta[p], "grad_check")?;
        let mut check = ParamCheck {
            name: name.clone(),
            elements: theta[p].len(),
            max_rel_err: 0.0,
            max_abs_err: 0.0,
            worst_index: 0,
        };
        for i in 0..theta[p].len() {
            let orig = theta[p].data()[i];
            let mut at = |offset: f64| -> Result<f64> {
                theta[p].data_mut()[i] = orig + offset;
                f.value(&theta)
            };
            let numeric = match stencil {
                Stencil::ThreePoint => (at(h)? - at(-h)?) / (2.0 * h),
                Stencil::FivePoint => {
                    (-at(2.0 * h)? + 8.0 * at(h)? - 8.0 * at(-h)? + at(-2.0 * h)?) / (12.0 * h)
                }
            };
            theta[p].data_mut()[i] = orig;

            let analytic = grads[p].data()[i];
            let rel = relative_error(analytic, numeric);
            if rel > check.max_rel_err || !rel.is_finite() {
                check.max_rel_err = rel;
                check.worst_index = i;
            }
            check.max_abs_err = check.max_abs_err.max((analytic - numeric).abs());
        }
        checks.push(check);
    }

    let max_rel_err = checks.iter().map(|c| c.max_rel_err).fold(0.0, f64::max);
    Ok(GradCheckReport {
        params: checks,
        max_rel_err,
        tol,
        step: h,
        passed: max_rel_err <= tol,
    })
}
