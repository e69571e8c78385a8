//! Multi-head attention with an explicit backward pass.

use super::params::AttentionParams;
use crate::error::Result;
use crate::numerics::kernels::{
    col_sums, dot, linear, matmul, matmul_nt, matmul_tn, softmax_backward_row, softmax_in_place,
};
use crate::numerics::{Scalar, Tensor};

/// Everything the backward pass needs from one attention call.
#[derive(Clone, Debug)]
pub struct AttentionCache<T> {
    pub xq: Tensor<T>,
    pub xk: Tensor<T>,
    pub xv: Tensor<T>,
    q: Tensor<T>,
    k: Tensor<T>,
    v: Tensor<T>,
    /// Attention weights `[heads × n_query × n_key]`.
    pub weights: Tensor<T>,
    mixed: Tensor<T>,
}

pub struct AttentionGrads<T> {
    pub dxq: Tensor<T>,
    pub dxk: Tensor<T>,
    pub dxv: Tensor<T>,
}

/// `softmax((xq·Wq + bq)(xk·Wk)ᵀ / √dh) (xv·Wv + bv)` per head, heads
/// concatenated and mixed by `Wo, bo`.
pub fn attention_forward<T: Scalar>(
    p: &AttentionParams<T>,
    xq: &Tensor<T>,
    xk: &Tensor<T>,
    xv: &Tensor<T>,
    heads: usize,
) -> Result<(Tensor<T>, AttentionCache<T>)> {
    let q = linear(xq, &p.wq, &p.bq)?;
    let k = matmul(xk, &p.wk)?;
    let v = linear(xv, &p.wv, &p.bv)?;
    let (n, s, d) = (q.rows(), k.rows(), q.cols());
    let dh = d / heads;
    let scale = T::one() / T::from_usize(dh).unwrap().sqrt();

    let mut weights = Tensor::zeros(&[heads, n, s]);
    let mut mixed = Tensor::zeros(&[n, d]);
    for h in 0..heads {
        let cols = h * dh..(h + 1) * dh;
        for i in 0..n {
            let qi = &q.row(i)[cols.clone()];
            let w = &mut weights.data_mut()[(h * n + i) * s..(h * n + i + 1) * s];
            for (j, wj) in w.iter_mut().enumerate() {
                *wj = dot(qi, &k.row(j)[cols.clone()]) * scale;
            }
            softmax_in_place(w);
            let out = &mut mixed.row_mut(i)[cols.clone()];
            for (j, &a) in w.iter().enumerate() {
                for (o, &vv) in out.iter_mut().zip(&v.row(j)[cols.clone()]) {
                    *o += a * vv;
                }
            }
        }
    }
    let out = linear(&mixed, &p.wo, &p.bo)?;
    let cache = AttentionCache {
        xq: xq.clone(),
        xk: xk.clone(),
        xv: xv.clone(),
        q,
        k,
        v,
        weights,
        mixed,
    };
    Ok((out, cache))
}

/// Accumulates parameter gradients into `g` and returns input gradients.
pub fn attention_backward<T: Scalar>(
    p: &AttentionParams<T>,
    c: &AttentionCache<T>,
    dout: &Tensor<T>,
    heads: usize,
    g: &mut AttentionParams<T>,
) -> Result<AttentionGrads<T>> {
    let (n, s, d) = (c.q.rows(), c.k.rows(), c.q.cols());
    let dh = d / heads;
    let scale = T::one() / T::from_usize(dh).unwrap().sqrt();

    g.wo.add_assign(&matmul_tn(&c.mixed, dout)?)?;
    g.bo.add_assign(&col_sums(dout))?;
    let dmixed = matmul_nt(dout, &p.wo)?;

    let mut dq = Tensor::zeros(&[n, d]);
    let mut dk = Tensor::zeros(&[s, d]);
    let mut dv = Tensor::zeros(&[s, d]);
    let mut dw = vec![T::zero(); s];
    let mut dlogit = vec![T::zero(); s];
    for h in 0..heads {
        let cols = h * dh..(h + 1) * dh;
        for i in 0..n {
            let w = &c.weights.data()[(h * n + i) * s..(h * n + i + 1) * s];
            let dmi = &dmixed.row(i)[cols.clone()];
            for j in 0..s {
                dw[j] = dot(dmi, &c.v.row(j)[cols.clone()]);
                let dvj = &mut dv.row_mut(j)[cols.clone()];
                for (o, &g) in dvj.iter_mut().zip(dmi) {
                    *o += w[j] * g;
                }
            }
            softmax_backward_row(w, &dw, &mut dlogit);
            let qi: Vec<T> = c.q.row(i)[cols.clone()].to_vec();
            let dqi = &mut dq.row_mut(i)[cols.clone()];
            for j in 0..s {
                let gl = dlogit[j] * scale;
                let kj = &c.k.row(j)[cols.clone()];
                for (o, &kv) in dqi.iter_mut().zip(kj) {
                    *o += gl * kv;
                }
                let dkj = &mut dk.row_mut(j)[cols.clone()];
                for (o, &qv) in dkj.iter_mut().zip(&qi) {
                    *o += gl * qv;
                }
            }
        }
    }

    g.wq.add_assign(&matmul_tn(&c.xq, &dq)?)?;
    g.bq.add_assign(&col_sums(&dq))?;
    g.wk.add_assign(&matmul_tn(&c.xk, &dk)?)?;
    g.wv.add_assign(&matmul_tn(&c.xv, &dv)?)?;
    g.bv.add_assign(&col_sums(&dv))?;

    Ok(AttentionGrads {
        dxq: matmul_nt(&dq, &p.wq)?,
        dxk: matmul_nt(&dk, &p.wk)?,
        dxv: matmul_nt(&dv, &p.wv)?,
    })
}
