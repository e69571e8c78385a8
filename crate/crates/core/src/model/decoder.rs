//! Knowledge extraction: L decoder layers over label-agnostic query tokens.
//!
//! Each layer computes, with `~` denoting "plus position encoding",
//!
//! ```text
//! Q'  = Q  + MSA(Q~,  Q~, Q)          self-attention
//! Q'' = Q' + MSA(Q'~, F~, F)          cross-attention to the spatial features
//! Q_l = Q'' + FFN(Q'')
//! ```
//!
//! Position encodings enter queries and keys, never values. In prenorm mode
//! each sublayer reads a layer-normalized copy of its residual input.

use super::attention::{attention_backward, attention_forward, AttentionCache};
use super::config::ModelConfig;
use super::params::{LayerParams, NormParams, QksParams};
use crate::error::Result;
use crate::numerics::kernels::{
    col_sums, gelu, gelu_backward, layernorm, layernorm_backward, linear, matmul_nt, matmul_tn,
    LayerNormCache,
};
use crate::numerics::{Scalar, Tensor};

const LN_EPS: f64 = 1e-5;

#[derive(Clone, Debug)]
pub struct LayerCache<T> {
    norm: [Option<LayerNormCache<T>>; 3],
    self_attn: AttentionCache<T>,
    cross_attn: AttentionCache<T>,
    ffn_in: Tensor<T>,
    ffn_pre: Tensor<T>,
    ffn_act: Tensor<T>,
}

impl<T> LayerCache<T> {
    /// Cross-attention weights `[heads × m × HW]`.
    pub fn cross_attention(&self) -> &Tensor<T> {
        &self.cross_attn.weights
    }

    pub fn self_attention(&self) -> &Tensor<T> {
        &self.self_attn.weights
    }
}

/// Gradients flowing out of a layer besides its own parameters.
pub struct LayerInputGrads<T> {
    pub dq_prev: Tensor<T>,
    pub dfeats: Tensor<T>,
    pub dquery_pos: Tensor<T>,
}

fn maybe_norm<T: Scalar>(
    x: &Tensor<T>,
    norm: Option<&NormParams<T>>,
) -> Result<(Tensor<T>, Option<LayerNormCache<T>>)> {
    match norm {
        Some(n) => {
            let (y, c) = layernorm(x, &n.gain, &n.bias, T::from_f64_lossy(LN_EPS))?;
            Ok((y, Some(c)))
        }
        None => Ok((x.clone(), None)),
    }
}

fn maybe_norm_backward<T: Scalar>(
    dy: Tensor<T>,
    cache: Option<&LayerNormCache<T>>,
    norm: Option<&NormParams<T>>,
    grad: Option<&mut NormParams<T>>,
) -> Tensor<T> {
    match (cache, norm, grad) {
        (Some(c), Some(n), Some(g)) => layernorm_backward(c, &n.gain, &dy, &mut g.gain, &mut g.bias),
        _ => dy,
    }
}

/// One decoder layer. `feat_keys` is `feats + spatial_pos`.
pub fn layer_forward<T: Scalar>(
    p: &LayerParams<T>,
    q_prev: &Tensor<T>,
    feats: &Tensor<T>,
    feat_keys: &Tensor<T>,
    query_pos: &Tensor<T>,
    heads: usize,
) -> Result<(Tensor<T>, LayerCache<T>)> {
    let norm = |i: usize| p.norms.as_ref().map(|n| &n[i]);

    let (x1, n1) = maybe_norm(q_prev, norm(0))?;
    let x1_pos = x1.add(query_pos)?;
    let (sa, sa_cache) = attention_forward(&p.self_attn, &x1_pos, &x1_pos, &x1, heads)?;
    let q1 = q_prev.add(&sa)?;

    let (x2, n2) = maybe_norm(&q1, norm(1))?;
    let x2_pos = x2.add(query_pos)?;
    let (ca, ca_cache) = attention_forward(&p.cross_attn, &x2_pos, feat_keys, feats, heads)?;
    let q2 = q1.add(&ca)?;

    let (x3, n3) = maybe_norm(&q2, norm(2))?;
    let pre = linear(&x3, &p.w1, &p.b1)?;
    let act = gelu(&pre);
    let ffn = linear(&act, &p.w2, &p.b2)?;
    let out = q2.add(&ffn)?.ensure_finite("decoder layer")?;

    Ok((
        out,
        LayerCache {
            norm: [n1, n2, n3],
            self_attn: sa_cache,
            cross_attn: ca_cache,
            ffn_in: x3,
            ffn_pre: pre,
            ffn_act: act,
        },
    ))
}

pub fn layer_backward<T: Scalar>(
    p: &LayerParams<T>,
    cache: &LayerCache<T>,
    dout: &Tensor<T>,
    heads: usize,
    g: &mut LayerParams<T>,
) -> Result<LayerInputGrads<T>> {
    let norm = |i: usize| p.norms.as_ref().map(|n| &n[i]);

    // FFN
    g.w2.add_assign(&matmul_tn(&cache.ffn_act, dout)?)?;
    g.b2.add_assign(&col_sums(dout))?;
    let dact = matmul_nt(dout, &p.w2)?;
    let dpre = gelu_backward(&cache.ffn_pre, &dact)?;
    g.w1.add_assign(&matmul_tn(&cache.ffn_in, &dpre)?)?;
    g.b1.add_assign(&col_sums(&dpre))?;
    let dx3 = matmul_nt(&dpre, &p.w1)?;
    let mut dq2 = dout.clone();
    let gn = g.norms.as_mut().map(|n| &mut n[2]);
    dq2.add_assign(&maybe_norm_backward(dx3, cache.norm[2].as_ref(), norm(2), gn))?;

    // cross-attention
    let ca = attention_backward(&p.cross_attn, &cache.cross_attn, &dq2, heads, &mut g.cross_attn)?;
    let mut dfeats = ca.dxk;
    dfeats.add_assign(&ca.dxv)?;
    let mut dquery_pos = ca.dxq.clone();
    let mut dq1 = dq2;
    let gn = g.norms.as_mut().map(|n| &mut n[1]);
    dq1.add_assign(&maybe_norm_backward(ca.dxq, cache.norm[1].as_ref(), norm(1), gn))?;

    // self-attention
    let sa = attention_backward(&p.self_attn, &cache.self_attn, &dq1, heads, &mut g.self_attn)?;
    let mut dx1_pos = sa.dxq;
    dx1_pos.add_assign(&sa.dxk)?;
    dquery_pos.add_assign(&dx1_pos)?;
    let mut dx1 = dx1_pos;
    dx1.add_assign(&sa.dxv)?;
    let mut dq_prev = dq1;
    let gn = g.norms.as_mut().map(|n| &mut n[0]);
    dq_prev.add_assign(&maybe_norm_backward(dx1, cache.norm[0].as_ref(), norm(0), gn))?;

    Ok(LayerInputGrads {
        dq_prev,
        dfeats,
        dquery_pos,
    })
}

/// A single layer as a standalone operation: returns the updated tokens and
/// the cross-attention weights `[heads × m × HW]`.
pub fn decoder_layer<T: Scalar>(
    cfg: &ModelConfig,
    q_prev: &Tensor<T>,
    feats: &Tensor<T>,
    layer: &LayerParams<T>,
    query_pos: &Tensor<T>,
    spatial_pos: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>)> {
    q_prev.expect_shape(&[cfg.m, cfg.d], "decoder_layer tokens")?;
    feats.expect_shape(&[cfg.hw(), cfg.d], "decoder_layer features")?;
    let keys = feats.add(spatial_pos)?;
    let (out, cache) = layer_forward(layer, q_prev, feats, &keys, query_pos, cfg.heads)?;
    Ok((out, cache.cross_attn.weights))
}

/// Caches for every layer, in order.
pub struct DecoderCache<T> {
    pub layers: Vec<LayerCache<T>>,
}

impl<T: Scalar> DecoderCache<T> {
    /// Cross-attention weights of all layers, `[L × heads × m × HW]`.
    pub fn cross_attention_trace(&self) -> Result<Tensor<T>> {
        let first = self.layers[0].cross_attention();
        let mut shape = vec![self.layers.len()];
        shape.extend_from_slice(first.shape());
        let data = self
            .layers
            .iter()
            .flat_map(|c| c.cross_attention().data().iter().copied())
            .collect();
        Tensor::new(shape, data)
    }
}

/// Run all layers from `query_init` over projected features.
pub fn decode<T: Scalar>(
    cfg: &ModelConfig,
    params: &QksParams<T>,
    feats: &Tensor<T>,
) -> Result<(Tensor<T>, DecoderCache<T>)> {
    feats.expect_shape(&[cfg.hw(), cfg.d], "extract_knowledge features")?;
    let keys = feats.add(&params.spatial_pos)?;
    let mut q = params.query_init.clone();
    let mut caches = Vec::with_capacity(params.layers.len());
    for layer in &params.layers {
        let (next, cache) = layer_forward(layer, &q, feats, &keys, &params.query_pos, cfg.heads)?;
        q = next;
        caches.push(cache);
    }
    Ok((q, DecoderCache { layers: caches }))
}

/// `Q_L` plus the full cross-attention trace `[L × heads × m × HW]`.
pub fn extract_knowledge<T: Scalar>(
    cfg: &ModelConfig,
    params: &QksParams<T>,
    feats: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>)> {
    cfg.validate()?;
    let (q, cache) = decode(cfg, params, feats)?;
    Ok((q, cache.cross_attention_trace()?))
}
