//! Elementwise and per-row kernels with their hand-derived backward passes.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const DEFAULT_LN_EPS: f64 = 1e-5;

/// Forward intermediates of an affine-free layer norm.
#[derive(Debug, Clone)]
pub struct LayerNormCache {
    pub normalized: Tensor,
    pub inv_std: Vec<f64>,
}

/// `(x − mean) / √(var + eps)` along the last axis, population variance.
pub fn layer_norm(x: &Tensor, eps: f64) -> Result<Tensor> {
    Ok(layer_norm_cached(x, eps)?.normalized)
}

pub fn layer_norm_cached(x: &Tensor, eps: f64) -> Result<LayerNormCache> {
    if x.is_empty() {
        return Err(Error::arg("layer_norm of an empty tensor"));
    }
    if !(eps > 0.0) {
        return Err(Error::arg(format!(
            "layer_norm eps must be positive, got {eps}"
        )));
    }
    let cols = x.cols();
    let n = cols as f64;
    let mut out = x.clone();
    let mut inv_std = Vec::with_capacity(x.rows());
    for r in 0..x.rows() {
        let row = out.row_mut(r);
        let mean = row.iter().sum::<f64>() / n;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        let s = 1.0 / (var + eps).sqrt();
        for v in row.iter_mut() {
            *v = (*v - mean) * s;
        }
        inv_std.push(s);
    }
    Ok(LayerNormCache {
        normalized: out,
        inv_std,
    })
}

/// Gradient of an affine-free layer norm with respect to its input.
pub fn layer_norm_backward(cache: &LayerNormCache, upstream: &Tensor) -> Tensor {
    let xh = &cache.normalized;
    let cols = xh.cols();
    let n = cols as f64;
    let mut dx = upstream.clone();
    for r in 0..xh.rows() {
        let g = upstream.row(r);
        let h = xh.row(r);
        let mean_g = g.iter().sum::<f64>() / n;
        let mean_gh = g.iter().zip(h).map(|(a, b)| a * b).sum::<f64>() / n;
        let s = cache.inv_std[r];
        for ((d, &gv), &hv) in dx.row_mut(r).iter_mut().zip(g).zip(h) {
            *d = s * (gv - mean_g - hv * mean_gh);
        }
    }
    dx
}

#[inline]
pub fn sigmoid_scalar(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn sigmoid(x: &Tensor) -> Tensor {
    x.map(sigmoid_scalar)
}

#[inline]
pub fn silu_scalar(x: f64) -> f64 {
    x * sigmoid_scalar(x)
}

#[inline]
pub fn silu_grad(x: f64) -> f64 {
    let s = sigmoid_scalar(x);
    s * (1.0 + x * (1.0 - s))
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // √(2/π)

/// Tanh-approximated GELU.
#[inline]
pub fn gelu_scalar(x: f64) -> f64 {
    let u = GELU_C * (x + 0.044715 * x * x * x);
    0.5 * x * (1.0 + u.tanh())
}

#[inline]
pub fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + 0.044715 * x * x * x);
    let th = u.tanh();
    let du = GELU_C * (1.0 + 3.0 * 0.044715 * x * x);
    0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * du
}

/// Numerically stable softmax along the last axis.
pub fn softmax(x: &Tensor) -> Tensor {
    let mut out = x.clone();
    for r in 0..out.rows() {
        let row = out.row_mut(r);
        let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut z = 0.0;
        for v in row.iter_mut() {
            *v = (*v - m).exp();
            z += *v;
        }
        for v in row.iter_mut() {
            *v /= z;
        }
    }
    out
}

/// Backward of a row softmax given its output `p`.
pub fn softmax_backward(p: &Tensor, upstream: &Tensor) -> Tensor {
    let mut dx = upstream.clone();
    for r in 0..p.rows() {
        let pr = p.row(r);
        let g = upstream.row(r);
        let dot: f64 = pr.iter().zip(g).map(|(a, b)| a * b).sum();
        for ((d, &pv), &gv) in dx.row_mut(r).iter_mut().zip(pr).zip(g) {
            *d = pv * (gv - dot);
        }
    }
    dx
}

/// `log Σ exp` of a slice, shifted by its maximum.
pub fn log_sum_exp(xs: impl Iterator<Item = f64> + Clone) -> f64 {
    let m = xs.clone().fold(f64::NEG_INFINITY, f64::max);
    m + xs.map(|v| (v - m).exp()).sum::<f64>().ln()
}
