//! Truncated singular value decomposition by one-sided Jacobi rotations.
//!
//! Hestenes' method orthogonalises the columns of the input in place; the
//! column norms are the singular values. It is accurate to working precision
//! in every singular value, which matters because the global adapter keeps
//! only a handful of leading triplets.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

const MAX_SWEEPS: usize = 80;

#[derive(Debug, Clone, PartialEq)]
pub struct SvdResult {
    /// `d × r`, orthonormal columns.
    pub u: Tensor,
    /// Length `r`, non-negative, non-increasing.
    pub s: Vec<f64>,
    /// `k × r`, orthonormal columns.
    pub v: Tensor,
}

impl SvdResult {
    pub fn rank(&self) -> usize {
        self.s.len()
    }

    /// `U · diag(S) · Vᵀ`.
    pub fn reconstruct(&self) -> Tensor {
        let mut us = self.u.clone();
        for r in 0..us.rows() {
            for (c, v) in us.row_mut(r).iter_mut().enumerate() {
                *v *= self.s[c];
            }
        }
        us.matmul_bt(&self.v).expect("consistent factor shapes")
    }
}

/// Full thin SVD of a `d × k` matrix: all `min(d, k)` triplets.
pub fn thin_svd(m: &Tensor) -> Result<SvdResult> {
    if m.shape().len() != 2 {
        return Err(Error::arg(format!(
            "svd expects a matrix, got {:?}",
            m.shape()
        )));
    }
    if !m.is_finite() {
        return Err(Error::Numeric("svd of a non-finite matrix".into()));
    }
    let (d, k) = (m.shape()[0], m.shape()[1]);
    if d < k {
        let t = thin_svd(&m.transpose()?)?;
        let mut out = SvdResult {
            u: t.v,
            s: t.s,
            v: t.u,
        };
        fix_signs(&mut out);
        return Ok(out);
    }

    // Columns stored contiguously: a[j] is column j of M.
    let mut a: Vec<Vec<f64>> = (0..k)
        .map(|j| (0..d).map(|i| m.at(i, j)).collect())
        .collect();
    let mut v: Vec<Vec<f64>> = (0..k)
        .map(|j| (0..k).map(|i| if i == j { 1.0 } else { 0.0 }).collect())
        .collect();

    let mut converged = false;
    for _ in 0..MAX_SWEEPS {
        let mut rotated = false;
        for p in 0..k {
            for q in p + 1..k {
                let alpha: f64 = a[p].iter().map(|x| x * x).sum();
                let beta: f64 = a[q].iter().map(|x| x * x).sum();
                let gamma: f64 = a[p].iter().zip(&a[q]).map(|(x, y)| x * y).sum();
                if gamma == 0.0 || gamma.abs() <= 1e-15 * (alpha * beta).sqrt() {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                rotate(&mut a, p, q, c, s);
                rotate(&mut v, p, q, c, s);
            }
        }
        if !rotated {
            converged = true;
            break;
        }
    }
    if !converged {
        return Err(Error::Numeric("jacobi svd did not converge".into()));
    }

    let norms: Vec<f64> = a
        .iter()
        .map(|col| col.iter().map(|x| x * x).sum::<f64>().sqrt())
        .collect();
    let mut order: Vec<usize> = (0..k).collect();
    order.sort_by(|&i, &j| norms[j].total_cmp(&norms[i]).then(i.cmp(&j)));

    let scale = norms.iter().copied().fold(0.0, f64::max);
    let negligible = scale * 1e-14 * (d.max(k) as f64);
    let mut ucols: Vec<Vec<f64>> = Vec::with_capacity(k);
    let mut s = Vec::with_capacity(k);
    let mut pending = Vec::new();
    for (slot, &j) in order.iter().enumerate() {
        let sigma = norms[j];
        if sigma > negligible && sigma > 0.0 {
            ucols.push(a[j].iter().map(|x| x / sigma).collect());
            s.push(sigma);
        } else {
            ucols.push(vec![0.0; d]);
            s.push(0.0);
            pending.push(slot);
        }
    }
    complete_basis(&mut ucols, &pending);

    let mut u = Tensor::zeros(&[d, k]);
    let mut vt = Tensor::zeros(&[k, k]);
    for (slot, &j) in order.iter().enumerate() {
        for i in 0..d {
            u.set(i, slot, ucols[slot][i]);
        }
        for i in 0..k {
            vt.set(i, slot, v[j][i]);
        }
    }
    let mut out = SvdResult { u, s, v: vt };
    fix_signs(&mut out);
    Ok(out)
}

/// Rank-`r` truncation: the best rank-`r` Frobenius approximation of `m`.
pub fn truncated_svd(m: &Tensor, r: usize) -> Result<SvdResult> {
    if m.shape().len() != 2 {
        return Err(Error::arg(format!(
            "svd expects a matrix, got {:?}",
            m.shape()
        )));
    }
    let (d, k) = (m.shape()[0], m.shape()[1]);
    if r == 0 || r > d.min(k) {
        return Err(Error::arg(format!(
            "rank {r} outside 1..={} for a {d}x{k} matrix",
            d.min(k)
        )));
    }
    let full = thin_svd(m)?;
    Ok(SvdResult {
        u: take_cols(&full.u, r),
        s: full.s[..r].to_vec(),
        v: take_cols(&full.v, r),
    })
}

fn take_cols(t: &Tensor, r: usize) -> Tensor {
    let rows = t.rows();
    let mut data = Vec::with_capacity(rows * r);
    for i in 0..rows {
        data.extend_from_slice(&t.row(i)[..r]);
    }
    Tensor::matrix(rows, r, data).expect("r > 0")
}

fn rotate(cols: &mut [Vec<f64>], p: usize, q: usize, c: f64, s: f64) {
    let (lo, hi) = cols.split_at_mut(q);
    for (x, y) in lo[p].iter_mut().zip(hi[0].iter_mut()) {
        let (xp, xq) = (*x, *y);
        *x = c * xp - s * xq;
        *y = s * xp + c * xq;
    }
}

/// Fills the listed (zero) columns with unit vectors orthogonal to all others,
/// using Gram–Schmidt against the standard basis in index order.
fn complete_basis(cols: &mut [Vec<f64>], pending: &[usize]) {
    if pending.is_empty() {
        return;
    }
    let d = cols[0].len();
    let mut candidate = 0;
    for &slot in pending {
        while candidate < d {
            let mut e = vec![0.0; d];
            e[candidate] = 1.0;
            candidate += 1;
            for _ in 0..2 {
                for (j, col) in cols.iter().enumerate() {
                    if j == slot {
                        continue;
                    }
                    let dot: f64 = col.iter().zip(&e).map(|(a, b)| a * b).sum();
                    for (ev, cv) in e.iter_mut().zip(col) {
                        *ev -= dot * cv;
                    }
                }
            }
            let n = e.iter().map(|x| x * x).sum::<f64>().sqrt();
            if n > 1e-6 {
                cols[slot] = e.into_iter().map(|x| x / n).collect();
                break;
            }
        }
    }
}

/// Makes the first non-negligible entry of every left singular vector
/// non-negative, flipping the matching right singular vector.
fn fix_signs(r: &mut SvdResult) {
    let cols = r.s.len();
    for c in 0..cols {
        let first = (0..r.u.rows())
            .map(|i| r.u.at(i, c))
            .find(|x| x.abs() > 1e-12);
        if matches!(first, Some(x) if x < 0.0) {
            for i in 0..r.u.rows() {
                let x = r.u.at(i, c);
                r.u.set(i, c, -x);
            }
            for i in 0..r.v.rows() {
                let x = r.v.at(i, c);
                r.v.set(i, c, -x);
            }
        }
    }
}
