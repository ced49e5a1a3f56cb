//! Per-dimension gated fusion of several adapter branches at one linear layer.
//!
//! For a base output `x` (`l × d`) and branch outputs `l_i`, with affine-free
//! layer norms `x̂ = LN(x)` and `L̂_i = LN(l_i)`:
//!
//! ```text
//! z_i = x̂⊙w_x + L̂_i⊙w_l + x̂⊙L̂_i⊙w_c + b
//! g_i = σ(z_i)                      (per token)
//! g_i = σ(mean over tokens of z_i)  (pooled)
//! x'  = x + Σ_i w_o ⊙ g_i ⊙ l_i
//! ```
//!
//! One parameter set is shared by all branches at a layer, so any number of
//! adapters can be fused without retraining.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autodiff::{CustomOp, Var};
use crate::container::{read_container, write_container, GATE_MAGIC};
use crate::error::{Error, FormatError, Result};
use crate::kernel::{layer_norm_backward, layer_norm_cached, sigmoid_scalar, LayerNormCache};
use crate::param_group;
use crate::tensor::Tensor;

/// Small enough that the normalisation is scale invariant to ~1e-12.
pub const GATE_LN_EPS: f64 = 1e-12;

param_group! {
    /// Gate weights of one host layer; every field is `1 × d`.
    pub struct GateParams / GateVars { w_x, w_l, w_c, b, w_o }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GateMode {
    #[default]
    PerToken,
    Pooled,
}

/// Zero gate weights: every gate starts at 0.5 and, with `w_o = 0`, the
/// fused layer is exactly the base layer.
pub fn init_gate(d: usize) -> Result<GateParams> {
    if d == 0 {
        return Err(Error::arg("gate dimension must be positive"));
    }
    let z = Tensor::zeros(&[1, d]);
    Ok(GateParams {
        w_x: z.clone(),
        w_l: z.clone(),
        w_c: z.clone(),
        b: z.clone(),
        w_o: z,
    })
}

impl GateParams {
    pub fn dim(&self) -> usize {
        self.w_x.cols()
    }

    fn check(&self) -> Result<usize> {
        let d = self.dim();
        if self.tensors().iter().any(|t| t.shape() != [1, d]) {
            return Err(Error::arg("gate parameters must all be 1 x d"));
        }
        Ok(d)
    }
}

/// Base output and branch outputs at one layer.
#[derive(Debug, Clone, PartialEq)]
pub struct FusionActivation {
    /// `l × d`
    pub x: Tensor,
    /// One `l × d` tensor per branch.
    pub branches: Vec<Tensor>,
}

impl FusionActivation {
    fn check(&self, p: &GateParams) -> Result<(usize, usize)> {
        let d = p.check()?;
        if self.x.shape().len() != 2 || self.x.cols() != d {
            return Err(Error::arg(format!(
                "base output {:?} does not match gate dim {d}",
                self.x.shape()
            )));
        }
        if self.branches.iter().any(|l| l.shape() != self.x.shape()) {
            return Err(Error::arg(
                "branch outputs must match the base output shape",
            ));
        }
        Ok((self.x.rows(), d))
    }
}

/// Gate values per branch: `l × d` per token, or `1 × d` pooled.
#[derive(Debug, Clone, PartialEq)]
pub struct GateMatrix {
    pub mode: GateMode,
    pub gates: Vec<Tensor>,
}

/// `x̂⊙w_x + L̂⊙w_l + x̂⊙L̂⊙w_c + b` for already-normalised rows.
pub fn gate_preactivation(x_hat: &Tensor, l_hat: &Tensor, p: &GateParams) -> Result<Tensor> {
    if x_hat.shape() != l_hat.shape() || x_hat.cols() != p.check()? {
        return Err(Error::arg(
            "normalised inputs must share the gate dimension",
        ));
    }
    let mut z = x_hat.clone();
    let (wx, wl, wc, b) = (p.w_x.data(), p.w_l.data(), p.w_c.data(), p.b.data());
    for r in 0..z.rows() {
        let lh = l_hat.row(r);
        for (j, v) in z.row_mut(r).iter_mut().enumerate() {
            let xh = *v;
            *v = xh * wx[j] + lh[j] * wl[j] + xh * lh[j] * wc[j] + b[j];
        }
    }
    Ok(z)
}

struct Forward {
    x_norm: LayerNormCache,
    l_norm: Vec<LayerNormCache>,
    gates: Vec<Tensor>,
}

fn forward(act: &FusionActivation, p: &GateParams, mode: GateMode) -> Result<Forward> {
    act.check(p)?;
    let x_norm = layer_norm_cached(&act.x, GATE_LN_EPS)?;
    let mut l_norm = Vec::with_capacity(act.branches.len());
    let mut gates = Vec::with_capacity(act.branches.len());
    for l in &act.branches {
        let ln = layer_norm_cached(l, GATE_LN_EPS)?;
        let z = gate_preactivation(&x_norm.normalized, &ln.normalized, p)?;
        let g = match mode {
            GateMode::PerToken => z.map(sigmoid_scalar),
            GateMode::Pooled => z
                .column_sums()
                .scale(1.0 / z.rows() as f64)
                .map(sigmoid_scalar),
        };
        gates.push(g);
        l_norm.push(ln);
    }
    Ok(Forward {
        x_norm,
        l_norm,
        gates,
    })
}

pub fn compute_gates(act: &FusionActivation, p: &GateParams, mode: GateMode) -> Result<GateMatrix> {
    Ok(GateMatrix {
        mode,
        gates: forward(act, p, mode)?.gates,
    })
}

fn gate_at(g: &Tensor, r: usize, j: usize) -> f64 {
    if g.rows() == 1 {
        g.data()[j]
    } else {
        g.at(r, j)
    }
}

/// `x + Σ_i w_o ⊙ g_i ⊙ l_i`.
pub fn fuse_forward(act: &FusionActivation, p: &GateParams, mode: GateMode) -> Result<Tensor> {
    let fw = forward(act, p, mode)?;
    let (rows, d) = (act.x.rows(), act.x.cols());
    let wo = p.w_o.data();
    let mut delta = Tensor::zeros(act.x.shape());
    for (l, g) in act.branches.iter().zip(&fw.gates) {
        for r in 0..rows {
            let lr = l.row(r);
            for (j, v) in delta.row_mut(r).iter_mut().enumerate() {
                *v += wo[j] * gate_at(g, r, j) * lr[j];
            }
        }
    }
    let mut out = act.x.clone();
    for (o, &dv) in out.data_mut().iter_mut().zip(delta.data()) {
        // Skipping exact zeros keeps the identity bitwise (it preserves -0.0).
        if dv != 0.0 {
            *o += dv;
        }
    }
    debug_assert_eq!(out.cols(), d);
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct FusionGrads {
    pub x: Tensor,
    pub branches: Vec<Tensor>,
    pub params: GateParams,
}

/// Vector–Jacobian product of [`fuse_forward`] for an upstream gradient on
/// `x'`, through both layer norms and the sigmoid.
pub fn fuse_backward(
    act: &FusionActivation,
    p: &GateParams,
    mode: GateMode,
    upstream: &Tensor,
) -> Result<FusionGrads> {
    let fw = forward(act, p, mode)?;
    if upstream.shape() != act.x.shape() {
        return Err(Error::arg(
            "upstream gradient must match the fused output shape",
        ));
    }
    let (rows, d) = (act.x.rows(), act.x.cols());
    let (wx, wl, wc, wo) = (p.w_x.data(), p.w_l.data(), p.w_c.data(), p.w_o.data());
    let xh = &fw.x_norm.normalized;
    let mut dp = init_gate(d)?;
    let mut dx_hat = Tensor::zeros(act.x.shape());
    let mut d_branches = Vec::with_capacity(act.branches.len());

    for ((l, g), ln) in act.branches.iter().zip(&fw.gates).zip(&fw.l_norm) {
        let lh = &ln.normalized;
        let mut dl = Tensor::zeros(l.shape());
        // dz per token (per-token mode) or the pooled dz̄ accumulated then spread.
        let mut dz = Tensor::zeros(l.shape());
        let mut dz_pool = vec![0.0; d];
        for r in 0..rows {
            for j in 0..d {
                let u = upstream.at(r, j);
                let gv = gate_at(g, r, j);
                let lv = l.at(r, j);
                dl.set(r, j, u * wo[j] * gv);
                dp.w_o.data_mut()[j] += u * gv * lv;
                let dg = u * wo[j] * lv;
                match mode {
                    GateMode::PerToken => dz.set(r, j, dg * gv * (1.0 - gv)),
                    GateMode::Pooled => dz_pool[j] += dg,
                }
            }
        }
        if mode == GateMode::Pooled {
            let gd = g.data();
            for r in 0..rows {
                for j in 0..d {
                    dz.set(r, j, dz_pool[j] * gd[j] * (1.0 - gd[j]) / rows as f64);
                }
            }
        }
        let mut dl_hat = Tensor::zeros(l.shape());
        for r in 0..rows {
            for j in 0..d {
                let z = dz.at(r, j);
                let (x, y) = (xh.at(r, j), lh.at(r, j));
                dp.b.data_mut()[j] += z;
                dp.w_x.data_mut()[j] += z * x;
                dp.w_l.data_mut()[j] += z * y;
                dp.w_c.data_mut()[j] += z * x * y;
                let v = dx_hat.at(r, j) + z * (wx[j] + y * wc[j]);
                dx_hat.set(r, j, v);
                dl_hat.set(r, j, z * (wl[j] + x * wc[j]));
            }
        }
        dl.add_assign(&layer_norm_backward(ln, &dl_hat));
        d_branches.push(dl);
    }
    let mut dx = upstream.clone();
    dx.add_assign(&layer_norm_backward(&fw.x_norm, &dx_hat));
    Ok(FusionGrads {
        x: dx,
        branches: d_branches,
        params: dp,
    })
}

struct GatedFusionOp {
    branches: usize,
    mode: GateMode,
}

impl CustomOp for GatedFusionOp {
    fn name(&self) -> &'static str {
        "gated_fusion"
    }

    fn backward(&self, parents: &[&Tensor], _: &Tensor, upstream: &Tensor) -> Vec<Option<Tensor>> {
        let k = self.branches;
        let act = FusionActivation {
            x: parents[0].clone(),
            branches: parents[1..=k].iter().map(|t| (*t).clone()).collect(),
        };
        let p = GateParams::from_tensors(parents[k + 1..].iter().map(|t| (*t).clone()))
            .expect("five gate tensors");
        let g = fuse_backward(&act, &p, self.mode, upstream).expect("shapes checked in forward");
        let mut out = vec![Some(g.x)];
        out.extend(g.branches.into_iter().map(Some));
        out.extend(g.params.tensors().into_iter().cloned().map(Some));
        out
    }
}

/// Gated fusion on the tape: differentiable in `x`, every branch and the gate.
pub fn fuse_var<'t>(
    x: Var<'t>,
    branches: &[Var<'t>],
    gate: &GateVars<'t>,
    mode: GateMode,
) -> Result<Var<'t>> {
    let act = FusionActivation {
        x: x.value(),
        branches: branches.iter().map(|b| b.value()).collect(),
    };
    let p = GateParams::from_tensors(gate.to_vec().iter().map(|v| v.value()))
        .expect("five gate tensors");
    let value = fuse_forward(&act, &p, mode)?;
    let mut parents = vec![x];
    parents.extend_from_slice(branches);
    parents.extend(gate.to_vec());
    Ok(x.tape().custom(
        &parents,
        value,
        Box::new(GatedFusionOp {
            branches: branches.len(),
            mode,
        }),
    ))
}

// ---------------------------------------------------------------------------
// Persistence

/// Gate parameters keyed by host layer id.
pub type GateBundle = BTreeMap<String, GateParams>;

pub fn encode_gates(gates: &GateBundle) -> Result<Vec<u8>> {
    let mut manifest = serde_json::Map::new();
    let mut payload = Vec::new();
    for (id, g) in gates {
        let d = g.check()?;
        manifest.insert(id.clone(), serde_json::Value::from(d));
        for t in g.tensors() {
            payload.extend(t.to_f32_vec());
        }
    }
    let json = serde_json::to_vec(&manifest)?;
    Ok(write_container(GATE_MAGIC, &json, &payload))
}

pub fn decode_gates(bytes: &[u8]) -> Result<GateBundle> {
    let (manifest, data) = read_container(bytes, GATE_MAGIC)?;
    let dims: BTreeMap<String, usize> =
        serde_json::from_slice(manifest).map_err(|e| FormatError::Manifest(e.to_string()))?;
    let needed: usize = dims.values().map(|d| 4 * 5 * d).sum();
    if data.len() < needed {
        return Err(FormatError::Truncated {
            needed: needed as u64,
            available: data.len() as u64,
        }
        .into());
    }
    if data.len() != needed {
        return Err(
            FormatError::LengthMismatch(format!("{} trailing bytes", data.len() - needed)).into(),
        );
    }
    let vals = crate::container::f32s_from_le(data);
    let mut at = 0;
    let mut out = GateBundle::new();
    for (id, d) in dims {
        if d == 0 {
            return Err(FormatError::Shape(format!("gate {id} has zero width")).into());
        }
        let mut parts = Vec::with_capacity(5);
        for _ in 0..5 {
            parts.push(Tensor::from_f32(vec![1, d], &vals[at..at + d])?);
            at += d;
        }
        out.insert(
            id,
            GateParams::from_tensors(parts.into_iter()).expect("five tensors"),
        );
    }
    Ok(out)
}

pub fn save_gates(gates: &GateBundle, path: impl AsRef<Path>) -> Result<()> {
    std::fs::write(path, encode_gates(gates)?)?;
    Ok(())
}

pub fn load_gates(path: impl AsRef<Path>) -> Result<GateBundle> {
    decode_gates(&std::fs::read(path)?)
}
