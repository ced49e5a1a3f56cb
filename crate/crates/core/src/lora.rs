//! Adapter data model and delta algebra.
//!
//! A layer delta stores the factors `B (d×r)` and `A (r×k)` of a low-rank
//! update together with a scale `alpha`; the effective update of the host
//! weight `W (d×k)` is `(alpha / r) · B · A`.

use std::collections::{BTreeMap, BTreeSet};

use crate::error::{Error, Result};
use crate::rng::SeededRng;
use crate::svd::truncated_svd;
use crate::tensor::Tensor;

/// Default rank of the global adapter.
pub const DEFAULT_GLOBAL_RANK: usize = 4;

#[derive(Debug, Clone, PartialEq)]
pub struct LayerDelta {
    pub layer_id: String,
    /// Output dimension of the host layer.
    pub d: usize,
    /// Input dimension of the host layer.
    pub k: usize,
    pub r: usize,
    pub alpha: f64,
    /// `d × r`
    pub b: Tensor,
    /// `r × k`
    pub a: Tensor,
}

impl LayerDelta {
    pub fn new(layer_id: impl Into<String>, b: Tensor, a: Tensor, alpha: f64) -> Result<Self> {
        if b.shape().len() != 2 || a.shape().len() != 2 {
            return Err(Error::shape("lora factors must be matrices"));
        }
        let ld = LayerDelta {
            layer_id: layer_id.into(),
            d: b.shape()[0],
            k: a.shape()[1],
            r: b.shape()[1],
            alpha,
            b,
            a,
        };
        ld.validate()?;
        Ok(ld)
    }

    pub fn validate(&self) -> Result<()> {
        if self.layer_id.is_empty() {
            return Err(Error::shape("empty layer id"));
        }
        if self.r == 0 || self.r > self.d.min(self.k) {
            return Err(Error::shape(format!(
                "{}: rank {} outside 1..={}",
                self.layer_id,
                self.r,
                self.d.min(self.k)
            )));
        }
        if self.b.shape() != [self.d, self.r] || self.a.shape() != [self.r, self.k] {
            return Err(Error::shape(format!(
                "{}: B {:?} / A {:?} do not match d={} k={} r={}",
                self.layer_id,
                self.b.shape(),
                self.a.shape(),
                self.d,
                self.k,
                self.r
            )));
        }
        if !(self.alpha > 0.0) || !self.alpha.is_finite() {
            return Err(Error::shape(format!(
                "{}: alpha must be positive",
                self.layer_id
            )));
        }
        Ok(())
    }

    /// `alpha / r`.
    pub fn scale(&self) -> f64 {
        self.alpha / self.r as f64
    }

    /// Applies the delta to a batch of inputs: `scale · (X · Aᵀ) · Bᵀ`, `n×k → n×d`.
    pub fn apply(&self, input: &Tensor) -> Result<Tensor> {
        let h = input.matmul_bt(&self.a)?;
        Ok(h.matmul_bt(&self.b)?.scale(self.scale()))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LoraAdapter {
    pub adapter_id: String,
    pub layers: Vec<LayerDelta>,
    pub metadata: BTreeMap<String, String>,
}

impl LoraAdapter {
    pub fn new(adapter_id: impl Into<String>, layers: Vec<LayerDelta>) -> Result<Self> {
        let a = LoraAdapter {
            adapter_id: adapter_id.into(),
            layers,
            metadata: BTreeMap::new(),
        };
        a.validate()?;
        Ok(a)
    }

    pub fn with_metadata(mut self, key: impl Into<String>, value: impl Into<String>) -> Self {
        self.metadata.insert(key.into(), value.into());
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.adapter_id.is_empty() {
            return Err(Error::shape("empty adapter id"));
        }
        if self.layers.is_empty() {
            return Err(Error::shape(format!(
                "adapter {} has no layers",
                self.adapter_id
            )));
        }
        let mut seen = BTreeSet::new();
        for l in &self.layers {
            l.validate()?;
            if !seen.insert(l.layer_id.as_str()) {
                return Err(Error::shape(format!(
                    "adapter {} repeats layer {}",
                    self.adapter_id, l.layer_id
                )));
            }
        }
        Ok(())
    }

    pub fn layer(&self, layer_id: &str) -> Option<&LayerDelta> {
        self.layers.iter().find(|l| l.layer_id == layer_id)
    }

    /// Number of hosted layers (`m`).
    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }
}

/// `(alpha / r) · B · A` as a dense `d × k` matrix.
pub fn materialize_delta(ld: &LayerDelta) -> Result<Tensor> {
    ld.validate()?;
    Ok(ld.b.matmul(&ld.a)?.scale(ld.scale()))
}

/// Elementwise sum of the materialised deltas of every adapter carrying
/// `layer_id`; adapters without the layer contribute nothing.
pub fn sum_deltas(adapters: &[LoraAdapter], layer_id: &str) -> Result<Tensor> {
    let mut acc: Option<Tensor> = None;
    for ad in adapters {
        let Some(ld) = ad.layer(layer_id) else {
            continue;
        };
        let delta = materialize_delta(ld)?;
        match &mut acc {
            None => acc = Some(delta),
            Some(t) => {
                if !t.same_shape(&delta) {
                    return Err(Error::shape(format!(
                        "layer {layer_id}: {:?} vs {:?} in adapter {}",
                        t.shape(),
                        delta.shape(),
                        ad.adapter_id
                    )));
                }
                t.add_assign(&delta);
            }
        }
    }
    acc.ok_or_else(|| Error::MissingLayer(layer_id.to_string()))
}

/// Identifier of the global adapter built from a set of adapters; independent
/// of input order.
pub fn global_adapter_id(adapters: &[LoraAdapter]) -> String {
    let mut ids: Vec<&str> = adapters.iter().map(|a| a.adapter_id.as_str()).collect();
    ids.sort_unstable();
    format!("global[{}]", ids.join("+"))
}

/// Sums the deltas of `adapters` per layer and factors each sum with a rank-`r_g`
/// truncated SVD, splitting the singular values evenly between the factors:
/// `B_g = U·√S`, `A_g = √S·Vᵀ`, `alpha = r_g`.
pub fn build_global_lora(adapters: &[LoraAdapter], r_g: usize) -> Result<LoraAdapter> {
    if adapters.is_empty() {
        return Err(Error::arg("global adapter needs at least one adapter"));
    }
    if r_g == 0 {
        return Err(Error::arg("global rank must be positive"));
    }
    // Sorting by id makes both the layer order and the summation order
    // independent of the caller's ordering.
    let mut sorted: Vec<LoraAdapter> = adapters.to_vec();
    sorted.sort_by(|a, b| a.adapter_id.cmp(&b.adapter_id));
    let mut layer_ids: Vec<&str> = Vec::new();
    for ad in &sorted {
        for l in &ad.layers {
            if !layer_ids.contains(&l.layer_id.as_str()) {
                layer_ids.push(&l.layer_id);
            }
        }
    }
    let mut layers = Vec::with_capacity(layer_ids.len());
    for id in &layer_ids {
        let sum = sum_deltas(&sorted, id)?;
        let svd = truncated_svd(&sum, r_g)?;
        let roots: Vec<f64> = svd.s.iter().map(|s| s.sqrt()).collect();
        let mut b = svd.u.clone();
        for i in 0..b.rows() {
            for (c, v) in b.row_mut(i).iter_mut().enumerate() {
                *v *= roots[c];
            }
        }
        let mut a = svd.v.transpose()?;
        for c in 0..a.rows() {
            for v in a.row_mut(c) {
                *v *= roots[c];
            }
        }
        layers.push(LayerDelta::new(*id, b, a, r_g as f64)?);
    }
    let sources: Vec<&str> = sorted.iter().map(|a| a.adapter_id.as_str()).collect();
    Ok(LoraAdapter::new(global_adapter_id(&sorted), layers)?
        .with_metadata("kind", "global")
        .with_metadata("sources", sources.join(",")))
}

/// Host weights keyed by layer id, each `d × k`.
pub type BaseWeights = BTreeMap<String, Tensor>;

/// Linear-addition baseline: `W₀ + scale · Σᵢ ΔWᵢ` for every layer.
pub fn apply_direct(
    base: &BaseWeights,
    adapters: &[LoraAdapter],
    scale: f64,
) -> Result<BaseWeights> {
    let mut merged = base.clone();
    for ad in adapters {
        for ld in &ad.layers {
            let w = merged
                .get_mut(&ld.layer_id)
                .ok_or_else(|| Error::arg(format!("base model has no layer {}", ld.layer_id)))?;
            let delta = materialize_delta(ld)?;
            if !w.same_shape(&delta) {
                return Err(Error::shape(format!(
                    "layer {}: base {:?} vs delta {:?}",
                    ld.layer_id,
                    w.shape(),
                    delta.shape()
                )));
            }
            w.add_scaled(&delta, scale);
        }
    }
    Ok(merged)
}

/// One `(layer_id, d, k)` entry of a host model's adaptable layers.
#[derive(Debug, Clone, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct LayerSpec {
    pub layer_id: String,
    pub d: usize,
    pub k: usize,
}

impl LayerSpec {
    pub fn new(layer_id: impl Into<String>, d: usize, k: usize) -> Self {
        Self {
            layer_id: layer_id.into(),
            d,
            k,
        }
    }
}

/// Gaussian adapter whose entries are exactly representable as `f32`.
pub fn random_adapter(
    id: &str,
    catalog: &[LayerSpec],
    rank: usize,
    seed: u64,
) -> Result<LoraAdapter> {
    let mut rng = SeededRng::new(seed);
    let layers = catalog
        .iter()
        .map(|spec| {
            let r = rank.min(spec.d.min(spec.k));
            let b = Tensor::matrix(spec.d, r, rng.normals(spec.d * r, 1.0 / (r as f64).sqrt()))?;
            let a = Tensor::matrix(
                r,
                spec.k,
                rng.normals(r * spec.k, 1.0 / (spec.k as f64).sqrt()),
            )?;
            LayerDelta::new(
                spec.layer_id.clone(),
                b.round_to_f32(),
                a.round_to_f32(),
                r as f64,
            )
        })
        .collect::<Result<Vec<_>>>()?;
    LoraAdapter::new(id, layers)
}
