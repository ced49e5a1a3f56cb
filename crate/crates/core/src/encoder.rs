//! Weight-space adapter encoder.
//!
//! Each adapted layer becomes one token: a learned probe `q` is pushed through
//! the scaled low-rank product and read out by a learned matrix `Ŵ`, i.e.
//! `v = ((alpha/r)·B·(A·q))ᵀ·Ŵ`. Tokens get a learned positional embedding
//! keyed by catalog position, a CLS token is prepended, and a stack of
//! pre-norm transformer blocks runs over the sequence. The CLS output,
//! L2-normalised, is the adapter embedding.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::container::{decode_bundle, encode_bundle, ENCODER_MAGIC};
use crate::error::{Error, FormatError, Result};
use crate::lora::{LayerDelta, LayerSpec, LoraAdapter};
use crate::nn::{attention_block_vars, BlockConfig, BlockParams, BlockVars};
use crate::rng::SeededRng;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EncoderConfig {
    pub out_dim: usize,
    pub blocks: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            out_dim: 64,
            blocks: 4,
            heads: 4,
            mlp_ratio: 4,
        }
    }
}

impl EncoderConfig {
    pub fn block_config(&self) -> BlockConfig {
        BlockConfig {
            dim: self.out_dim,
            heads: self.heads,
            mlp_hidden: self.out_dim * self.mlp_ratio,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.blocks == 0 || self.mlp_ratio == 0 {
            return Err(Error::arg(
                "encoder needs at least one block and a positive mlp ratio",
            ));
        }
        self.block_config().validate()
    }
}

/// Per-layer probe and readout of the token embedder.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenEmbedder {
    /// `1 × k`
    pub q: Tensor,
    /// `d × out_dim`
    pub w_hat: Tensor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderParams {
    pub config: EncoderConfig,
    pub catalog: Vec<LayerSpec>,
    /// One entry per catalog layer, same order.
    pub tokens: Vec<TokenEmbedder>,
    /// `catalog.len() × out_dim`
    pub positions: Tensor,
    /// `1 × out_dim`
    pub cls: Tensor,
    pub blocks: Vec<BlockParams>,
}

/// Tape view of [`EncoderParams`].
pub struct EncoderVars<'t> {
    pub q: Vec<Var<'t>>,
    pub w_hat: Vec<Var<'t>>,
    pub positions: Var<'t>,
    pub cls: Var<'t>,
    pub blocks: Vec<BlockVars<'t>>,
}

impl<'t> EncoderVars<'t> {
    /// All variables in [`EncoderParams::tensors`] order.
    pub fn to_vec(&self) -> Vec<Var<'t>> {
        let mut out = Vec::new();
        for (q, w) in self.q.iter().zip(&self.w_hat) {
            out.push(*q);
            out.push(*w);
        }
        out.push(self.positions);
        out.push(self.cls);
        for b in &self.blocks {
            out.extend(b.to_vec());
        }
        out
    }

    /// Inverse of [`EncoderVars::to_vec`] for the layout of `params`.
    pub fn from_slice(params: &EncoderParams, vars: &[Var<'t>]) -> Result<Self> {
        let n_tok = params.tokens.len();
        let per_block = BlockParams::FIELD_NAMES.len();
        let expected = 2 * n_tok + 2 + per_block * params.blocks.len();
        if vars.len() != expected {
            return Err(Error::arg(format!(
                "expected {expected} encoder variables, got {}",
                vars.len()
            )));
        }
        let (tok, rest) = vars.split_at(2 * n_tok);
        Ok(EncoderVars {
            q: tok.iter().step_by(2).copied().collect(),
            w_hat: tok.iter().skip(1).step_by(2).copied().collect(),
            positions: rest[0],
            cls: rest[1],
            blocks: rest[2..]
                .chunks(per_block)
                .map(BlockVars::from_slice)
                .collect(),
        })
    }
}

fn check_catalog(catalog: &[LayerSpec]) -> Result<()> {
    if catalog.is_empty() {
        return Err(Error::arg("layer catalog is empty"));
    }
    let mut seen = std::collections::BTreeSet::new();
    for l in catalog {
        if l.d == 0 || l.k == 0 {
            return Err(Error::arg(format!(
                "layer {} has a zero dimension",
                l.layer_id
            )));
        }
        if !seen.insert(l.layer_id.as_str()) {
            return Err(Error::arg(format!("duplicate layer id {}", l.layer_id)));
        }
    }
    Ok(())
}

pub fn init_encoder(
    catalog: &[LayerSpec],
    config: EncoderConfig,
    seed: u64,
) -> Result<EncoderParams> {
    check_catalog(catalog)?;
    config.validate()?;
    let mut rng = SeededRng::derive(seed, "encoder-init");
    let out = config.out_dim;
    let tokens = catalog
        .iter()
        .map(|l| TokenEmbedder {
            q: Tensor::row_vector(rng.normals(l.k, 1.0 / (l.k as f64).sqrt())),
            w_hat: crate::nn::init_matrix(&mut rng, l.d, out),
        })
        .collect();
    let positions = Tensor::matrix(catalog.len(), out, rng.normals(catalog.len() * out, 0.02))?;
    let cls = Tensor::row_vector(rng.normals(out, 0.02));
    let bc = config.block_config();
    let blocks = (0..config.blocks)
        .map(|_| BlockParams::init(&bc, &mut rng))
        .collect();
    Ok(EncoderParams {
        config,
        catalog: catalog.to_vec(),
        tokens,
        positions,
        cls,
        blocks,
    })
}

impl EncoderParams {
    pub fn out_dim(&self) -> usize {
        self.config.out_dim
    }

    pub fn catalog_position(&self, layer_id: &str) -> Option<usize> {
        self.catalog.iter().position(|l| l.layer_id == layer_id)
    }

    pub fn tensors(&self) -> Vec<&Tensor> {
        let mut out = Vec::new();
        for t in &self.tokens {
            out.push(&t.q);
            out.push(&t.w_hat);
        }
        out.push(&self.positions);
        out.push(&self.cls);
        for b in &self.blocks {
            out.extend(b.tensors());
        }
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = Vec::new();
        for t in &mut self.tokens {
            out.push(&mut t.q);
            out.push(&mut t.w_hat);
        }
        out.push(&mut self.positions);
        out.push(&mut self.cls);
        for b in &mut self.blocks {
            out.extend(b.tensors_mut());
        }
        out
    }

    fn names(&self) -> Vec<String> {
        let mut out = Vec::new();
        for l in &self.catalog {
            out.push(format!("q.{}", l.layer_id));
            out.push(format!("w_hat.{}", l.layer_id));
        }
        out.push("positions".into());
        out.push("cls".into());
        for i in 0..self.blocks.len() {
            out.extend(
                BlockParams::FIELD_NAMES
                    .iter()
                    .map(|f| format!("block{i}.{f}")),
            );
        }
        out
    }

    fn bind_with<'t>(&self, tape: &'t Tape, trainable: bool) -> EncoderVars<'t> {
        let leaf = |t: &Tensor| {
            if trainable {
                tape.param(t.clone())
            } else {
                tape.constant(t.clone())
            }
        };
        EncoderVars {
            q: self.tokens.iter().map(|t| leaf(&t.q)).collect(),
            w_hat: self.tokens.iter().map(|t| leaf(&t.w_hat)).collect(),
            positions: leaf(&self.positions),
            cls: leaf(&self.cls),
            blocks: self
                .blocks
                .iter()
                .map(|b| {
                    if trainable {
                        b.bind(tape)
                    } else {
                        b.bind_frozen(tape)
                    }
                })
                .collect(),
        }
    }

    pub fn bind<'t>(&self, tape: &'t Tape) -> EncoderVars<'t> {
        self.bind_with(tape, true)
    }

    pub fn bind_frozen<'t>(&self, tape: &'t Tape) -> EncoderVars<'t> {
        self.bind_with(tape, false)
    }

    pub fn round_to_f32(&mut self) {
        for t in self.tensors_mut() {
            *t = t.round_to_f32();
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let header = serde_json::json!({ "config": self.config, "catalog": self.catalog });
        let names = self.names();
        let named: Vec<(String, &Tensor)> = names.into_iter().zip(self.tensors()).collect();
        encode_bundle(ENCODER_MAGIC, header, &named)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        #[derive(Deserialize)]
        #[serde(deny_unknown_fields)]
        struct Header {
            config: EncoderConfig,
            catalog: Vec<LayerSpec>,
        }
        let (header, tensors) = decode_bundle(bytes, ENCODER_MAGIC)?;
        let header: Header =
            serde_json::from_value(header).map_err(|e| FormatError::Manifest(e.to_string()))?;
        let mut params = init_encoder(&header.catalog, header.config, 0)
            .map_err(|e| FormatError::Manifest(e.to_string()))?;
        let names = params.names();
        if tensors.len() != names.len() {
            return Err(FormatError::LengthMismatch(format!(
                "encoder expects {} tensors, container has {}",
                names.len(),
                tensors.len()
            ))
            .into());
        }
        for ((slot, name), (got_name, t)) in
            params.tensors_mut().into_iter().zip(&names).zip(tensors)
        {
            if *name != got_name || slot.shape() != t.shape() {
                return Err(FormatError::Shape(format!(
                    "expected {name} {:?}, found {got_name} {:?}",
                    slot.shape(),
                    t.shape()
                ))
                .into());
            }
            *slot = t;
        }
        Ok(params)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

fn check_layer(ld: &LayerDelta, q: &Tensor, w_hat: &Tensor) -> Result<()> {
    if q.shape() != [1, ld.k] || w_hat.shape().len() != 2 || w_hat.shape()[0] != ld.d {
        return Err(Error::arg(format!(
            "layer {} ({}x{}) does not match probe {:?} / readout {:?}",
            ld.layer_id,
            ld.d,
            ld.k,
            q.shape(),
            w_hat.shape()
        )));
    }
    Ok(())
}

/// Token embedding on the tape. The factors enter as constants.
pub fn token_embed_var<'t>(ld: &LayerDelta, q: Var<'t>, w_hat: Var<'t>) -> Result<Var<'t>> {
    let tape = q.tape();
    check_layer(ld, &q.value(), &w_hat.value())?;
    let a = tape.constant(ld.a.clone());
    let b = tape.constant(ld.b.clone());
    // (1×k)·Aᵀ → 1×r, then ·Bᵀ → 1×d; never forms the d×k product.
    q.matmul_bt(a)?
        .matmul_bt(b)?
        .scale(ld.scale())?
        .matmul(w_hat)
}

/// `((alpha/r)·B·(A·q))ᵀ·Ŵ` as a `1 × out_dim` row.
pub fn token_embed(ld: &LayerDelta, q: &Tensor, w_hat: &Tensor) -> Result<Tensor> {
    check_layer(ld, q, w_hat)?;
    let aq = q.matmul_bt(&ld.a)?;
    let baq = aq.matmul_bt(&ld.b)?.scale(ld.scale());
    baq.matmul(w_hat)
}

/// Un-normalised CLS output for one adapter, `1 × out_dim`.
pub fn encode_lora_raw<'t>(
    adapter: &LoraAdapter,
    params: &EncoderParams,
    vars: &EncoderVars<'t>,
) -> Result<Var<'t>> {
    for l in &adapter.layers {
        if params.catalog_position(&l.layer_id).is_none() {
            return Err(Error::UnknownLayer(l.layer_id.clone()));
        }
    }
    let tape = vars.cls.tape();
    let mut seq = vec![vars.cls];
    for (pos, spec) in params.catalog.iter().enumerate() {
        let Some(ld) = adapter.layer(&spec.layer_id) else {
            continue;
        };
        let tok = token_embed_var(ld, vars.q[pos], vars.w_hat[pos])?;
        seq.push(tok.add(vars.positions.slice_rows(pos, 1)?)?);
    }
    let mut h = tape.concat_rows(&seq)?;
    for b in &vars.blocks {
        h = attention_block_vars(h, b, params.config.heads)?;
    }
    h.slice_rows(0, 1)
}

/// Unit-norm embedding on the tape.
pub fn encode_lora_var<'t>(
    adapter: &LoraAdapter,
    params: &EncoderParams,
    vars: &EncoderVars<'t>,
) -> Result<Var<'t>> {
    encode_lora_raw(adapter, params, vars)?.l2_normalize_rows()
}

/// Unit-norm adapter embedding.
#[derive(Debug, Clone, PartialEq)]
pub struct LoraEmbedding(pub Vec<f64>);

impl LoraEmbedding {
    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }
}

pub fn encode_lora(adapter: &LoraAdapter, params: &EncoderParams) -> Result<LoraEmbedding> {
    let tape = Tape::new();
    let vars = params.bind_frozen(&tape);
    Ok(LoraEmbedding(
        encode_lora_var(adapter, params, &vars)?.value().into_data(),
    ))
}

/// Order-preserving batch encode. Each adapter uses the same code path as
/// [`encode_lora`], so results do not depend on batching.
pub fn encode_pool(adapters: &[LoraAdapter], params: &EncoderParams) -> Result<Vec<LoraEmbedding>> {
    adapters.iter().map(|a| encode_lora(a, params)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lora::random_adapter;

    fn small() -> (Vec<LayerSpec>, EncoderConfig) {
        (
            vec![LayerSpec::new("l0", 5, 4), LayerSpec::new("l1", 5, 5)],
            EncoderConfig {
                out_dim: 8,
                blocks: 2,
                heads: 2,
                mlp_ratio: 2,
            },
        )
    }

    #[test]
    fn init_is_deterministic_and_shaped() {
        let (cat, cfg) = small();
        let a = init_encoder(&cat, cfg, 3).unwrap();
        assert_eq!(a, init_encoder(&cat, cfg, 3).unwrap());
        assert_ne!(a, init_encoder(&cat, cfg, 4).unwrap());
        assert_eq!(a.tokens[0].w_hat.shape(), &[5, 8]);
        assert_eq!(a.cls.shape(), &[1, 8]);
        assert!(init_encoder(&[], cfg, 3).is_err());
        let dup = vec![LayerSpec::new("x", 2, 2), LayerSpec::new("x", 2, 2)];
        assert!(init_encoder(&dup, cfg, 3).is_err());
    }

    #[test]
    fn token_embed_hand_example() {
        let ld = LayerDelta::new(
            "l",
            Tensor::matrix(2, 1, vec![1.0, 0.0]).unwrap(),
            Tensor::row_vector(vec![1.0, 1.0]),
            1.0,
        )
        .unwrap();
        let v = token_embed(
            &ld,
            &Tensor::row_vector(vec![1.0, 0.0]),
            &Tensor::identity(2),
        )
        .unwrap();
        assert_eq!(v.data(), &[1.0, 0.0]);
        assert!(token_embed(&ld, &Tensor::row_vector(vec![1.0]), &Tensor::identity(2)).is_err());
    }

    #[test]
    fn zero_b_gives_zero_token() {
        let ld = LayerDelta::new(
            "l",
            Tensor::zeros(&[3, 2]),
            Tensor::filled(&[2, 4], 1.5),
            2.0,
        )
        .unwrap();
        let mut rng = SeededRng::new(0);
        let v = token_embed(
            &ld,
            &Tensor::row_vector(rng.normals(4, 1.0)),
            &Tensor::matrix(3, 6, rng.normals(18, 1.0)).unwrap(),
        )
        .unwrap();
        assert!(v.data().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn embedding_is_unit_norm_and_rejects_unknown_layers() {
        let (cat, cfg) = small();
        let p = init_encoder(&cat, cfg, 1).unwrap();
        let a = random_adapter("a", &cat, 2, 13).unwrap();
        let e = encode_lora(&a, &p).unwrap();
        let n: f64 = e.0.iter().map(|x| x * x).sum();
        assert!((n.sqrt() - 1.0).abs() < 1e-6);
        let other = random_adapter("b", &[LayerSpec::new("zz", 5, 5)], 2, 1).unwrap();
        assert!(matches!(
            encode_lora(&other, &p),
            Err(Error::UnknownLayer(_))
        ));
    }

    #[test]
    fn zero_adapters_of_different_rank_collide() {
        let (cat, cfg) = small();
        let p = init_encoder(&cat, cfg, 1).unwrap();
        let zero = |r: usize| {
            let layers = cat
                .iter()
                .map(|l| {
                    LayerDelta::new(
                        l.layer_id.clone(),
                        Tensor::zeros(&[l.d, r]),
                        Tensor::filled(&[r, l.k], 1.0),
                        1.0,
                    )
                    .unwrap()
                })
                .collect();
            LoraAdapter::new("z", layers).unwrap()
        };
        assert_eq!(
            encode_lora(&zero(1), &p).unwrap(),
            encode_lora(&zero(3), &p).unwrap()
        );
    }

    #[test]
    fn container_round_trip() {
        let (cat, cfg) = small();
        let mut p = init_encoder(&cat, cfg, 5).unwrap();
        p.round_to_f32();
        let q = EncoderParams::from_bytes(&p.to_bytes()).unwrap();
        assert_eq!(p, q);
        let mut bad = p.to_bytes();
        bad[0] = b'X';
        assert!(EncoderParams::from_bytes(&bad).is_err());
    }

    #[test]
    fn pool_matches_single() {
        let (cat, cfg) = small();
        let p = init_encoder(&cat, cfg, 1).unwrap();
        let pool: Vec<_> = (0..3)
            .map(|i| random_adapter(&format!("a{i}"), &cat, 2, i).unwrap())
            .collect();
        let batch = encode_pool(&pool, &p).unwrap();
        for (a, e) in pool.iter().zip(&batch) {
            assert_eq!(&encode_lora(a, &p).unwrap(), e);
        }
    }
}
