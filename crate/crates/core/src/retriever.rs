//! Contrastive alignment of adapter embeddings with caption embeddings.

use std::collections::BTreeMap;
use std::io::{BufRead, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autodiff::{CustomOp, Tape, Var};
use crate::encoder::{encode_lora_var, encode_pool, EncoderParams};
use crate::error::{Error, Result};
use crate::index::RetrievalIndex;
use crate::kernel::softmax;
use crate::lora::LoraAdapter;
use crate::optim::{adam_step, AdamState};
use crate::rng::SeededRng;
use crate::tensor::Tensor;
use crate::text::{TextEmbedder, TextEmbedding};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaptionPair {
    pub adapter_id: String,
    pub caption: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub embedding: Option<Vec<f64>>,
}

impl CaptionPair {
    pub fn new(adapter_id: impl Into<String>, caption: impl Into<String>) -> Self {
        Self {
            adapter_id: adapter_id.into(),
            caption: caption.into(),
            embedding: None,
        }
    }

    pub fn embed(&self, text: &TextEmbedder) -> Result<TextEmbedding> {
        if self.caption.trim().is_empty() && self.embedding.is_none() {
            return Err(Error::arg(format!(
                "pair for {} has neither caption nor embedding",
                self.adapter_id
            )));
        }
        text.embed_or_use(&self.caption, self.embedding.as_deref())
    }
}

pub fn read_caption_pairs(path: impl AsRef<Path>) -> Result<Vec<CaptionPair>> {
    let file = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut out = Vec::new();
    for line in file.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line)?);
    }
    Ok(out)
}

pub fn write_caption_pairs(path: impl AsRef<Path>, pairs: &[CaptionPair]) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    for p in pairs {
        serde_json::to_writer(&mut f, p)?;
        f.write_all(b"\n")?;
    }
    f.flush()?;
    Ok(())
}

// ---------------------------------------------------------------------------
// Loss

/// Value and gradients of the symmetric contrastive loss.
#[derive(Debug, Clone, PartialEq)]
pub struct ContrastiveLoss {
    pub loss: f64,
    /// `−log softmax_row(S)_ii` per row.
    pub row_terms: Vec<f64>,
    /// `−log softmax_col(S)_ii` per column.
    pub col_terms: Vec<f64>,
    pub grad_e: Tensor,
    pub grad_t: Tensor,
}

struct SimilarityStats {
    p_row: Tensor,
    p_col_t: Tensor,
    row_terms: Vec<f64>,
    col_terms: Vec<f64>,
}

fn similarity_stats(s: &Tensor) -> SimilarityStats {
    let n = s.rows();
    let p_row = softmax(s);
    // Column softmax as a row softmax of Sᵀ.
    let p_col_t = softmax(&s.transpose().expect("matrix"));
    let row_terms = (0..n).map(|i| -p_row.at(i, i).ln()).collect();
    let col_terms = (0..n).map(|i| -p_col_t.at(i, i).ln()).collect();
    SimilarityStats {
        p_row,
        p_col_t,
        row_terms,
        col_terms,
    }
}

/// `dL/dS = (P_row − I) + (P_col − I)`.
fn similarity_grad(st: &SimilarityStats) -> Tensor {
    let n = st.p_row.rows();
    let mut g = st
        .p_row
        .add(&st.p_col_t.transpose().expect("matrix"))
        .expect("same shape");
    for i in 0..n {
        let v = g.at(i, i);
        g.set(i, i, v - 2.0);
    }
    g
}

fn check_pair(e: &[usize], t: &[usize]) -> Result<()> {
    if e.len() != 2 || e != t {
        return Err(Error::arg(format!(
            "contrastive loss needs matching matrices, got {e:?} and {t:?}"
        )));
    }
    if e[0] < 2 {
        return Err(Error::arg("contrastive loss needs at least two pairs"));
    }
    Ok(())
}

/// Loss with gradients for paired rows of `E` and `T` (raw dot products).
pub fn contrastive_loss(e: &Tensor, t: &Tensor) -> Result<ContrastiveLoss> {
    check_pair(e.shape(), t.shape())?;
    let s = e.matmul_bt(t)?;
    let st = similarity_stats(&s);
    let ds = similarity_grad(&st);
    Ok(ContrastiveLoss {
        loss: st.row_terms.iter().sum::<f64>() + st.col_terms.iter().sum::<f64>(),
        grad_e: ds.matmul(t)?,
        grad_t: ds.matmul_at(e)?,
        row_terms: st.row_terms,
        col_terms: st.col_terms,
    })
}

/// Loss on a precomputed similarity matrix.
struct SymmetricCrossEntropy;

impl CustomOp for SymmetricCrossEntropy {
    fn name(&self) -> &'static str {
        "symmetric_cross_entropy"
    }

    fn backward(&self, parents: &[&Tensor], _: &Tensor, upstream: &Tensor) -> Vec<Option<Tensor>> {
        let st = similarity_stats(parents[0]);
        vec![Some(similarity_grad(&st).scale(upstream.item()))]
    }
}

/// `S · exp(log_scale)` with a learnable scalar.
struct ExpScale;

impl CustomOp for ExpScale {
    fn name(&self) -> &'static str {
        "exp_scale"
    }

    fn backward(
        &self,
        parents: &[&Tensor],
        output: &Tensor,
        upstream: &Tensor,
    ) -> Vec<Option<Tensor>> {
        let f = parents[1].item().exp();
        let ds = upstream.scale(f);
        let dl: f64 = upstream
            .data()
            .iter()
            .zip(output.data())
            .map(|(g, o)| g * o)
            .sum();
        vec![Some(ds), Some(Tensor::scalar(dl))]
    }
}

/// Contrastive loss on the tape from a similarity matrix `S`.
pub fn contrastive_loss_from_similarity<'t>(s: Var<'t>) -> Result<Var<'t>> {
    let shape = s.shape();
    check_pair(&shape, &shape)?;
    if shape[0] != shape[1] {
        return Err(Error::arg("similarity matrix must be square"));
    }
    let value = s.value();
    let st = similarity_stats(&value);
    let loss = st.row_terms.iter().sum::<f64>() + st.col_terms.iter().sum::<f64>();
    Ok(s.tape()
        .custom(&[s], Tensor::scalar(loss), Box::new(SymmetricCrossEntropy)))
}

/// Contrastive loss on the tape, optionally with a learnable log-scale on
/// the similarities.
pub fn contrastive_loss_var<'t>(
    e: Var<'t>,
    t: Var<'t>,
    log_scale: Option<Var<'t>>,
) -> Result<Var<'t>> {
    check_pair(&e.shape(), &t.shape())?;
    let mut s = e.matmul_bt(t)?;
    if let Some(ls) = log_scale {
        let value = s.value().scale(ls.value().item().exp());
        s = e.tape().custom(&[s, ls], value, Box::new(ExpScale));
    }
    contrastive_loss_from_similarity(s)
}

// ---------------------------------------------------------------------------
// Training

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RetrieverConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Learn a scale on the similarities instead of using raw dot products.
    pub learn_temperature: bool,
}

impl Default for RetrieverConfig {
    fn default() -> Self {
        Self {
            epochs: 200,
            batch_size: 18,
            lr: 1e-3,
            learn_temperature: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    /// Mean training loss over the epoch's batches (initial evaluation loss for epoch 0).
    pub train_loss: f64,
    pub eval_loss: f64,
    pub recall_at_1: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub similarity_scale: Option<f64>,
}

pub struct RetrieverRun {
    pub params: EncoderParams,
    pub metrics: Vec<EpochMetrics>,
}

struct Prepared<'a> {
    pool: &'a [LoraAdapter],
    /// Caption embeddings per pool position.
    train: Vec<Vec<TextEmbedding>>,
    heldout: Vec<(usize, TextEmbedding)>,
}

fn prepare<'a>(
    pool: &'a [LoraAdapter],
    train: &[CaptionPair],
    heldout: &[CaptionPair],
    text: &TextEmbedder,
    out_dim: usize,
) -> Result<Prepared<'a>> {
    let pos: BTreeMap<&str, usize> = pool
        .iter()
        .enumerate()
        .map(|(i, a)| (a.adapter_id.as_str(), i))
        .collect();
    if pos.len() != pool.len() {
        return Err(Error::arg("pool has duplicate adapter ids"));
    }
    let locate = |p: &CaptionPair| {
        pos.get(p.adapter_id.as_str()).copied().ok_or_else(|| {
            Error::arg(format!(
                "caption refers to unknown adapter {}",
                p.adapter_id
            ))
        })
    };
    let embed = |p: &CaptionPair| -> Result<TextEmbedding> {
        let e = p.embed(text)?;
        if e.dim() != out_dim {
            return Err(Error::arg(format!(
                "text dim {} != encoder dim {out_dim}",
                e.dim()
            )));
        }
        Ok(e)
    };
    let mut by_adapter = vec![Vec::new(); pool.len()];
    for p in train {
        by_adapter[locate(p)?].push(embed(p)?);
    }
    let heldout = heldout
        .iter()
        .map(|p| Ok((locate(p)?, embed(p)?)))
        .collect::<Result<Vec<_>>>()?;
    Ok(Prepared {
        pool,
        train: by_adapter,
        heldout,
    })
}

/// Held-out contrastive loss (first held-out caption per adapter) and recall@1
/// over all held-out captions against an exact index of the pool.
pub fn evaluate_retrieval(
    pool: &[LoraAdapter],
    heldout: &[CaptionPair],
    params: &EncoderParams,
    text: &TextEmbedder,
) -> Result<(f64, f64)> {
    let prep = prepare(pool, &[], heldout, text, params.out_dim())?;
    evaluate(&prep, params)
}

fn evaluate(prep: &Prepared<'_>, params: &EncoderParams) -> Result<(f64, f64)> {
    if prep.heldout.is_empty() {
        return Ok((f64::NAN, f64::NAN));
    }
    let embs = encode_pool(prep.pool, params)?;
    let rows: Vec<Vec<f64>> = embs.iter().map(|e| e.0.clone()).collect();
    let ids = prep.pool.iter().map(|a| a.adapter_id.clone()).collect();
    let index = RetrievalIndex::from_embeddings(ids, &rows, String::new())?;
    let mut hits = 0usize;
    for (i, t) in &prep.heldout {
        let top = index.query_topk(t.as_slice(), 1)?;
        if top[0].adapter_id == prep.pool[*i].adapter_id {
            hits += 1;
        }
    }
    let recall = hits as f64 / prep.heldout.len() as f64;

    let mut first: BTreeMap<usize, &TextEmbedding> = BTreeMap::new();
    for (i, t) in &prep.heldout {
        first.entry(*i).or_insert(t);
    }
    let loss = if first.len() >= 2 {
        let d = params.out_dim();
        let e: Vec<f64> = first
            .keys()
            .flat_map(|&i| rows[i].iter().copied())
            .collect();
        let t: Vec<f64> = first
            .values()
            .flat_map(|t| t.as_slice().iter().copied())
            .collect();
        let n = first.len();
        contrastive_loss(&Tensor::matrix(n, d, e)?, &Tensor::matrix(n, d, t)?)?.loss
    } else {
        f64::NAN
    };
    Ok((loss, recall))
}

/// Trains the encoder in place of `init` with Adam on the contrastive loss.
/// Each batch holds distinct adapters, each paired with one randomly drawn
/// training caption. Returns the trained parameters (rounded to `f32`) and
/// per-epoch metrics; entry 0 is the evaluation before training.
pub fn train_retriever(
    pool: &[LoraAdapter],
    train_pairs: &[CaptionPair],
    heldout_pairs: &[CaptionPair],
    init: EncoderParams,
    text: &TextEmbedder,
    config: &RetrieverConfig,
    seed: u64,
) -> Result<RetrieverRun> {
    if train_pairs.is_empty() {
        return Err(Error::arg("no training caption pairs"));
    }
    if config.batch_size < 2 || config.batch_size > pool.len() {
        return Err(Error::arg(format!(
            "batch size {} must lie in 2..={}",
            config.batch_size,
            pool.len()
        )));
    }
    if !(config.lr > 0.0) {
        return Err(Error::arg("learning rate must be positive"));
    }
    let prep = prepare(pool, train_pairs, heldout_pairs, text, init.out_dim())?;
    let captioned: Vec<usize> = (0..pool.len())
        .filter(|&i| !prep.train[i].is_empty())
        .collect();
    if captioned.len() < 2 {
        return Err(Error::arg("need captions for at least two adapters"));
    }

    let mut params = init;
    let mut log_scale = Tensor::scalar(0.0);
    let mut adam = AdamState::new(&params.tensors(), config.lr);
    let mut adam_scale = AdamState::new(&[&log_scale], config.lr);
    let mut rng = SeededRng::derive(seed, "retriever-train");
    let mut metrics = Vec::with_capacity(config.epochs + 1);

    let (eval_loss, recall) = evaluate(&prep, &params)?;
    let scale_of = |ls: &Tensor| config.learn_temperature.then(|| ls.item().exp());
    metrics.push(EpochMetrics {
        epoch: 0,
        train_loss: eval_loss,
        eval_loss,
        recall_at_1: recall,
        similarity_scale: scale_of(&log_scale),
    });

    for epoch in 1..=config.epochs {
        let mut order = captioned.clone();
        rng.shuffle(&mut order);
        let mut total = 0.0;
        let mut steps = 0usize;
        for batch in order.chunks(config.batch_size) {
            if batch.len() < 2 {
                continue;
            }
            let texts: Vec<f64> = batch
                .iter()
                .flat_map(|&i| {
                    let caps = &prep.train[i];
                    caps[rng.below(caps.len())].as_slice().to_vec()
                })
                .collect();
            let tape = Tape::new();
            let vars = params.bind(&tape);
            let rows = batch
                .iter()
                .map(|&i| encode_lora_var(&pool[i], &params, &vars))
                .collect::<Result<Vec<_>>>()?;
            let e = tape.concat_rows(&rows)?;
            let t = tape.constant(Tensor::matrix(batch.len(), params.out_dim(), texts)?);
            let ls = config
                .learn_temperature
                .then(|| tape.param(log_scale.clone()));
            let loss = contrastive_loss_var(e, t, ls)?;
            let lv = loss.value().item();
            if !lv.is_finite() {
                return Err(Error::Numeric(format!(
                    "retriever loss became {lv} at epoch {epoch}"
                )));
            }
            let grads = tape.backward(loss)?;
            let g: Vec<Tensor> = vars.to_vec().iter().map(|&v| grads.wrt(v)).collect();
            adam_step(&mut params.tensors_mut(), &g, &mut adam)?;
            if let Some(ls) = ls {
                adam_step(&mut [&mut log_scale], &[grads.wrt(ls)], &mut adam_scale)?;
            }
            total += lv;
            steps += 1;
        }
        let (eval_loss, recall) = evaluate(&prep, &params)?;
        metrics.push(EpochMetrics {
            epoch,
            train_loss: total / steps.max(1) as f64,
            eval_loss,
            recall_at_1: recall,
            similarity_scale: scale_of(&log_scale),
        });
    }
    params.round_to_f32();
    Ok(RetrieverRun { params, metrics })
}

pub fn write_metrics_jsonl<T: Serialize>(path: impl AsRef<Path>, records: &[T]) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    for r in records {
        serde_json::to_writer(&mut f, r)?;
        f.write_all(b"\n")?;
    }
    f.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn uniform_similarity_value() {
        let e = Tensor::filled(&[4, 3], 0.5);
        let l = contrastive_loss(&e, &e).unwrap();
        assert!((l.loss - 8.0 * 4f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn near_diagonal_value() {
        let e = Tensor::from_rows(&[&[10.0, 0.0], &[0.0, 10.0]]);
        let t = Tensor::identity(2);
        let l = contrastive_loss(&e, &t).unwrap();
        let expected = 4.0 * (-10f64).exp().ln_1p();
        assert!((l.loss - expected).abs() < 1e-12);
        assert!(l.row_terms.iter().chain(&l.col_terms).all(|&x| x >= 0.0));
    }

    #[test]
    fn rejects_single_pair_and_mismatch() {
        assert!(contrastive_loss(&Tensor::zeros(&[1, 3]), &Tensor::zeros(&[1, 3])).is_err());
        assert!(contrastive_loss(&Tensor::zeros(&[2, 3]), &Tensor::zeros(&[3, 3])).is_err());
    }

    #[test]
    fn tape_and_closed_form_agree() {
        let mut rng = SeededRng::new(3);
        let e = Tensor::matrix(3, 4, rng.normals(12, 1.0)).unwrap();
        let t = Tensor::matrix(3, 4, rng.normals(12, 1.0)).unwrap();
        let closed = contrastive_loss(&e, &t).unwrap();
        let tape = Tape::new();
        let (ev, tv) = (tape.param(e.clone()), tape.param(t.clone()));
        let loss = contrastive_loss_var(ev, tv, None).unwrap();
        let g = tape.backward(loss).unwrap();
        assert!((loss.value().item() - closed.loss).abs() < 1e-12);
        assert!(g.wrt(ev).max_abs_diff(&closed.grad_e) < 1e-12);
        assert!(g.wrt(tv).max_abs_diff(&closed.grad_t) < 1e-12);
    }

    #[test]
    fn caption_pairs_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.jsonl");
        let mut pairs = vec![CaptionPair::new("a", "two moons")];
        pairs.push(CaptionPair {
            embedding: Some(vec![1.0, 0.0]),
            ..CaptionPair::new("b", "")
        });
        write_caption_pairs(&p, &pairs).unwrap();
        assert_eq!(read_caption_pairs(&p).unwrap(), pairs);
    }
}
