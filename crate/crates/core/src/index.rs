//! Exact cosine top-k index over adapter embeddings.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::container::{read_container, write_container, INDEX_MAGIC};
use crate::encoder::{encode_pool, EncoderParams};
use crate::error::{Error, FormatError, Result};
use crate::lora::LoraAdapter;
use crate::tensor::Tensor;

/// Hex SHA-256 of the serialised encoder.
pub fn encoder_fingerprint(params: &EncoderParams) -> String {
    hex::encode(Sha256::digest(params.to_bytes()))
}

#[derive(Debug, Clone, PartialEq)]
pub struct RetrievalIndex {
    out_dim: usize,
    ids: Vec<String>,
    /// Row-major `count × out_dim`, values representable as `f32`.
    rows: Vec<f64>,
    fingerprint: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Hit {
    pub adapter_id: String,
    pub score: f64,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct IndexHeader {
    out_dim: usize,
    count: usize,
    ids: Vec<String>,
    encoder_fingerprint: String,
}

/// Sorts by descending score, then ascending id.
pub fn rank_hits(hits: &mut [Hit]) {
    hits.sort_by(|a, b| {
        b.score
            .total_cmp(&a.score)
            .then_with(|| a.adapter_id.cmp(&b.adapter_id))
    });
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    (dot / (na * nb)).clamp(-1.0, 1.0)
}

pub fn build_index(pool: &[LoraAdapter], params: &EncoderParams) -> Result<RetrievalIndex> {
    let mut index = RetrievalIndex::empty(params.out_dim(), encoder_fingerprint(params));
    index.append(pool, params)?;
    Ok(index)
}

impl RetrievalIndex {
    pub fn empty(out_dim: usize, fingerprint: String) -> Self {
        Self {
            out_dim,
            ids: Vec::new(),
            rows: Vec::new(),
            fingerprint,
        }
    }

    /// Builds an index from precomputed embeddings.
    pub fn from_embeddings(
        ids: Vec<String>,
        embeddings: &[Vec<f64>],
        fingerprint: String,
    ) -> Result<Self> {
        let out_dim = embeddings
            .first()
            .map(Vec::len)
            .ok_or_else(|| Error::arg("no embeddings"))?;
        let mut index = Self::empty(out_dim, fingerprint);
        for (id, e) in ids.into_iter().zip(embeddings) {
            index.push(id, e)?;
        }
        if index.len() != embeddings.len() {
            return Err(Error::arg("id and embedding counts differ"));
        }
        Ok(index)
    }

    fn push(&mut self, id: String, e: &[f64]) -> Result<()> {
        if e.len() != self.out_dim {
            return Err(Error::arg(format!(
                "embedding dim {} != index dim {}",
                e.len(),
                self.out_dim
            )));
        }
        if self.ids.contains(&id) {
            return Err(Error::arg(format!("adapter {id} is already indexed")));
        }
        self.ids.push(id);
        self.rows.extend(e.iter().map(|&x| x as f32 as f64));
        Ok(())
    }

    /// Encodes and inserts new adapters without touching existing rows.
    pub fn append(&mut self, adapters: &[LoraAdapter], params: &EncoderParams) -> Result<()> {
        if encoder_fingerprint(params) != self.fingerprint {
            return Err(Error::arg(
                "encoder does not match the one this index was built with",
            ));
        }
        let embeddings = encode_pool(adapters, params)?;
        let mut fresh = BTreeSet::new();
        for a in adapters {
            if self.ids.contains(&a.adapter_id) || !fresh.insert(a.adapter_id.as_str()) {
                return Err(Error::arg(format!(
                    "adapter {} is already indexed",
                    a.adapter_id
                )));
            }
        }
        for (a, e) in adapters.iter().zip(embeddings) {
            self.push(a.adapter_id.clone(), e.as_slice())?;
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn out_dim(&self) -> usize {
        self.out_dim
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn fingerprint(&self) -> &str {
        &self.fingerprint
    }

    pub fn embedding(&self, i: usize) -> &[f64] {
        &self.rows[i * self.out_dim..(i + 1) * self.out_dim]
    }

    /// Exact cosine top-k; ties break by adapter id.
    pub fn query_topk(&self, query: &[f64], k: usize) -> Result<Vec<Hit>> {
        if k == 0 || k > self.len() {
            return Err(Error::arg(format!("k = {k} outside 1..={}", self.len())));
        }
        if query.len() != self.out_dim {
            return Err(Error::arg(format!(
                "query dim {} != index dim {}",
                query.len(),
                self.out_dim
            )));
        }
        let mut hits: Vec<Hit> = self
            .ids
            .iter()
            .enumerate()
            .map(|(i, id)| Hit {
                adapter_id: id.clone(),
                score: cosine(self.embedding(i), query),
            })
            .collect();
        rank_hits(&mut hits);
        hits.truncate(k);
        Ok(hits)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let header = IndexHeader {
            out_dim: self.out_dim,
            count: self.len(),
            ids: self.ids.clone(),
            encoder_fingerprint: self.fingerprint.clone(),
        };
        let json = serde_json::to_vec(&header).expect("serializable header");
        let payload: Vec<f32> = self.rows.iter().map(|&x| x as f32).collect();
        write_container(INDEX_MAGIC, &json, &payload)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let (manifest, data) = read_container(bytes, INDEX_MAGIC)?;
        let h: IndexHeader =
            serde_json::from_slice(manifest).map_err(|e| FormatError::Manifest(e.to_string()))?;
        if h.count != h.ids.len() || h.out_dim == 0 {
            return Err(FormatError::Manifest("count/ids/out_dim disagree".into()).into());
        }
        let expected = 4 * h.count * h.out_dim;
        if data.len() < expected {
            return Err(FormatError::Truncated {
                needed: expected as u64,
                available: data.len() as u64,
            }
            .into());
        }
        if data.len() != expected {
            return Err(FormatError::LengthMismatch(format!(
                "{} trailing bytes",
                data.len() - expected
            ))
            .into());
        }
        let mut index = Self::empty(h.out_dim, h.encoder_fingerprint);
        let vals = crate::container::f32s_from_le(data);
        for (i, id) in h.ids.into_iter().enumerate() {
            let row: Vec<f64> = vals[i * h.out_dim..(i + 1) * h.out_dim]
                .iter()
                .map(|&x| x as f64)
                .collect();
            index
                .push(id, &row)
                .map_err(|e| FormatError::Manifest(e.to_string()))?;
        }
        Ok(index)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Heatmap {
    pub ids: Vec<String>,
    /// Pairwise cosine similarities.
    pub matrix: Tensor,
    /// Mean off-diagonal similarity within groups; NaN when no group has two members.
    pub intra_mean: f64,
    /// Mean similarity across groups; NaN when there is only one group.
    pub inter_mean: f64,
}

/// Pairwise similarities and intra-/inter-group means. `grouping` maps every
/// indexed id to its group.
pub fn similarity_heatmap(
    index: &RetrievalIndex,
    grouping: &BTreeMap<String, String>,
) -> Result<Heatmap> {
    if index.is_empty() {
        return Err(Error::arg("heatmap of an empty index"));
    }
    if grouping.len() != index.len() || index.ids.iter().any(|id| !grouping.contains_key(id)) {
        return Err(Error::arg("grouping does not partition the index ids"));
    }
    let n = index.len();
    let mut m = Tensor::zeros(&[n, n]);
    let (mut intra, mut n_intra, mut inter, mut n_inter) = (0.0, 0usize, 0.0, 0usize);
    for i in 0..n {
        for j in 0..n {
            let s = cosine(index.embedding(i), index.embedding(j));
            m.set(i, j, s);
            if i == j {
                continue;
            }
            if grouping[&index.ids[i]] == grouping[&index.ids[j]] {
                intra += s;
                n_intra += 1;
            } else {
                inter += s;
                n_inter += 1;
            }
        }
    }
    let mean = |s: f64, c: usize| if c == 0 { f64::NAN } else { s / c as f64 };
    Ok(Heatmap {
        ids: index.ids.clone(),
        matrix: m,
        intra_mean: mean(intra, n_intra),
        inter_mean: mean(inter, n_inter),
    })
}
