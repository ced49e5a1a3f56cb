//! Deterministic caption embedder.
//!
//! Stands in for a frozen pretrained text encoder: lowercased character
//! trigrams are hashed into a fixed number of buckets, the count vector is
//! projected by a seeded Gaussian matrix and the result is L2-normalised.
//! Callers that have real text embeddings can ingest them through
//! [`TextEmbedding::from_vec`] instead.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::SeededRng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TextConfig {
    pub dim: usize,
    pub buckets: usize,
    pub seed: u64,
}

impl Default for TextConfig {
    fn default() -> Self {
        Self {
            dim: 64,
            buckets: 4096,
            seed: 0x7e57,
        }
    }
}

/// Unit-norm caption embedding.
#[derive(Debug, Clone, PartialEq)]
pub struct TextEmbedding(Vec<f64>);

impl TextEmbedding {
    /// Normalises an externally supplied embedding.
    pub fn from_vec(v: Vec<f64>) -> Result<Self> {
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if v.is_empty() || !(n > 0.0) || !n.is_finite() {
            return Err(Error::arg(
                "text embedding must be a finite non-zero vector",
            ));
        }
        Ok(Self(v.into_iter().map(|x| x / n).collect()))
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn cosine(&self, other: &TextEmbedding) -> f64 {
        self.0.iter().zip(&other.0).map(|(a, b)| a * b).sum()
    }
}

pub struct TextEmbedder {
    config: TextConfig,
    /// `buckets × dim`, row-major.
    projection: Vec<f64>,
}

impl TextEmbedder {
    pub fn new(config: TextConfig) -> Result<Self> {
        if config.dim == 0 || config.buckets == 0 {
            return Err(Error::arg("text embedder needs positive dim and buckets"));
        }
        let mut rng = SeededRng::derive(config.seed, "text-projection");
        let projection = rng.normals(
            config.buckets * config.dim,
            1.0 / (config.dim as f64).sqrt(),
        );
        Ok(Self { config, projection })
    }

    pub fn config(&self) -> &TextConfig {
        &self.config
    }

    pub fn embed(&self, caption: &str) -> Result<TextEmbedding> {
        let counts = trigram_counts(caption, self.config.buckets)?;
        let dim = self.config.dim;
        let mut out = vec![0.0; dim];
        for (bucket, count) in counts {
            let row = &self.projection[bucket * dim..(bucket + 1) * dim];
            for (o, p) in out.iter_mut().zip(row) {
                *o += count as f64 * p;
            }
        }
        TextEmbedding::from_vec(out)
            .map_err(|_| Error::Numeric(format!("caption {caption:?} embeds to zero")))
    }

    /// Uses the precomputed vector when given, otherwise embeds the caption.
    pub fn embed_or_use(
        &self,
        caption: &str,
        precomputed: Option<&[f64]>,
    ) -> Result<TextEmbedding> {
        match precomputed {
            Some(v) if v.len() != self.config.dim => Err(Error::arg(format!(
                "precomputed embedding has dim {}, expected {}",
                v.len(),
                self.config.dim
            ))),
            Some(v) => TextEmbedding::from_vec(v.to_vec()),
            None => self.embed(caption),
        }
    }
}

/// One-shot convenience wrapper around [`TextEmbedder`].
pub fn embed_text(caption: &str, config: &TextConfig) -> Result<TextEmbedding> {
    TextEmbedder::new(*config)?.embed(caption)
}

/// Sorted `(bucket, count)` pairs of the caption's character trigrams.
fn trigram_counts(caption: &str, buckets: usize) -> Result<Vec<(usize, u32)>> {
    let norm = caption.trim().to_lowercase();
    if norm.is_empty() {
        return Err(Error::arg("caption is empty"));
    }
    let chars: Vec<char> = std::iter::once(' ')
        .chain(norm.chars())
        .chain(std::iter::once(' '))
        .collect();
    let mut counts = std::collections::BTreeMap::<usize, u32>::new();
    for w in chars.windows(3) {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for c in w {
            let mut buf = [0u8; 4];
            for b in c.encode_utf8(&mut buf).bytes() {
                h ^= b as u64;
                h = h.wrapping_mul(0x0000_0100_0000_01b3);
            }
        }
        *counts.entry((h % buckets as u64) as usize).or_default() += 1;
    }
    Ok(counts.into_iter().collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_and_unit_norm() {
        let e = TextEmbedder::new(TextConfig::default()).unwrap();
        let a = e.embed("Two Moons, tight").unwrap();
        let b = e.embed("two moons, tight").unwrap();
        assert_eq!(a, b);
        assert!((a.cosine(&a) - 1.0).abs() < 1e-12);
        let n: f64 = a.as_slice().iter().map(|x| x * x).sum();
        assert!((n - 1.0).abs() < 1e-12);
    }

    #[test]
    fn unrelated_captions_are_not_aligned() {
        let cfg = TextConfig {
            seed: 1,
            ..TextConfig::default()
        };
        let e = TextEmbedder::new(cfg).unwrap();
        let a = e.embed("a spiral galaxy of points").unwrap();
        let b = e.embed("checkerboard squares").unwrap();
        assert!(a.cosine(&b) < 0.9);
    }

    #[test]
    fn empty_caption_rejected() {
        assert!(embed_text("   ", &TextConfig::default()).is_err());
    }

    #[test]
    fn precomputed_embeddings_are_normalized() {
        let e = TextEmbedder::new(TextConfig {
            dim: 3,
            ..TextConfig::default()
        })
        .unwrap();
        let t = e.embed_or_use("ignored", Some(&[3.0, 0.0, 4.0])).unwrap();
        assert_eq!(t.as_slice(), &[0.6, 0.0, 0.8]);
        assert!(e.embed_or_use("x", Some(&[1.0])).is_err());
    }
}
