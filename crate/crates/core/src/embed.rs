//! Sentence embeddings consumed by the gates and the metrics.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::math::{fnv1a, Matrix};
use crate::Result;

/// Identity of an embedder configuration. Equal fingerprints promise equal
/// vectors for equal inputs.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EmbedderFingerprint {
    pub name: String,
    pub dim: usize,
    pub config_hash: String,
}

impl core::fmt::Display for EmbedderFingerprint {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        write!(f, "{}/{}/{}", self.name, self.dim, self.config_hash)
    }
}

pub trait Embedder {
    fn fingerprint(&self) -> EmbedderFingerprint;

    fn dim(&self) -> usize;

    /// Unit-norm vector for non-empty text; the zero vector for `""`.
    fn embed(&self, text: &str) -> Result<Vec<f64>>;

    /// Row `i` equals `embed(texts[i])`.
    fn embed_batch(&self, texts: &[&str]) -> Result<Matrix> {
        let mut m = Matrix::zeros(texts.len(), self.dim());
        for (i, t) in texts.iter().enumerate() {
            let v = self.embed(t).map_err(|e| e.at_index(i))?;
            m.row_mut(i).copy_from_slice(&v);
        }
        Ok(m)
    }
}

impl<E: Embedder + ?Sized> Embedder for &E {
    fn fingerprint(&self) -> EmbedderFingerprint {
        (**self).fingerprint()
    }
    fn dim(&self) -> usize {
        (**self).dim()
    }
    fn embed(&self, text: &str) -> Result<Vec<f64>> {
        (**self).embed(text)
    }
    fn embed_batch(&self, texts: &[&str]) -> Result<Matrix> {
        (**self).embed_batch(texts)
    }
}

pub fn embed_strings<E: Embedder + ?Sized>(embedder: &E, texts: &[String]) -> Result<Matrix> {
    let refs: Vec<&str> = texts.iter().map(String::as_str).collect();
    embedder.embed_batch(&refs)
}

/// Signed feature hashing of character n-grams followed by L2 normalization.
///
/// Each n-gram (as UTF-8 bytes) is hashed with FNV-1a; the low bit picks the
/// sign and the remaining bits pick the bucket. Texts shorter than `n`
/// characters contribute a single gram made of the whole text.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct HashingEmbedder {
    dim: usize,
    n: usize,
}

impl Default for HashingEmbedder {
    fn default() -> Self {
        HashingEmbedder { dim: 256, n: 3 }
    }
}

impl HashingEmbedder {
    pub fn new(dim: usize, n: usize) -> Self {
        assert!(dim > 0 && n > 0);
        HashingEmbedder { dim, n }
    }

    /// `(bucket, sign)` for one gram.
    pub fn bucket(&self, gram: &str) -> (usize, f64) {
        let h = fnv1a(gram.as_bytes());
        let sign = if h & 1 == 0 { 1.0 } else { -1.0 };
        (((h >> 1) % self.dim as u64) as usize, sign)
    }

    /// The n-grams of `text`, in order.
    pub fn grams<'a>(&self, text: &'a str) -> Vec<&'a str> {
        let bounds: Vec<usize> = text
            .char_indices()
            .map(|(i, _)| i)
            .chain(core::iter::once(text.len()))
            .collect();
        let chars = bounds.len() - 1;
        if chars == 0 {
            return Vec::new();
        }
        if chars < self.n {
            return vec![text];
        }
        (0..=chars - self.n)
            .map(|s| &text[bounds[s]..bounds[s + self.n]])
            .collect()
    }
}

impl Embedder for HashingEmbedder {
    fn fingerprint(&self) -> EmbedderFingerprint {
        let config = format!("char-ngram-hash|n={}|dim={}|fnv1a-signed", self.n, self.dim);
        EmbedderFingerprint {
            name: format!("hashing-char{}", self.n),
            dim: self.dim,
            config_hash: format!("{:016x}", fnv1a(config.as_bytes())),
        }
    }

    fn dim(&self) -> usize {
        self.dim
    }

    fn embed(&self, text: &str) -> Result<Vec<f64>> {
        let mut v = vec![0.0; self.dim];
        for g in self.grams(text) {
            let (b, s) = self.bucket(g);
            v[b] += s;
        }
        let norm = crate::math::l2_norm(&v);
        if norm > 0.0 {
            for x in &mut v {
                *x /= norm;
            }
        } else if !text.is_empty() {
            log::debug!("hashed features cancelled to zero for a {}-byte text", text.len());
        }
        Ok(v)
    }
}
