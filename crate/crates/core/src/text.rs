//! Condition vectors from text.
//!
//! The built-in encoder hashes each lowercase word to one signed axis of a
//! 512-wide space, sums and L2-normalizes. Word order is ignored. Vectors
//! from a pretrained encoder can be plugged in through [`ExternalEmbeddings`].

use std::collections::BTreeMap;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{invalid, Error, Result};

pub const HASH_DIM: usize = 512;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TextEmbedding {
    pub vector: Vec<f64>,
    pub is_null: bool,
}

impl TextEmbedding {
    pub fn dim(&self) -> usize {
        self.vector.len()
    }
}

/// Text vectors produced elsewhere, keyed by the exact string.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ExternalEmbeddings {
    pub dim: usize,
    pub vectors: BTreeMap<String, Vec<f64>>,
}

impl ExternalEmbeddings {
    /// Reads a JSON object mapping text to a vector of numbers.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let raw = std::fs::read(path.as_ref())?;
        let vectors: BTreeMap<String, Vec<f64>> = serde_json::from_slice(&raw)?;
        let dim = vectors.values().next().map_or(0, Vec::len);
        if dim == 0 {
            return Err(invalid("external embedding file holds no vectors"));
        }
        if let Some((k, v)) = vectors.iter().find(|(_, v)| v.len() != dim || v.iter().any(|x| !x.is_finite())) {
            return Err(Error::DimensionMismatch(format!("embedding for {k:?}: {} entries (expected {dim} finite)", v.len())));
        }
        Ok(Self { dim, vectors })
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub enum TextBackend {
    #[default]
    Hash,
    External(ExternalEmbeddings),
}

impl TextBackend {
    pub fn dim(&self) -> usize {
        match self {
            TextBackend::Hash => HASH_DIM,
            TextBackend::External(e) => e.dim,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            TextBackend::Hash => "hash",
            TextBackend::External(_) => "external",
        }
    }
}

/// Lowercased alphanumeric runs.
pub fn tokenize(text: &str) -> Vec<String> {
    text.split(|c: char| !c.is_alphanumeric()).filter(|w| !w.is_empty()).map(str::to_lowercase).collect()
}

fn hashed_axis(word: &str) -> (usize, f64) {
    let digest = Sha256::digest(word.as_bytes());
    let idx = u32::from_le_bytes([digest[0], digest[1], digest[2], digest[3]]) as usize % HASH_DIM;
    let sign = if digest[4] & 1 == 0 { 1.0 } else { -1.0 };
    (idx, sign)
}

pub fn encode_text(text: &str, backend: &TextBackend) -> Result<TextEmbedding> {
    if text.trim().is_empty() {
        return Err(invalid("text must not be empty"));
    }
    match backend {
        TextBackend::Hash => {
            let words = tokenize(text);
            let mut v = vec![0.0; HASH_DIM];
            for w in &words {
                let (i, s) = hashed_axis(w);
                v[i] += s;
            }
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm == 0.0 {
                return Err(invalid(format!("text {text:?} has no words or its words cancel out")));
            }
            v.iter_mut().for_each(|x| *x /= norm);
            Ok(TextEmbedding { vector: v, is_null: false })
        }
        TextBackend::External(ext) => ext
            .vectors
            .get(text)
            .map(|v| TextEmbedding { vector: v.clone(), is_null: false })
            .ok_or_else(|| invalid(format!("no external embedding for {text:?}"))),
    }
}

/// Training-time condition drop: `true` means use the null embedding.
pub fn drop_condition<R: Rng + ?Sized>(p: f64, rng: &mut R) -> bool {
    rng.random_bool(p.clamp(0.0, 1.0))
}
