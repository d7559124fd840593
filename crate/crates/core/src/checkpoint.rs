//! Versioned checkpoint container.
//!
//! Layout (little-endian): magic `DCK1`, `u32` format version, `u64` header
//! length, UTF-8 JSON header, then every tensor's values as `f32` in header
//! order.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use duet_autograd::{ParamStore, Tensor};
use ndarray::{ArrayD, IxDyn};
use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub const MAGIC: [u8; 4] = *b"DCK1";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Header {
    kind: String,
    config: Value,
    metadata: BTreeMap<String, Value>,
    tensors: Vec<TensorEntry>,
}

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    /// What the file holds, e.g. `vq` or `transformer`.
    pub kind: String,
    pub config: Value,
    pub metadata: BTreeMap<String, Value>,
    pub tensors: BTreeMap<String, Tensor>,
}

impl Checkpoint {
    pub fn new(kind: impl Into<String>, config: Value) -> Self {
        Self { kind: kind.into(), config, metadata: BTreeMap::new(), tensors: BTreeMap::new() }
    }

    pub fn put_params(&mut self, prefix: &str, store: &ParamStore) {
        for (name, t) in store.iter() {
            self.tensors.insert(format!("{prefix}{name}"), t.clone());
        }
    }

    pub fn take_params(&self, prefix: &str) -> ParamStore {
        let mut store = ParamStore::new();
        for (name, t) in &self.tensors {
            if let Some(rest) = name.strip_prefix(prefix) {
                store.insert(rest, t.clone());
            }
        }
        store
    }

    pub fn tensor(&self, name: &str) -> Result<&Tensor> {
        self.tensors.get(name).ok_or_else(|| Error::Checkpoint(format!("missing tensor `{name}`")))
    }

    pub fn meta<T: serde::de::DeserializeOwned>(&self, key: &str) -> Result<T> {
        let v = self.metadata.get(key).ok_or_else(|| Error::Checkpoint(format!("missing metadata `{key}`")))?;
        Ok(serde_json::from_value(v.clone())?)
    }

    pub fn set_meta(&mut self, key: &str, value: impl Serialize) -> Result<()> {
        self.metadata.insert(key.to_string(), serde_json::to_value(value)?);
        Ok(())
    }

    pub fn expect_kind(&self, kind: &str) -> Result<()> {
        if self.kind != kind {
            return Err(Error::Checkpoint(format!("expected a `{kind}` checkpoint, found `{}`", self.kind)));
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = Header {
            kind: self.kind.clone(),
            config: self.config.clone(),
            metadata: self.metadata.clone(),
            tensors: self.tensors.iter().map(|(n, t)| TensorEntry { name: n.clone(), shape: t.shape().to_vec() }).collect(),
        };
        let json = serde_json::to_vec(&header)?;
        let payload: usize = self.tensors.values().map(|t| t.len()).sum();
        let mut out = Vec::with_capacity(16 + json.len() + 4 * payload);
        out.extend_from_slice(&MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for t in self.tensors.values() {
            for v in t.iter() {
                let v = *v as f32;
                if !v.is_finite() {
                    return Err(Error::NonFinite("checkpoint tensor".into()));
                }
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 4 {
            return Err(Error::Truncated { needed: 4, found: bytes.len() });
        }
        let found: [u8; 4] = bytes[..4].try_into().unwrap();
        if found != MAGIC {
            return Err(Error::BadMagic { expected: MAGIC, found });
        }
        if bytes.len() < 16 {
            return Err(Error::Truncated { needed: 16, found: bytes.len() });
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
        if version != FORMAT_VERSION {
            return Err(Error::Checkpoint(format!("unsupported format version {version}")));
        }
        let header_len = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
        let body = 16usize.checked_add(header_len).filter(|&e| e <= bytes.len());
        let Some(body) = body else {
            return Err(Error::Truncated { needed: 16 + header_len, found: bytes.len() });
        };
        let header: Header = serde_json::from_slice(&bytes[16..body])?;
        let mut offset = body;
        let mut tensors = BTreeMap::new();
        for entry in header.tensors {
            let count: usize = entry.shape.iter().product();
            let end = offset + 4 * count;
            if end > bytes.len() {
                return Err(Error::Truncated { needed: end, found: bytes.len() });
            }
            let values: Vec<f64> = bytes[offset..end]
                .chunks_exact(4)
                .map(|c| f64::from(f32::from_le_bytes(c.try_into().unwrap())))
                .collect();
            offset = end;
            let t = ArrayD::from_shape_vec(IxDyn(&entry.shape), values).expect("length checked");
            tensors.insert(entry.name, t);
        }
        if offset != bytes.len() {
            return Err(Error::Checkpoint(format!("{} trailing bytes", bytes.len() - offset)));
        }
        Ok(Self { kind: header.kind, config: header.config, metadata: header.metadata, tensors })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}

/// Hex SHA-256 of a file, used to pair checkpoints.
pub fn file_sha256(path: impl AsRef<Path>) -> Result<String> {
    Ok(hex::encode(Sha256::digest(fs::read(path)?)))
}

pub fn bytes_sha256(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}
