//! Binary checkpoint container.
//!
//! ```text
//! "MTRMCKPT" | u32 version | u64 header length | JSON header | f32 LE tensor data
//! ```
//!
//! The header records the model config, the vocabulary hash, a directory of
//! named tensors (shape and element offset) and free-form metadata.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{ModelConfig, ModelError, ModelParams};
use crate::fsutil::atomic_write;

pub const MAGIC: &[u8; 8] = b"MTRMCKPT";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct TensorHeader {
    name: String,
    shape: Vec<usize>,
    offset: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Header {
    config: ModelConfig,
    vocab_hash: String,
    tensors: Vec<TensorHeader>,
    #[serde(default)]
    meta: serde_json::Value,
}

/// A named tensor stored alongside the parameters (optimizer moments etc.).
#[derive(Debug, Clone, PartialEq)]
pub struct ExtraTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub params: ModelParams<f32>,
    pub vocab_hash: String,
    pub extras: Vec<ExtraTensor>,
    pub meta: serde_json::Value,
}

fn corrupt(msg: impl Into<String>) -> ModelError {
    ModelError::Checkpoint(msg.into())
}

impl Checkpoint {
    pub fn new(params: ModelParams<f32>, vocab_hash: impl Into<String>) -> Self {
        Self { params, vocab_hash: vocab_hash.into(), extras: Vec::new(), meta: serde_json::Value::Null }
    }

    pub fn extra(&self, name: &str) -> Option<&ExtraTensor> {
        self.extras.iter().find(|e| e.name == name)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut tensors = Vec::new();
        let mut offset = 0;
        for e in &self.params.layout.entries {
            tensors.push(TensorHeader { name: e.name.clone(), shape: e.shape.clone(), offset });
            offset += e.range.len();
        }
        for e in &self.extras {
            tensors.push(TensorHeader { name: e.name.clone(), shape: e.shape.clone(), offset });
            offset += e.data.len();
        }
        let header = Header {
            config: self.params.config.clone(),
            vocab_hash: self.vocab_hash.clone(),
            tensors,
            meta: self.meta.clone(),
        };
        let json = serde_json::to_vec(&header).expect("header serializes");
        let mut out = Vec::with_capacity(20 + json.len() + offset * 4);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for e in &self.params.layout.entries {
            for v in &self.params.data[e.range.clone()] {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        for e in &self.extras {
            for v in &e.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    /// Parses and validates shapes against the stored config. When
    /// `expected_vocab` is given, the stored vocabulary hash must match it.
    pub fn from_bytes(bytes: &[u8], expected_vocab: Option<&str>) -> Result<Self, ModelError> {
        if bytes.len() < 20 || &bytes[..8] != MAGIC {
            return Err(corrupt("not a checkpoint file"));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
        if version != VERSION {
            return Err(corrupt(format!("unsupported version {version}")));
        }
        let hlen = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
        let body = bytes.get(20..).ok_or_else(|| corrupt("truncated"))?;
        if hlen > body.len() {
            return Err(corrupt("truncated header"));
        }
        let header: Header = serde_json::from_slice(&body[..hlen]).map_err(|e| corrupt(format!("header: {e}")))?;
        if let Some(want) = expected_vocab {
            if want != header.vocab_hash {
                return Err(ModelError::VocabMismatch { expected: want.to_string(), found: header.vocab_hash });
            }
        }
        let data = &body[hlen..];
        if data.len() % 4 != 0 {
            return Err(corrupt("tensor data not a whole number of f32 values"));
        }
        let floats: Vec<f32> =
            data.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes"))).collect();
        let mut params = ModelParams::<f32>::zeros(&header.config)?;
        let mut extras = Vec::new();
        let mut seen = vec![false; params.layout.entries.len()];
        for t in &header.tensors {
            let n: usize = t.shape.iter().product();
            let src = floats.get(t.offset..t.offset + n).ok_or_else(|| corrupt(format!("tensor {} out of bounds", t.name)))?;
            match params.layout.entries.iter().position(|e| e.name == t.name) {
                Some(i) => {
                    let e = &params.layout.entries[i];
                    if e.shape != t.shape {
                        return Err(ModelError::ShapeMismatch {
                            name: t.name.clone(),
                            expected: e.shape.clone(),
                            found: t.shape.clone(),
                        });
                    }
                    let r = e.range.clone();
                    params.data[r].copy_from_slice(src);
                    seen[i] = true;
                }
                None => extras.push(ExtraTensor { name: t.name.clone(), shape: t.shape.clone(), data: src.to_vec() }),
            }
        }
        if let Some(i) = seen.iter().position(|s| !s) {
            return Err(corrupt(format!("missing tensor {}", params.layout.entries[i].name)));
        }
        if !params.is_finite() {
            return Err(ModelError::NonFinite);
        }
        Ok(Self { params, vocab_hash: header.vocab_hash, extras, meta: header.meta })
    }

    pub fn save(&self, path: &Path) -> Result<(), ModelError> {
        atomic_write(path, &self.to_bytes()).map_err(|e| ModelError::Io(e.to_string()))
    }

    pub fn load(path: &Path, expected_vocab: Option<&str>) -> Result<Self, ModelError> {
        let bytes = std::fs::read(path).map_err(|e| ModelError::Io(format!("{}: {e}", path.display())))?;
        Self::from_bytes(&bytes, expected_vocab)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn sample() -> Checkpoint {
        let mut cfg = ModelConfig::tiny(40);
        cfg.n_layers = 1;
        cfg.d_emb = 8;
        cfg.n_heads = 2;
        cfg.d_ffn_hidden = 12;
        let p = ModelParams::init(&cfg, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        let mut c = Checkpoint::new(p, "abc");
        c.extras.push(ExtraTensor { name: "adam.m.head".into(), shape: vec![2, 2], data: vec![1.0, 2.0, 3.0, 4.0] });
        c.meta = serde_json::json!({"epoch": 3});
        c
    }

    #[test]
    fn round_trip() {
        let c = sample();
        let back = Checkpoint::from_bytes(&c.to_bytes(), Some("abc")).unwrap();
        assert_eq!(back, c);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        c.save(&path).unwrap();
        assert_eq!(Checkpoint::load(&path, None).unwrap(), c);
    }

    #[test]
    fn rejects_mismatches() {
        let c = sample();
        let bytes = c.to_bytes();
        assert!(matches!(Checkpoint::from_bytes(&bytes, Some("xyz")), Err(ModelError::VocabMismatch { .. })));
        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 4], None).is_err());
        assert!(Checkpoint::from_bytes(b"garbage", None).is_err());
        let mut bad = bytes.clone();
        bad[8] = 9;
        assert!(Checkpoint::from_bytes(&bad, None).is_err());
    }
}
