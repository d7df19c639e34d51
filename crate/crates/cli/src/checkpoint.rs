//! Binary checkpoint format.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic        8 bytes  "DTOCK001"
//! version      u32
//! meta_len     u32, then meta_len bytes of UTF-8 JSON
//! n_tensors    u32
//! per tensor:  name_len u32, name bytes, dtype u8 (1=f64, 2=f32),
//!              rank u32, rank x u64 dims, raw scalar payload
//! ```
//!
//! Tensors are written in name order, so equal parameters give equal files.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use dto_core::{DType, ModelConfig, ModelParams, Scalar, Tensor, Vocab};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

pub const MAGIC: &[u8; 8] = b"DTOCK001";
pub const VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("not a checkpoint: {0}")]
    Format(String),
    #[error("checkpoint version {found} is newer than supported version {supported}")]
    Version { found: u32, supported: u32 },
    #[error("checkpoint vocabulary hash {found} does not match corpus vocabulary {expected}")]
    Compatibility { expected: String, found: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Model(#[from] dto_core::Error),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Finetuned,
    Retrained,
    Unlearned,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointMeta {
    pub model: ModelConfig,
    pub vocab_sha256: String,
    pub corpus_seed: u64,
    pub stage: Stage,
}

impl CheckpointMeta {
    pub fn check_vocab(&self, vocab: &Vocab) -> Result<(), CheckpointError> {
        let expected = vocab_hash(vocab);
        if expected != self.vocab_sha256 {
            return Err(CheckpointError::Compatibility {
                expected,
                found: self.vocab_sha256.clone(),
            });
        }
        Ok(())
    }
}

/// Hex SHA-256 of the canonical vocabulary JSON.
pub fn vocab_hash(vocab: &Vocab) -> String {
    let json = vocab.to_json().expect("vocabulary serializes");
    hex(&Sha256::digest(json.as_bytes()))
}

/// Hex SHA-256 of arbitrary bytes.
pub fn sha256_hex(bytes: &[u8]) -> String {
    hex(&Sha256::digest(bytes))
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

pub fn encode<S: Scalar>(
    params: &ModelParams<S>,
    meta: &CheckpointMeta,
) -> Result<Vec<u8>, CheckpointError> {
    let mut out = Vec::with_capacity(params.num_parameters() * S::DTYPE.size_of() + 4096);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    let json = serde_json::to_vec(meta)?;
    out.extend_from_slice(&(json.len() as u32).to_le_bytes());
    out.extend_from_slice(&json);
    out.extend_from_slice(&(params.tensors().len() as u32).to_le_bytes());
    for (name, t) in params.tensors() {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(S::DTYPE.code());
        out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
        for &d in t.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for &x in t.data() {
            x.write_le(&mut out);
        }
    }
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8], CheckpointError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        match end {
            Some(end) => {
                let s = &self.bytes[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            None => Err(CheckpointError::Format(format!("truncated while reading {what}"))),
        }
    }

    fn u32(&mut self, what: &str) -> Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &str) -> Result<u64, CheckpointError> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }
}

pub fn decode<S: Scalar>(bytes: &[u8]) -> Result<(ModelParams<S>, CheckpointMeta), CheckpointError> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(8, "magic")? != MAGIC {
        return Err(CheckpointError::Format("bad magic".into()));
    }
    let version = r.u32("version")?;
    if version > VERSION {
        return Err(CheckpointError::Version {
            found: version,
            supported: VERSION,
        });
    }
    let meta_len = r.u32("metadata length")? as usize;
    let meta: CheckpointMeta = serde_json::from_slice(r.take(meta_len, "metadata")?)?;
    let count = r.u32("tensor count")?;
    let mut tensors = BTreeMap::new();
    for _ in 0..count {
        let name_len = r.u32("name length")? as usize;
        let name = std::str::from_utf8(r.take(name_len, "tensor name")?)
            .map_err(|_| CheckpointError::Format("tensor name is not UTF-8".into()))?
            .to_string();
        let code = r.take(1, "dtype")?[0];
        let dtype = DType::from_code(code)
            .ok_or_else(|| CheckpointError::Format(format!("unknown dtype code {code}")))?;
        if dtype != S::DTYPE {
            return Err(CheckpointError::Format(format!(
                "tensor {name} is {dtype:?}, expected {:?}",
                S::DTYPE
            )));
        }
        let rank = r.u32("rank")? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u64("dimension")? as usize);
        }
        let n: usize = shape.iter().product();
        let size = dtype.size_of();
        let payload = r.take(n * size, "tensor payload")?;
        let data: Vec<S> = payload.chunks_exact(size).map(S::read_le).collect();
        if tensors.insert(name.clone(), Tensor::new(shape, data)?).is_some() {
            return Err(CheckpointError::Format(format!("duplicate tensor {name}")));
        }
    }
    if r.pos != bytes.len() {
        return Err(CheckpointError::Format("trailing bytes after last tensor".into()));
    }
    let params = ModelParams::from_tensors(meta.model.clone(), tensors)?;
    Ok((params, meta))
}

pub fn save_checkpoint<S: Scalar>(
    params: &ModelParams<S>,
    meta: &CheckpointMeta,
    path: &Path,
) -> Result<(), CheckpointError> {
    fs::write(path, encode(params, meta)?)?;
    Ok(())
}

pub fn load_checkpoint<S: Scalar>(
    path: &Path,
) -> Result<(ModelParams<S>, CheckpointMeta), CheckpointError> {
    decode(&fs::read(path)?)
}

/// Loads a checkpoint and checks it was trained against `vocab`.
pub fn load_for_vocab<S: Scalar>(
    path: &Path,
    vocab: &Vocab,
) -> Result<(ModelParams<S>, CheckpointMeta), CheckpointError> {
    let (params, meta) = load_checkpoint(path)?;
    meta.check_vocab(vocab)?;
    Ok((params, meta))
}
