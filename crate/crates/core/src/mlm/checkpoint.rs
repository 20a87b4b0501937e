//! Binary checkpoint format.
//!
//! ```text
//! "CSSR"                      4 bytes
//! format version              u32 little-endian
//! metadata length             u64 little-endian
//! metadata                    UTF-8 JSON: config, vocabulary, tensor manifest
//! tensor data                 f32 little-endian, manifest order
//! ```

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{ModelConfig, ModelParams};
use crate::error::{Error, Result};
use crate::tokenizer::Vocab;

pub const MAGIC: &[u8; 4] = b"CSSR";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    /// Offset in f32 elements from the start of the tensor data.
    offset: usize,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Metadata {
    config: ModelConfig,
    vocab: Vec<String>,
    tensors: Vec<TensorEntry>,
}

/// A model together with the vocabulary it was trained against.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub params: ModelParams<f32>,
    pub vocab: Vocab,
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let params = &self.params;
        if params.config.vocab_size != self.vocab.len() {
            return Err(Error::Checkpoint(format!(
                "model vocab size {} != vocabulary length {}",
                params.config.vocab_size,
                self.vocab.len()
            )));
        }
        let mut tensors = Vec::new();
        let mut offset = 0;
        for (name, t) in params.named_tensors() {
            tensors.push(TensorEntry {
                name,
                shape: t.shape.clone(),
                offset,
            });
            offset += t.len();
        }
        let meta = Metadata {
            config: params.config.clone(),
            vocab: self.vocab.tokens().to_vec(),
            tensors,
        };
        let meta = serde_json::to_vec(&meta).map_err(|e| Error::Checkpoint(e.to_string()))?;

        let mut out = Vec::with_capacity(16 + meta.len() + 4 * offset);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(meta.len() as u64).to_le_bytes());
        out.extend_from_slice(&meta);
        for (_, t) in params.named_tensors() {
            for x in &t.data {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 4 || &bytes[..4] != MAGIC {
            return Err(Error::BadMagic);
        }
        if bytes.len() < 16 {
            return Err(Error::TruncatedHeader);
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
        if version != FORMAT_VERSION {
            return Err(Error::Version {
                found: version,
                expected: FORMAT_VERSION,
            });
        }
        let meta_len = u64::from_le_bytes(bytes[8..16].try_into().unwrap());
        let meta_end = usize::try_from(meta_len)
            .ok()
            .and_then(|n| n.checked_add(16))
            .filter(|&end| end <= bytes.len())
            .ok_or(Error::TruncatedHeader)?;
        let meta: Metadata = serde_json::from_slice(&bytes[16..meta_end])
            .map_err(|e| Error::Checkpoint(format!("metadata: {e}")))?;

        let vocab = Vocab::from_tokens(meta.vocab)?;
        if vocab.len() != meta.config.vocab_size {
            return Err(Error::Checkpoint(format!(
                "config vocab size {} != vocabulary length {}",
                meta.config.vocab_size,
                vocab.len()
            )));
        }
        let mut params = ModelParams::<f32>::zeros(&meta.config)?;
        let data = &bytes[meta_end..];
        let mut expected_offset = 0;
        {
            let slots = params.named_tensors_mut();
            if slots.len() != meta.tensors.len() {
                return Err(Error::Checkpoint(format!(
                    "manifest lists {} tensors, config implies {}",
                    meta.tensors.len(),
                    slots.len()
                )));
            }
            for ((name, t), entry) in slots.into_iter().zip(&meta.tensors) {
                if entry.name != name || entry.shape != t.shape || entry.offset != expected_offset {
                    return Err(Error::Checkpoint(format!(
                        "manifest entry {:?} {:?}@{} does not match {name} {:?}@{expected_offset}",
                        entry.name, entry.shape, entry.offset, t.shape
                    )));
                }
                let start = 4 * entry.offset;
                let end = start + 4 * t.len();
                let raw = data.get(start..end).ok_or(Error::TruncatedTensorData)?;
                for (x, chunk) in t.data.iter_mut().zip(raw.chunks_exact(4)) {
                    *x = f32::from_le_bytes(chunk.try_into().unwrap());
                }
                expected_offset += t.len();
            }
        }
        if data.len() != 4 * expected_offset {
            return Err(Error::Checkpoint(format!(
                "{} trailing bytes after tensor data",
                data.len() - 4 * expected_offset
            )));
        }
        Ok(Checkpoint { params, vocab })
    }
}

pub fn save_checkpoint(
    path: impl AsRef<Path>,
    params: &ModelParams<f32>,
    vocab: &Vocab,
) -> Result<()> {
    let path = path.as_ref();
    let bytes = Checkpoint {
        params: params.clone(),
        vocab: vocab.clone(),
    }
    .to_bytes()?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Checkpoint::from_bytes(&bytes)
}
