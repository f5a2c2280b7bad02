//! Binary checkpoint container.
//!
//! Layout:
//!
//! ```text
//! b"VTONCKPT"            8-byte magic
//! u64 (LE)               header length in bytes
//! header                 UTF-8 JSON: metadata, tensor index, payload digest
//! payload                named weight blobs, little-endian f32
//! ```
//!
//! The header's tensor index lists `(name, shape, offset, len)` per blob, with
//! offsets and lengths counted in f32 elements from the start of the payload.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 8] = b"VTONCKPT";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WeightTensor {
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

impl WeightTensor {
    pub fn numel(&self) -> usize {
        self.data.len()
    }
}

pub type Weights = BTreeMap<String, WeightTensor>;

pub fn parameter_count(weights: &Weights) -> usize {
    weights.values().map(WeightTensor::numel).sum()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMetadata {
    pub config_hash: String,
    pub module_version: String,
    pub seed: u64,
    /// Network family, e.g. `bodymap` or `regarsyn`.
    pub kind: String,
    /// Family-specific entries (person id, garment id, variant, architecture).
    #[serde(default)]
    pub extra: BTreeMap<String, serde_json::Value>,
}

impl CheckpointMetadata {
    pub fn new(kind: &str, config_hash: &str, seed: u64) -> Self {
        Self {
            config_hash: config_hash.to_owned(),
            module_version: env!("CARGO_PKG_VERSION").to_owned(),
            seed,
            kind: kind.to_owned(),
            extra: BTreeMap::new(),
        }
    }

    pub fn with(mut self, key: &str, value: impl Serialize) -> Self {
        self.extra
            .insert(key.to_owned(), serde_json::to_value(value).expect("metadata serializes"));
        self
    }

    pub fn get_str(&self, key: &str) -> Option<&str> {
        self.extra.get(key).and_then(|v| v.as_str())
    }
}

#[derive(Serialize, Deserialize)]
struct IndexEntry {
    name: String,
    shape: Vec<usize>,
    offset: usize,
    len: usize,
}

#[derive(Serialize, Deserialize)]
struct Header {
    format_version: u32,
    metadata: CheckpointMetadata,
    tensors: Vec<IndexEntry>,
    payload_sha256: String,
}

#[derive(Debug)]
pub struct LoadedCheckpoint {
    pub weights: Weights,
    pub metadata: CheckpointMetadata,
    /// Non-fatal findings, e.g. a config-hash mismatch.
    pub warnings: Vec<String>,
}

pub fn encode_checkpoint(weights: &Weights, metadata: &CheckpointMetadata) -> Result<Vec<u8>> {
    let mut payload = Vec::new();
    let mut tensors = Vec::with_capacity(weights.len());
    let mut offset = 0;
    for (name, w) in weights {
        if w.shape.iter().product::<usize>() != w.data.len() {
            return Err(Error::shape(format!(
                "weight `{name}` has shape {:?} but {} values",
                w.shape,
                w.data.len()
            )));
        }
        for v in &w.data {
            payload.extend_from_slice(&v.to_le_bytes());
        }
        tensors.push(IndexEntry { name: name.clone(), shape: w.shape.clone(), offset, len: w.data.len() });
        offset += w.data.len();
    }
    let header = Header {
        format_version: FORMAT_VERSION,
        metadata: metadata.clone(),
        tensors,
        payload_sha256: hex::encode(Sha256::digest(&payload)),
    };
    let header = serde_json::to_vec(&header)?;
    let mut out = Vec::with_capacity(16 + header.len() + payload.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(header.len() as u64).to_le_bytes());
    out.extend_from_slice(&header);
    out.extend_from_slice(&payload);
    Ok(out)
}

/// Decodes a checkpoint. A differing `expected_config_hash` produces a
/// warning, never a failure; any structural damage is an [`Error::Integrity`].
pub fn decode_checkpoint(bytes: &[u8], expected_config_hash: Option<&str>) -> Result<LoadedCheckpoint> {
    let integrity = |m: &str| Error::Integrity(m.to_owned());
    if bytes.len() < 16 || &bytes[..8] != MAGIC {
        return Err(integrity("missing checkpoint magic"));
    }
    let header_len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
    let header_end = 16usize
        .checked_add(header_len)
        .filter(|end| *end <= bytes.len())
        .ok_or_else(|| integrity("header extends past end of file"))?;
    let header: Header = serde_json::from_slice(&bytes[16..header_end])
        .map_err(|e| Error::Integrity(format!("unreadable header: {e}")))?;
    if header.format_version != FORMAT_VERSION {
        return Err(Error::Integrity(format!(
            "unsupported format version {}",
            header.format_version
        )));
    }
    let payload = &bytes[header_end..];
    let expected_len: usize = header.tensors.iter().map(|t| t.len * 4).sum();
    if payload.len() != expected_len {
        return Err(Error::Integrity(format!(
            "payload holds {} bytes, index describes {expected_len}",
            payload.len()
        )));
    }
    if hex::encode(Sha256::digest(payload)) != header.payload_sha256 {
        return Err(integrity("payload digest mismatch"));
    }
    let mut weights = Weights::new();
    for t in header.tensors {
        if t.shape.iter().product::<usize>() != t.len || (t.offset + t.len) * 4 > payload.len() {
            return Err(Error::Integrity(format!("bad index entry for `{}`", t.name)));
        }
        let data = payload[t.offset * 4..(t.offset + t.len) * 4]
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes")))
            .collect();
        weights.insert(t.name, WeightTensor { shape: t.shape, data });
    }
    let mut warnings = Vec::new();
    if let Some(expected) = expected_config_hash {
        if expected != header.metadata.config_hash {
            let w = format!(
                "config hash mismatch: checkpoint {}, current {expected}",
                header.metadata.config_hash
            );
            log::warn!("{w}");
            warnings.push(w);
        }
    }
    Ok(LoadedCheckpoint { weights, metadata: header.metadata, warnings })
}

pub fn save_checkpoint(path: impl AsRef<Path>, weights: &Weights, metadata: &CheckpointMetadata) -> Result<()> {
    std::fs::write(path, encode_checkpoint(weights, metadata)?)?;
    Ok(())
}

pub fn load_checkpoint(path: impl AsRef<Path>, expected_config_hash: Option<&str>) -> Result<LoadedCheckpoint> {
    decode_checkpoint(&std::fs::read(path)?, expected_config_hash)
}
