//! `DWN1` model files.
//!
//! ```text
//! "DWN1" | version: u32 LE | header length: u64 LE | header JSON | payload
//! ```
//!
//! The payload holds every tensor as little-endian `f64` in manifest order.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::ParamSet;
use crate::potts::{Model, ModelConfig};

pub const MAGIC: &[u8; 4] = b"DWN1";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub dtype: String,
    /// Byte offset into the payload.
    pub offset: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointHeader {
    pub model: ModelConfig,
    pub tensors: Vec<TensorEntry>,
    pub payload_bytes: usize,
    pub payload_crc32: u32,
}

pub fn encode_checkpoint(model: &Model) -> Result<Vec<u8>> {
    let flat = model.flatten();
    let mut payload = Vec::with_capacity(flat.len() * 8);
    for v in &flat {
        payload.extend_from_slice(&v.to_le_bytes());
    }
    let header = CheckpointHeader {
        model: model.config(),
        tensors: model
            .manifest()
            .into_iter()
            .map(|t| TensorEntry {
                name: t.name,
                shape: t.shape,
                dtype: "f64".into(),
                offset: t.offset * 8,
            })
            .collect(),
        payload_bytes: payload.len(),
        payload_crc32: crc32fast::hash(&payload),
    };
    let json = serde_json::to_vec(&header)?;
    let mut out = Vec::with_capacity(16 + json.len() + payload.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    out.extend_from_slice(&payload);
    Ok(out)
}

/// Splits a checkpoint into its parsed header and raw payload.
pub fn read_header(bytes: &[u8]) -> Result<(CheckpointHeader, &[u8])> {
    if bytes.len() < 16 || &bytes[..4] != MAGIC {
        return Err(Error::Checkpoint("not a DWN1 checkpoint (bad magic)".into()));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
    if version != VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported checkpoint version {version}, expected {VERSION}"
        )));
    }
    let len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
    let body = &bytes[16..];
    if body.len() < len {
        return Err(Error::Checkpoint(format!(
            "header claims {len} bytes but only {} follow",
            body.len()
        )));
    }
    let header: CheckpointHeader = serde_json::from_slice(&body[..len])
        .map_err(|e| Error::Checkpoint(format!("header JSON: {e}")))?;
    Ok((header, &body[len..]))
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<Model> {
    let (header, payload) = read_header(bytes)?;
    if payload.len() != header.payload_bytes {
        return Err(Error::Checkpoint(format!(
            "payload is {} bytes, header declares {}",
            payload.len(),
            header.payload_bytes
        )));
    }
    let crc = crc32fast::hash(payload);
    if crc != header.payload_crc32 {
        return Err(Error::Checkpoint(format!(
            "payload checksum mismatch: stored {:08x}, computed {crc:08x}",
            header.payload_crc32
        )));
    }
    let mut model = Model::zeros(&header.model)?;
    let expected = model.manifest();
    if expected.len() != header.tensors.len() {
        return Err(Error::Checkpoint(format!(
            "manifest lists {} tensors, the model config needs {}",
            header.tensors.len(),
            expected.len()
        )));
    }
    for (want, got) in expected.iter().zip(&header.tensors) {
        if want.name != got.name || want.shape != got.shape || want.offset * 8 != got.offset || got.dtype != "f64" {
            return Err(Error::Checkpoint(format!(
                "tensor {} ({:?} {} at {}) does not match the expected {} {:?}",
                got.name, got.shape, got.dtype, got.offset, want.name, want.shape
            )));
        }
    }
    if payload.len() != model.param_len() * 8 {
        return Err(Error::Checkpoint(format!(
            "payload holds {} bytes, the model needs {}",
            payload.len(),
            model.param_len() * 8
        )));
    }
    let flat: Vec<f64> = payload
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect();
    model.load_flat(&flat)?;
    Ok(model)
}

pub fn save_checkpoint(model: &Model, path: &Path) -> Result<()> {
    let bytes = encode_checkpoint(model)?;
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<Model> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes)
}
