//! `LIEQCKPT` model files: FP32 tensors indexed by a JSON header.

use std::collections::BTreeMap;
use std::path::Path;

use lieq_core::{ArchConfig, ModelCheckpoint, Tensor};
use serde::{Deserialize, Serialize};

use crate::container::{self, PayloadWriter};
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 8] = b"LIEQCKPT";
pub const VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    arch: ArchConfig,
    payload_len: u64,
    tensors: Vec<Entry>,
}

#[derive(Debug, Serialize, Deserialize)]
struct Entry {
    name: String,
    shape: Vec<usize>,
    /// Byte offset from the start of the payload.
    offset: u64,
}

/// Encodes raw tensors without validating them against `arch`.
pub fn encode_tensors(arch: &ArchConfig, tensors: &BTreeMap<String, Tensor>) -> Result<Vec<u8>> {
    let mut payload = PayloadWriter::default();
    let entries = tensors
        .iter()
        .map(|(name, t)| Entry { name: name.clone(), shape: t.shape().to_vec(), offset: payload.f32s(t.data()) })
        .collect();
    let payload = payload.finish();
    let header = Header { arch: *arch, payload_len: payload.len() as u64, tensors: entries };
    container::write(MAGIC, VERSION, &header, &payload)
}

pub fn encode_checkpoint(model: &ModelCheckpoint) -> Result<Vec<u8>> {
    encode_tensors(model.arch(), model.tensors())
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<ModelCheckpoint> {
    let (header, start) = container::read_header::<Header>(bytes, MAGIC, VERSION)?;
    // Truncation is reported against the first tensor that no longer fits.
    let available = bytes.len().saturating_sub(start + 4);
    for e in &header.tensors {
        let size = e.shape.iter().product::<usize>() * 4;
        if e.offset as usize + size > available.min(header.payload_len as usize) {
            return Err(lieq_core::Error::ShapeMismatch(e.name.clone()).into());
        }
    }
    let payload = container::checked_payload(bytes, start, header.payload_len as usize)?;
    let mut tensors = BTreeMap::new();
    for e in header.tensors {
        let size = e.shape.iter().product::<usize>() * 4;
        let data = container::f32s(container::slice(payload, e.offset, size, &e.name)?);
        let t = Tensor::new(e.shape, data).ok_or_else(|| lieq_core::Error::ShapeMismatch(e.name.clone()))?;
        if tensors.insert(e.name.clone(), t).is_some() {
            return Err(Error::Header(format!("tensor {} listed twice", e.name)));
        }
    }
    Ok(ModelCheckpoint::new(header.arch, tensors)?)
}

pub fn save_checkpoint(model: &ModelCheckpoint, path: &Path) -> Result<()> {
    container::write_file(path, &encode_checkpoint(model)?)
}

pub fn load_checkpoint(path: &Path) -> Result<ModelCheckpoint> {
    decode_checkpoint(&container::read_file(path)?)
}
