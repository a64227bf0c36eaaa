//! `LIEQQNT\0` quantized-model files. Packed layer weights keep their
//! codes, FP32 scales and u8 zero-points in separate aligned sections;
//! passthrough weights, norms, embedding and lm_head are stored as FP32.

use std::path::Path;

use lieq_core::model::{norm_name, NormSlot, Proj};
use lieq_core::quant::{QuantLayer, PASSTHROUGH_BITS};
use lieq_core::{ArchConfig, BitPlan, QuantLinear, QuantModel, QuantTensor, Tensor};
use serde::{Deserialize, Serialize};

use crate::container::{self, PayloadWriter};
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 8] = b"LIEQQNT\0";
pub const VERSION: u32 = 1;
/// Width recorded for tensors that are never quantized.
pub const FP32_BITS: u8 = 32;

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
struct Section {
    offset: u64,
    len: u64,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(tag = "storage", rename_all = "snake_case")]
enum Storage {
    Packed { codes: Section, scales: Section, zero_points: Section },
    Dense { data: Section },
}

#[derive(Debug, Serialize, Deserialize)]
struct Entry {
    name: String,
    shape: Vec<usize>,
    bits: u8,
    #[serde(flatten)]
    storage: Storage,
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    arch: ArchConfig,
    group_size: usize,
    plan: BitPlan,
    source_checksum: u32,
    payload_len: u64,
    tensors: Vec<Entry>,
}

fn section(payload: &mut PayloadWriter, bytes: &[u8]) -> Section {
    Section { offset: payload.section(bytes), len: bytes.len() as u64 }
}

fn dense(payload: &mut PayloadWriter, name: String, t: &Tensor, bits: u8) -> Entry {
    let bytes: Vec<u8> = t.data().iter().flat_map(|v| v.to_le_bytes()).collect();
    Entry { name, shape: t.shape().to_vec(), bits, storage: Storage::Dense { data: section(payload, &bytes) } }
}

pub fn encode_quant(model: &QuantModel) -> Result<Vec<u8>> {
    model.validate()?;
    let mut payload = PayloadWriter::default();
    let mut tensors = vec![dense(&mut payload, "embedding".into(), &model.embedding, FP32_BITS)];
    for (l, layer) in model.layers.iter().enumerate() {
        tensors.push(dense(&mut payload, norm_name(l, NormSlot::Attn), &layer.attn_norm, FP32_BITS));
        for p in Proj::ALL {
            let name = p.tensor_name(l);
            tensors.push(match &layer.linears[p.index()] {
                QuantLinear::Dense(t) => dense(&mut payload, name, t, PASSTHROUGH_BITS),
                QuantLinear::Packed(q) => {
                    let scales: Vec<u8> = q.scales.iter().flat_map(|v| v.to_le_bytes()).collect();
                    Entry {
                        name,
                        shape: vec![q.rows, q.cols],
                        bits: q.bits,
                        storage: Storage::Packed {
                            codes: section(&mut payload, &q.codes),
                            scales: section(&mut payload, &scales),
                            zero_points: section(&mut payload, &q.zero_points),
                        },
                    }
                }
            });
        }
        tensors.push(dense(&mut payload, norm_name(l, NormSlot::Mlp), &layer.mlp_norm, FP32_BITS));
    }
    tensors.push(dense(&mut payload, "final_norm".into(), &model.final_norm, FP32_BITS));
    tensors.push(dense(&mut payload, "lm_head".into(), &model.lm_head, FP32_BITS));
    let payload = payload.finish();
    let header = Header {
        arch: model.arch,
        group_size: model.group_size,
        plan: model.plan.clone(),
        source_checksum: model.source_checksum,
        payload_len: payload.len() as u64,
        tensors,
    };
    container::write(MAGIC, VERSION, &header, &payload)
}

struct Reader<'a> {
    payload: &'a [u8],
    entries: std::collections::BTreeMap<String, Entry>,
}

impl Reader<'_> {
    fn take(&mut self, name: &str) -> Result<Entry> {
        self.entries.remove(name).ok_or_else(|| lieq_core::Error::MissingTensor(name.into()).into())
    }

    fn bytes(&self, s: Section, name: &str) -> Result<&[u8]> {
        container::slice(self.payload, s.offset, s.len as usize, name)
    }

    fn dense(&mut self, name: &str) -> Result<(Tensor, u8)> {
        let e = self.take(name)?;
        match e.storage {
            Storage::Dense { data } => {
                let t = Tensor::new(e.shape, container::f32s(self.bytes(data, name)?))
                    .ok_or_else(|| lieq_core::Error::ShapeMismatch(name.into()))?;
                if !t.is_finite() {
                    return Err(lieq_core::Error::NonFiniteWeight(name.into()).into());
                }
                Ok((t, e.bits))
            }
            Storage::Packed { .. } => Err(Error::Header(format!("{name} must be stored dense"))),
        }
    }

    fn fp32(&mut self, name: &str) -> Result<Tensor> {
        let (t, bits) = self.dense(name)?;
        if bits != FP32_BITS {
            return Err(Error::Header(format!("{name} recorded at {bits} bits")));
        }
        Ok(t)
    }

    fn linear(&mut self, name: &str, group_size: usize) -> Result<QuantLinear> {
        let e = self.take(name)?;
        match e.storage {
            Storage::Dense { .. } => {
                self.entries.insert(name.into(), e);
                let (t, bits) = self.dense(name)?;
                if bits != PASSTHROUGH_BITS {
                    return Err(Error::Header(format!("{name}: dense storage recorded at {bits} bits")));
                }
                Ok(QuantLinear::Dense(t))
            }
            Storage::Packed { codes, scales, zero_points } => {
                let [rows, cols] = e.shape[..] else {
                    return Err(lieq_core::Error::ShapeMismatch(name.into()).into());
                };
                let q = QuantTensor {
                    rows,
                    cols,
                    bits: e.bits,
                    group_size,
                    codes: self.bytes(codes, name)?.to_vec(),
                    scales: container::f32s(self.bytes(scales, name)?),
                    zero_points: self.bytes(zero_points, name)?.to_vec(),
                };
                q.validate()?;
                Ok(QuantLinear::Packed(q))
            }
        }
    }
}

pub fn decode_quant(bytes: &[u8]) -> Result<QuantModel> {
    let (header, start) = container::read_header::<Header>(bytes, MAGIC, VERSION)?;
    header.arch.validate()?;
    let payload = container::checked_payload(bytes, start, header.payload_len as usize)?;
    let mut entries = std::collections::BTreeMap::new();
    for e in header.tensors {
        let name = e.name.clone();
        if entries.insert(name.clone(), e).is_some() {
            return Err(Error::Header(format!("tensor {name} listed twice")));
        }
    }
    let mut r = Reader { payload, entries };
    let embedding = r.fp32("embedding")?;
    let mut layers = Vec::with_capacity(header.arch.n_layers);
    for l in 0..header.arch.n_layers {
        let attn_norm = r.fp32(&norm_name(l, NormSlot::Attn))?;
        let mlp_norm = r.fp32(&norm_name(l, NormSlot::Mlp))?;
        let linears =
            Proj::ALL.iter().map(|p| r.linear(&p.tensor_name(l), header.group_size)).collect::<Result<Vec<_>>>()?;
        let bits = header.plan.bits.get(l).copied().unwrap_or(0);
        if let Some(lin) = linears.iter().find(|lin| lin.bits() != bits) {
            return Err(Error::Header(format!("layer {l} stores {}-bit weights but the plan says {bits}", lin.bits())));
        }
        layers.push(QuantLayer { bits, attn_norm, mlp_norm, linears });
    }
    let final_norm = r.fp32("final_norm")?;
    let lm_head = r.fp32("lm_head")?;
    if let Some(name) = r.entries.keys().next() {
        return Err(lieq_core::Error::UnexpectedTensor(name.clone()).into());
    }
    let model = QuantModel {
        arch: header.arch,
        group_size: header.group_size,
        plan: header.plan,
        source_checksum: header.source_checksum,
        embedding,
        final_norm,
        lm_head,
        layers,
    };
    model.validate()?;
    Ok(model)
}

pub fn save_quant(model: &QuantModel, path: &Path) -> Result<()> {
    container::write_file(path, &encode_quant(model)?)
}

pub fn load_quant(path: &Path) -> Result<QuantModel> {
    decode_quant(&container::read_file(path)?)
}

/// Group size recorded in a file header, without decoding the payload.
pub fn peek_group_size(bytes: &[u8]) -> Result<usize> {
    Ok(container::read_header::<Header>(bytes, MAGIC, VERSION)?.0.group_size)
}
