//! Group-wise asymmetric round-to-nearest quantization, contiguous LSB-first
//! code packing, and the quantized model with a fused dequantize-matmul.
//!
//! Layout of a [`QuantTensor`]: codes of all elements in row-major order form
//! one bitstream, code `i` in bits `[i*b, (i+1)*b)`, stream bit `j` in byte
//! `j / 8` at bit `j % 8`. Each row is split into runs of `group_size`
//! columns (the last run may be shorter); every run has one FP32 scale and
//! one u8 zero-point, stored row-major.

use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::allocator::BitPlan;
use crate::error::{Error, Result};
use crate::forward::{dot_f32_f64, DecoderWeights, LinearMap};
use crate::model::{ArchConfig, ModelCheckpoint, NormSlot, Proj};
use crate::tensor::Tensor;

/// Widths that go through the packed integer path.
pub const PACKED_BITS: [u8; 4] = [2, 3, 4, 8];
/// Plan width meaning "keep FP32 weights".
pub const PASSTHROUGH_BITS: u8 = 16;
pub const DEFAULT_GROUP_SIZE: usize = 64;

fn check_packed_bits(bits: u8) -> Result<()> {
    if PACKED_BITS.contains(&bits) {
        Ok(())
    } else {
        Err(Error::UnsupportedBitWidth(bits))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuantGroup {
    pub bits: u8,
    pub codes: Vec<u8>,
    pub scale: f32,
    pub zero_point: u8,
}

/// Group parameters `(scale, zero_point)` for the values' range.
///
/// The range is widened to include 0 so the zero-point is a valid code; for
/// groups that straddle zero this is exactly `(max - min) / (2^b - 1)`. The
/// FP32 scale is rounded up when needed so the code range covers the group.
fn group_params(values: &[f32], bits: u8) -> (f32, u8) {
    let levels = ((1u32 << bits) - 1) as f64;
    let (mut lo, mut hi) = (0.0f64, 0.0f64);
    for &v in values {
        lo = lo.min(v as f64);
        hi = hi.max(v as f64);
    }
    if hi == lo {
        return (1.0, 0);
    }
    let range = hi - lo;
    let mut scale = (range / levels) as f32;
    while (scale as f64) * levels < range {
        scale = f32::from_bits(scale.to_bits() + 1);
    }
    let z = libm::round(-lo / scale as f64).clamp(0.0, levels);
    (scale, z as u8)
}

#[inline]
fn quantize_value(v: f32, scale: f32, zero_point: u8, levels: f64) -> u8 {
    (libm::round(v as f64 / scale as f64) + zero_point as f64).clamp(0.0, levels) as u8
}

#[inline]
fn dequantize_value(code: u8, scale: f32, zero_point: u8) -> f32 {
    (code as i32 - zero_point as i32) as f32 * scale
}

/// Quantizes one group with min-max scaling and half-away-from-zero rounding.
pub fn quantize_group(values: &[f32], bits: u8) -> Result<QuantGroup> {
    check_packed_bits(bits)?;
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFiniteInput);
    }
    let (scale, zero_point) = group_params(values, bits);
    let levels = ((1u32 << bits) - 1) as f64;
    let codes = values.iter().map(|&v| quantize_value(v, scale, zero_point, levels)).collect();
    Ok(QuantGroup { bits, codes, scale, zero_point })
}

/// `(code - zero_point) * scale` per element, in FP32.
pub fn dequantize_group(group: &QuantGroup) -> Vec<f32> {
    group.codes.iter().map(|&c| dequantize_value(c, group.scale, group.zero_point)).collect()
}

pub fn packed_len(n: usize, bits: u8) -> usize {
    (n * bits as usize).div_ceil(8)
}

/// Packs `codes` into a contiguous LSB-first bitstream.
pub fn pack_codes(codes: &[u8], bits: u8) -> Result<Vec<u8>> {
    check_packed_bits(bits)?;
    let mut out = vec![0u8; packed_len(codes.len(), bits)];
    let mut writer = BitWriter::new(&mut out);
    for (index, &code) in codes.iter().enumerate() {
        if bits < 8 && code >> bits != 0 {
            return Err(Error::CodeOutOfRange { index, code, bits });
        }
        writer.push(code, bits);
    }
    Ok(out)
}

/// Inverse of [`pack_codes`] for `n` codes.
pub fn unpack_codes(bytes: &[u8], bits: u8, n: usize) -> Result<Vec<u8>> {
    check_packed_bits(bits)?;
    let expected = packed_len(n, bits);
    if bytes.len() != expected {
        return Err(Error::LengthMismatch { expected, actual: bytes.len() });
    }
    let mut reader = BitReader::new(bytes, 0);
    Ok((0..n).map(|_| reader.read(bits)).collect())
}

struct BitWriter<'a> {
    out: &'a mut [u8],
    bit: usize,
}

impl<'a> BitWriter<'a> {
    fn new(out: &'a mut [u8]) -> Self {
        Self { out, bit: 0 }
    }

    fn push(&mut self, code: u8, bits: u8) {
        let (byte, shift) = (self.bit / 8, self.bit % 8);
        let wide = (code as u16) << shift;
        self.out[byte] |= wide as u8;
        if shift + bits as usize > 8 {
            self.out[byte + 1] |= (wide >> 8) as u8;
        }
        self.bit += bits as usize;
    }
}

/// Sequential LSB-first reader starting at an arbitrary bit offset.
struct BitReader<'a> {
    bytes: &'a [u8],
    bit: usize,
}

impl<'a> BitReader<'a> {
    fn new(bytes: &'a [u8], bit: usize) -> Self {
        Self { bytes, bit }
    }

    #[inline]
    fn read(&mut self, bits: u8) -> u8 {
        let (byte, shift) = (self.bit / 8, self.bit % 8);
        let mut wide = self.bytes[byte] as u16;
        if shift + bits as usize > 8 {
            wide |= (self.bytes[byte + 1] as u16) << 8;
        }
        self.bit += bits as usize;
        ((wide >> shift) & ((1u16 << bits) - 1)) as u8
    }
}

/// A 2-D weight quantized group-wise at one bit width.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuantTensor {
    pub rows: usize,
    pub cols: usize,
    pub bits: u8,
    pub group_size: usize,
    pub codes: Vec<u8>,
    pub scales: Vec<f32>,
    pub zero_points: Vec<u8>,
}

impl QuantTensor {
    pub fn groups_per_row(cols: usize, group_size: usize) -> usize {
        cols.div_ceil(group_size)
    }

    pub fn quantize(weight: &Tensor, bits: u8, group_size: usize) -> Result<Self> {
        check_packed_bits(bits)?;
        if group_size == 0 {
            return Err(Error::InvalidGroupSize(group_size));
        }
        if weight.shape().len() != 2 {
            return Err(Error::ShapeMismatch("quantized weight must be 2-D".into()));
        }
        let (rows, cols) = (weight.rows(), weight.cols());
        let gpr = Self::groups_per_row(cols, group_size);
        let mut codes = Vec::with_capacity(rows * cols);
        let mut scales = Vec::with_capacity(rows * gpr);
        let mut zero_points = Vec::with_capacity(rows * gpr);
        for r in 0..rows {
            for chunk in weight.row(r).chunks(group_size) {
                let g = quantize_group(chunk, bits)?;
                codes.extend_from_slice(&g.codes);
                scales.push(g.scale);
                zero_points.push(g.zero_point);
            }
        }
        Ok(Self { rows, cols, bits, group_size, codes: pack_codes(&codes, bits)?, scales, zero_points })
    }

    /// Checks buffer lengths against the declared shape.
    pub fn validate(&self) -> Result<()> {
        check_packed_bits(self.bits)?;
        if self.group_size == 0 {
            return Err(Error::InvalidGroupSize(0));
        }
        let n_groups = self.rows * Self::groups_per_row(self.cols, self.group_size);
        let expected = packed_len(self.rows * self.cols, self.bits);
        if self.codes.len() != expected {
            return Err(Error::LengthMismatch { expected, actual: self.codes.len() });
        }
        for len in [self.scales.len(), self.zero_points.len()] {
            if len != n_groups {
                return Err(Error::LengthMismatch { expected: n_groups, actual: len });
            }
        }
        let levels = (1u16 << self.bits) - 1;
        if self.zero_points.iter().any(|&z| z as u16 > levels) || self.scales.iter().any(|s| !s.is_finite()) {
            return Err(Error::NonFiniteInput);
        }
        Ok(())
    }

    /// Scale and zero-point of every group as a [`QuantGroup`] view.
    pub fn group(&self, row: usize, g: usize) -> QuantGroup {
        let gpr = Self::groups_per_row(self.cols, self.group_size);
        let start = g * self.group_size;
        let len = self.group_size.min(self.cols - start);
        let mut reader = BitReader::new(&self.codes, (row * self.cols + start) * self.bits as usize);
        QuantGroup {
            bits: self.bits,
            codes: (0..len).map(|_| reader.read(self.bits)).collect(),
            scale: self.scales[row * gpr + g],
            zero_point: self.zero_points[row * gpr + g],
        }
    }

    pub fn dequantize(&self) -> Tensor {
        let gpr = Self::groups_per_row(self.cols, self.group_size);
        let mut data = Vec::with_capacity(self.rows * self.cols);
        let mut reader = BitReader::new(&self.codes, 0);
        for r in 0..self.rows {
            for c in 0..self.cols {
                let g = r * gpr + c / self.group_size;
                data.push(dequantize_value(reader.read(self.bits), self.scales[g], self.zero_points[g]));
            }
        }
        Tensor::new(vec![self.rows, self.cols], data).expect("shape")
    }

    /// Per-group scales, for error bounds.
    pub fn scale_at(&self, row: usize, col: usize) -> f32 {
        self.scales[row * Self::groups_per_row(self.cols, self.group_size) + col / self.group_size]
    }
}

impl LinearMap for QuantTensor {
    fn out_dim(&self) -> usize {
        self.rows
    }

    fn in_dim(&self) -> usize {
        self.cols
    }

    /// Fused path: codes are unpacked and dequantized group by group while
    /// accumulating, without materializing the FP32 matrix.
    fn apply(&self, x: &[f64], out: &mut [f64]) {
        let gpr = Self::groups_per_row(self.cols, self.group_size);
        let mut reader = BitReader::new(&self.codes, 0);
        for (r, o) in out.iter_mut().enumerate() {
            let mut acc = 0.0;
            for g in 0..gpr {
                let (scale, zp) = (self.scales[r * gpr + g], self.zero_points[r * gpr + g]);
                let start = g * self.group_size;
                let end = (start + self.group_size).min(self.cols);
                for &xv in &x[start..end] {
                    acc += dequantize_value(reader.read(self.bits), scale, zp) as f64 * xv;
                }
            }
            *o = acc;
        }
    }
}

/// A layer weight as stored in a quantized model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum QuantLinear {
    Packed(QuantTensor),
    /// 16-bit plan entries keep the original FP32 weights.
    Dense(Tensor),
}

impl QuantLinear {
    pub fn bits(&self) -> u8 {
        match self {
            QuantLinear::Packed(q) => q.bits,
            QuantLinear::Dense(_) => PASSTHROUGH_BITS,
        }
    }

    pub fn shape(&self) -> (usize, usize) {
        match self {
            QuantLinear::Packed(q) => (q.rows, q.cols),
            QuantLinear::Dense(t) => (t.rows(), t.cols()),
        }
    }

    pub fn dequantize(&self) -> Tensor {
        match self {
            QuantLinear::Packed(q) => q.dequantize(),
            QuantLinear::Dense(t) => t.clone(),
        }
    }

    /// Bytes of weight storage: codes plus scales and zero-points, or 2 bytes
    /// per FP16-equivalent value for passthrough weights.
    pub fn storage_bytes(&self) -> usize {
        match self {
            QuantLinear::Packed(q) => q.codes.len() + 4 * q.scales.len() + q.zero_points.len(),
            QuantLinear::Dense(t) => 2 * t.len(),
        }
    }
}

impl LinearMap for QuantLinear {
    fn out_dim(&self) -> usize {
        self.shape().0
    }

    fn in_dim(&self) -> usize {
        self.shape().1
    }

    fn apply(&self, x: &[f64], out: &mut [f64]) {
        match self {
            QuantLinear::Packed(q) => q.apply(x, out),
            QuantLinear::Dense(t) => {
                for (i, o) in out.iter_mut().enumerate() {
                    *o = dot_f32_f64(t.row(i), x);
                }
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuantLayer {
    pub bits: u8,
    pub attn_norm: Tensor,
    pub mlp_norm: Tensor,
    /// Indexed by [`Proj::index`].
    pub linears: Vec<QuantLinear>,
}

/// Model with every block quantized at its planned width. Embedding,
/// lm_head and norms stay FP32.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuantModel {
    pub arch: ArchConfig,
    pub group_size: usize,
    pub plan: BitPlan,
    pub source_checksum: u32,
    pub embedding: Tensor,
    pub final_norm: Tensor,
    pub lm_head: Tensor,
    pub layers: Vec<QuantLayer>,
}

impl QuantModel {
    /// Bit width of every weight in `layer` (uniform by construction).
    pub fn layer_bits(&self, layer: usize) -> u8 {
        self.layers[layer].bits
    }

    /// True if each layer's weights all carry the layer's declared width.
    pub fn is_uniform_within_layers(&self) -> bool {
        self.layers.iter().all(|l| l.linears.iter().all(|q| q.bits() == l.bits))
    }

    /// Structural validation of a deserialized model.
    pub fn validate(&self) -> Result<()> {
        let arch = &self.arch;
        arch.validate()?;
        self.plan.validate()?;
        if self.layers.len() != arch.n_layers || self.plan.bits.len() != arch.n_layers {
            return Err(Error::PlanLengthMismatch { expected: arch.n_layers, actual: self.layers.len() });
        }
        let d = arch.d_model;
        let table = [arch.vocab_size, d];
        let fp = [
            ("embedding", &self.embedding, &table[..]),
            ("lm_head", &self.lm_head, &table[..]),
            ("final_norm", &self.final_norm, &table[1..]),
        ];
        for (name, t, shape) in fp {
            if t.shape() != shape {
                return Err(Error::ShapeMismatch(name.into()));
            }
            if !t.is_finite() {
                return Err(Error::NonFiniteWeight(name.into()));
            }
        }
        for (l, layer) in self.layers.iter().enumerate() {
            if layer.bits != self.plan.bits[l] || !self.is_uniform_within_layers() {
                return Err(Error::UnsupportedBitWidth(layer.bits));
            }
            for (slot, t) in [(NormSlot::Attn, &layer.attn_norm), (NormSlot::Mlp, &layer.mlp_norm)] {
                if t.shape() != [d] {
                    return Err(Error::ShapeMismatch(crate::model::norm_name(l, slot)));
                }
            }
            if layer.linears.len() != Proj::ALL.len() {
                return Err(Error::ShapeMismatch(alloc::format!("layer.{l}")));
            }
            for p in Proj::ALL {
                let q = &layer.linears[p.index()];
                if q.shape() != (p.out_dim(arch), p.in_dim(arch)) {
                    return Err(Error::ShapeMismatch(p.tensor_name(l)));
                }
                match q {
                    QuantLinear::Packed(qt) => qt.validate()?,
                    QuantLinear::Dense(t) if !t.is_finite() => {
                        return Err(Error::NonFiniteWeight(p.tensor_name(l)))
                    }
                    QuantLinear::Dense(_) => {}
                }
            }
        }
        Ok(())
    }

    /// FP32 checkpoint holding the dequantized weights.
    pub fn dequantize(&self) -> Result<ModelCheckpoint> {
        let mut tensors = alloc::collections::BTreeMap::new();
        tensors.insert("embedding".into(), self.embedding.clone());
        tensors.insert("final_norm".into(), self.final_norm.clone());
        tensors.insert("lm_head".into(), self.lm_head.clone());
        for (l, layer) in self.layers.iter().enumerate() {
            tensors.insert(crate::model::norm_name(l, NormSlot::Attn), layer.attn_norm.clone());
            tensors.insert(crate::model::norm_name(l, NormSlot::Mlp), layer.mlp_norm.clone());
            for p in Proj::ALL {
                tensors.insert(p.tensor_name(l), layer.linears[p.index()].dequantize());
            }
        }
        ModelCheckpoint::new(self.arch, tensors)
    }

    /// Bytes of quantized layer storage (codes, scales, zero-points).
    pub fn layer_storage_bytes(&self) -> Vec<usize> {
        self.layers.iter().map(|l| l.linears.iter().map(QuantLinear::storage_bytes).sum()).collect()
    }
}

/// Quantizes every layer weight at `plan.bits[layer]`; 16 keeps FP32.
pub fn quantize_model(model: &ModelCheckpoint, plan: &BitPlan, group_size: usize) -> Result<QuantModel> {
    let arch = *model.arch();
    plan.validate()?;
    if plan.bits.len() != arch.n_layers {
        return Err(Error::PlanLengthMismatch { expected: arch.n_layers, actual: plan.bits.len() });
    }
    if group_size == 0 {
        return Err(Error::InvalidGroupSize(group_size));
    }
    let layers = crate::par::map_range(arch.n_layers, |l| {
        let bits = plan.bits[l];
        let linears = Proj::ALL
            .iter()
            .map(|&p| {
                let w = model.weight(l, p);
                if bits == PASSTHROUGH_BITS {
                    Ok(QuantLinear::Dense(w.clone()))
                } else {
                    QuantTensor::quantize(w, bits, group_size).map(QuantLinear::Packed)
                }
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(QuantLayer {
            bits,
            attn_norm: model.norm(l, NormSlot::Attn).clone(),
            mlp_norm: model.norm(l, NormSlot::Mlp).clone(),
            linears,
        })
    })
    .into_iter()
    .collect::<Result<Vec<_>>>()?;
    Ok(QuantModel {
        arch,
        group_size,
        plan: plan.clone(),
        source_checksum: model.fingerprint(),
        embedding: model.tensor("embedding").clone(),
        final_norm: model.tensor("final_norm").clone(),
        lm_head: model.tensor("lm_head").clone(),
        layers,
    })
}

impl DecoderWeights for QuantModel {
    fn arch(&self) -> &ArchConfig {
        &self.arch
    }

    fn embedding_row(&self, token: usize) -> &[f32] {
        self.embedding.row(token)
    }

    fn attn_norm(&self, layer: usize) -> &[f32] {
        self.layers[layer].attn_norm.data()
    }

    fn mlp_norm(&self, layer: usize) -> &[f32] {
        self.layers[layer].mlp_norm.data()
    }

    fn final_norm(&self) -> &[f32] {
        self.final_norm.data()
    }

    fn linear(&self, layer: usize, proj: Proj) -> &dyn LinearMap {
        &self.layers[layer].linears[proj.index()]
    }

    fn lm_head(&self) -> &dyn LinearMap {
        &self.lm_head
    }
}

/// Per-token NLL of the quantized model via the fused kernels.
pub fn qforward_nll(qmodel: &QuantModel, seq: &[u32], skip: &crate::model::SkipSet) -> Result<Vec<f64>> {
    crate::forward::forward_nll(qmodel, seq, skip)
}
