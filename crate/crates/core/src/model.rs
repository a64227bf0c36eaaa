//! Checkpoint, corpus and ablation types for a pre-RMSNorm decoder with
//! rotary attention and a SwiGLU MLP.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Matrix, Tensor};

/// Base of the rotary frequency ladder.
pub const ROPE_THETA: f64 = 10_000.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ArchConfig {
    pub n_layers: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub d_head: usize,
    pub d_ff: usize,
    pub vocab_size: usize,
    pub max_seq_len: usize,
    pub norm_eps: f64,
}

impl ArchConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidArch(msg));
        if self.n_layers == 0 {
            return bad("n_layers must be at least 1".into());
        }
        if self.n_heads == 0 || self.d_head == 0 || self.n_heads * self.d_head != self.d_model {
            return bad(format!(
                "n_heads ({}) x d_head ({}) must equal d_model ({})",
                self.n_heads, self.d_head, self.d_model
            ));
        }
        if self.d_head % 2 != 0 {
            return bad(format!("d_head ({}) must be even for rotary embedding", self.d_head));
        }
        if self.d_ff == 0 {
            return bad("d_ff must be at least 1".into());
        }
        if self.vocab_size < 2 {
            return bad("vocab_size must be at least 2".into());
        }
        if self.max_seq_len < 2 {
            return bad("max_seq_len must be at least 2".into());
        }
        if !(self.norm_eps > 0.0) || !self.norm_eps.is_finite() {
            return bad("norm_eps must be positive".into());
        }
        Ok(())
    }

    /// Canonical tensor list: name and shape, in file order.
    pub fn tensor_layout(&self) -> Vec<(String, Vec<usize>)> {
        let d = self.d_model;
        let mut out = Vec::with_capacity(3 + 9 * self.n_layers);
        out.push((String::from("embedding"), alloc::vec![self.vocab_size, d]));
        for l in 0..self.n_layers {
            out.push((norm_name(l, NormSlot::Attn), alloc::vec![d]));
            for p in Proj::ALL {
                out.push((p.tensor_name(l), alloc::vec![p.out_dim(self), p.in_dim(self)]));
            }
            out.push((norm_name(l, NormSlot::Mlp), alloc::vec![d]));
        }
        out.push((String::from("final_norm"), alloc::vec![d]));
        out.push((String::from("lm_head"), alloc::vec![self.vocab_size, d]));
        out
    }

    /// Parameter count of the quantizable linear weights of one layer.
    pub fn layer_linear_params(&self) -> u64 {
        Proj::ALL
            .iter()
            .map(|p| (p.out_dim(self) * p.in_dim(self)) as u64)
            .sum()
    }

    /// Parameters that stay in floating point: embedding, lm_head and norms.
    pub fn unquantized_params(&self) -> u64 {
        let d = self.d_model as u64;
        2 * self.vocab_size as u64 * d + (2 * self.n_layers as u64 + 1) * d
    }
}

/// The seven linear projections of a decoder block.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Proj {
    Q,
    K,
    V,
    O,
    Gate,
    Up,
    Down,
}

impl Proj {
    pub const ALL: [Proj; 7] = [Proj::Q, Proj::K, Proj::V, Proj::O, Proj::Gate, Proj::Up, Proj::Down];
    /// Projections analysed by the spectral diagnostics.
    pub const QKV: [Proj; 3] = [Proj::Q, Proj::K, Proj::V];

    pub fn short_name(self) -> &'static str {
        match self {
            Proj::Q => "W_Q",
            Proj::K => "W_K",
            Proj::V => "W_V",
            Proj::O => "W_O",
            Proj::Gate => "W_gate",
            Proj::Up => "W_up",
            Proj::Down => "W_down",
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn tensor_name(self, layer: usize) -> String {
        format!("layer.{layer}.{}", self.short_name())
    }

    pub fn out_dim(self, arch: &ArchConfig) -> usize {
        match self {
            Proj::Q | Proj::K | Proj::V => arch.n_heads * arch.d_head,
            Proj::O | Proj::Down => arch.d_model,
            Proj::Gate | Proj::Up => arch.d_ff,
        }
    }

    pub fn in_dim(self, arch: &ArchConfig) -> usize {
        match self {
            Proj::Q | Proj::K | Proj::V | Proj::Gate | Proj::Up => arch.d_model,
            Proj::O => arch.n_heads * arch.d_head,
            Proj::Down => arch.d_ff,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NormSlot {
    Attn,
    Mlp,
}

pub fn norm_name(layer: usize, slot: NormSlot) -> String {
    match slot {
        NormSlot::Attn => format!("layer.{layer}.attn_norm"),
        NormSlot::Mlp => format!("layer.{layer}.mlp_norm"),
    }
}

/// Architecture plus named FP32 weights. Immutable once validated.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelCheckpoint {
    arch: ArchConfig,
    tensors: BTreeMap<String, Tensor>,
}

impl ModelCheckpoint {
    /// Validates that exactly the tensors of [`ArchConfig::tensor_layout`]
    /// are present with the declared shapes and finite values.
    pub fn new(arch: ArchConfig, tensors: BTreeMap<String, Tensor>) -> Result<Self> {
        arch.validate()?;
        let layout = arch.tensor_layout();
        for (name, shape) in &layout {
            let t = tensors.get(name).ok_or_else(|| Error::MissingTensor(name.clone()))?;
            if t.shape() != shape.as_slice() {
                return Err(Error::ShapeMismatch(name.clone()));
            }
        }
        if tensors.len() != layout.len() {
            let extra = tensors
                .keys()
                .find(|k| !layout.iter().any(|(n, _)| n == *k))
                .cloned()
                .unwrap_or_default();
            return Err(Error::UnexpectedTensor(extra));
        }
        for (name, _) in &layout {
            if !tensors[name].is_finite() {
                return Err(Error::NonFiniteWeight(name.clone()));
            }
        }
        Ok(Self { arch, tensors })
    }

    pub fn arch(&self) -> &ArchConfig {
        &self.arch
    }

    pub fn tensors(&self) -> &BTreeMap<String, Tensor> {
        &self.tensors
    }

    pub fn tensor(&self, name: &str) -> &Tensor {
        &self.tensors[name]
    }

    pub fn weight(&self, layer: usize, proj: Proj) -> &Tensor {
        &self.tensors[&proj.tensor_name(layer)]
    }

    pub fn norm(&self, layer: usize, slot: NormSlot) -> &Tensor {
        &self.tensors[&norm_name(layer, slot)]
    }

    pub fn into_parts(self) -> (ArchConfig, BTreeMap<String, Tensor>) {
        (self.arch, self.tensors)
    }

    /// Returns a copy with one tensor replaced. The replacement must keep the
    /// shape and be finite.
    pub fn with_tensor(&self, name: &str, tensor: Tensor) -> Result<Self> {
        let mut tensors = self.tensors.clone();
        match tensors.get_mut(name) {
            Some(slot) => *slot = tensor,
            None => return Err(Error::UnexpectedTensor(name.into())),
        }
        Self::new(self.arch, tensors)
    }

    /// CRC32 over architecture, tensor names, shapes and little-endian
    /// values, in name order. Identifies the model in plans and reports.
    pub fn fingerprint(&self) -> u32 {
        let mut h = crc32fast::Hasher::new();
        let a = &self.arch;
        for v in [a.n_layers, a.d_model, a.n_heads, a.d_head, a.d_ff, a.vocab_size, a.max_seq_len] {
            h.update(&(v as u64).to_le_bytes());
        }
        h.update(&a.norm_eps.to_le_bytes());
        for (name, t) in &self.tensors {
            h.update(name.as_bytes());
            for &s in t.shape() {
                h.update(&(s as u64).to_le_bytes());
            }
            for v in t.data() {
                h.update(&v.to_le_bytes());
            }
        }
        h.finalize()
    }
}

/// Pre-tokenized evaluation corpus.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenCorpus {
    vocab_bound: u32,
    sequences: Vec<Vec<u32>>,
}

impl TokenCorpus {
    pub fn new(vocab_bound: u32, sequences: Vec<Vec<u32>>) -> Result<Self> {
        for (i, seq) in sequences.iter().enumerate() {
            if seq.is_empty() {
                return Err(Error::EmptySequence(i));
            }
            if let Some(pos) = seq.iter().position(|&t| t >= vocab_bound) {
                return Err(Error::TokenOutOfRange { seq: i, pos });
            }
        }
        Ok(Self { vocab_bound, sequences })
    }

    pub fn vocab_bound(&self) -> u32 {
        self.vocab_bound
    }

    pub fn sequences(&self) -> &[Vec<u32>] {
        &self.sequences
    }

    pub fn len(&self) -> usize {
        self.sequences.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sequences.is_empty()
    }

    /// Fails with `TokenOutOfRange` if any id is not a valid row of the
    /// model's embedding.
    pub fn check_vocab(&self, vocab_size: usize) -> Result<()> {
        for (i, seq) in self.sequences.iter().enumerate() {
            if let Some(pos) = seq.iter().position(|&t| t as usize >= vocab_size) {
                return Err(Error::TokenOutOfRange { seq: i, pos });
            }
        }
        Ok(())
    }

    pub fn fingerprint(&self) -> u32 {
        let mut h = crc32fast::Hasher::new();
        h.update(&self.vocab_bound.to_le_bytes());
        for seq in &self.sequences {
            h.update(&(seq.len() as u32).to_le_bytes());
            for t in seq {
                h.update(&t.to_le_bytes());
            }
        }
        h.finalize()
    }
}

/// Set of blocks bypassed during a forward pass.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SkipSet {
    layers: Vec<usize>,
}

impl SkipSet {
    pub fn empty() -> Self {
        Self::default()
    }

    pub fn new(layers: &[usize], n_layers: usize) -> Result<Self> {
        let mut sorted = layers.to_vec();
        sorted.sort_unstable();
        for w in sorted.windows(2) {
            if w[0] == w[1] {
                return Err(Error::DuplicateSkip(w[0]));
            }
        }
        if let Some(&l) = sorted.iter().find(|&&l| l >= n_layers) {
            return Err(Error::LayerOutOfRange { layer: l, n_layers });
        }
        Ok(Self { layers: sorted })
    }

    pub fn single(layer: usize, n_layers: usize) -> Result<Self> {
        Self::new(&[layer], n_layers)
    }

    pub fn all(n_layers: usize) -> Self {
        Self { layers: (0..n_layers).collect() }
    }

    pub fn contains(&self, layer: usize) -> bool {
        self.layers.binary_search(&layer).is_ok()
    }

    pub fn layers(&self) -> &[usize] {
        &self.layers
    }

    pub fn is_empty(&self) -> bool {
        self.layers.is_empty()
    }
}

/// Normalized input `h` of a layer's Q/K/V projections for one sequence.
#[derive(Debug, Clone, PartialEq)]
pub struct HiddenMatrix {
    pub layer: usize,
    pub values: Matrix,
}

impl HiddenMatrix {
    pub fn seq_len(&self) -> usize {
        self.values.rows()
    }

    pub fn dim(&self) -> usize {
        self.values.cols()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn arch() -> ArchConfig {
        ArchConfig {
            n_layers: 2,
            d_model: 8,
            n_heads: 2,
            d_head: 4,
            d_ff: 12,
            vocab_size: 11,
            max_seq_len: 16,
            norm_eps: 1e-5,
        }
    }

    fn tensors(arch: &ArchConfig) -> BTreeMap<String, Tensor> {
        arch.tensor_layout()
            .into_iter()
            .map(|(n, s)| (n, Tensor::filled(s, 0.5)))
            .collect()
    }

    #[test]
    fn arch_invariants() {
        assert!(arch().validate().is_ok());
        let mut a = arch();
        a.n_layers = 0;
        assert!(matches!(a.validate(), Err(Error::InvalidArch(_))));
        let mut a = arch();
        a.d_head = 3;
        assert!(a.validate().is_err());
        let mut a = arch();
        a.vocab_size = 1;
        assert!(a.validate().is_err());
        let mut a = arch();
        a.norm_eps = 0.0;
        assert!(a.validate().is_err());
    }

    #[test]
    fn layout_counts() {
        let a = arch();
        assert_eq!(a.tensor_layout().len(), 3 + 9 * 2);
        assert_eq!(a.layer_linear_params(), 4 * 64 + 3 * 8 * 12);
    }

    #[test]
    fn checkpoint_validation() {
        let a = arch();
        let mut t = tensors(&a);
        assert!(ModelCheckpoint::new(a, t.clone()).is_ok());
        t.insert("layer.0.W_Q".into(), Tensor::zeros(alloc::vec![8, 7]));
        assert_eq!(
            ModelCheckpoint::new(a, t.clone()).unwrap_err(),
            Error::ShapeMismatch("layer.0.W_Q".into())
        );
        let mut bad = Tensor::zeros(alloc::vec![8, 8]);
        bad.data_mut()[3] = f32::NAN;
        t.insert("layer.0.W_Q".into(), bad);
        assert_eq!(
            ModelCheckpoint::new(a, t.clone()).unwrap_err(),
            Error::NonFiniteWeight("layer.0.W_Q".into())
        );
        t.remove("layer.0.W_Q");
        assert!(matches!(ModelCheckpoint::new(a, t), Err(Error::MissingTensor(_))));
    }

    #[test]
    fn fingerprint_tracks_values() {
        let a = arch();
        let m = ModelCheckpoint::new(a, tensors(&a)).unwrap();
        let mut w = m.weight(1, Proj::Down).clone();
        w.data_mut()[0] = 0.25;
        let m2 = m.with_tensor("layer.1.W_down", w).unwrap();
        assert_ne!(m.fingerprint(), m2.fingerprint());
        assert_eq!(m.fingerprint(), m.clone().fingerprint());
    }

    #[test]
    fn corpus_validation() {
        assert_eq!(
            TokenCorpus::new(5, alloc::vec![alloc::vec![1, 2], alloc::vec![]]).unwrap_err(),
            Error::EmptySequence(1)
        );
        assert_eq!(
            TokenCorpus::new(5, alloc::vec![alloc::vec![1, 5]]).unwrap_err(),
            Error::TokenOutOfRange { seq: 0, pos: 1 }
        );
        let c = TokenCorpus::new(5, alloc::vec![alloc::vec![4, 0, 3]]).unwrap();
        assert_eq!(c.check_vocab(4), Err(Error::TokenOutOfRange { seq: 0, pos: 0 }));
    }

    #[test]
    fn skip_set_rules() {
        assert_eq!(SkipSet::new(&[1, 1], 3), Err(Error::DuplicateSkip(1)));
        assert_eq!(
            SkipSet::new(&[3], 3),
            Err(Error::LayerOutOfRange { layer: 3, n_layers: 3 })
        );
        let s = SkipSet::new(&[2, 0], 3).unwrap();
        assert!(s.contains(0) && s.contains(2) && !s.contains(1));
    }
}
