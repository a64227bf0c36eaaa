//! Experiment driver: synthetic fixtures, FP-vs-quantized evaluation and the
//! high-precision layer-count sweep.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::allocator::{
    compression_ratio, effectiveness_score, plan_from_scores, BitPlan, LayerTriplets, ScoreWeights,
};
use crate::diagnostics::{baseline_perplexity, run_diagnostics, BucketSpec, DiagnosticsConfig, LayerDiagnostics};
use crate::error::{Error, Result};
use crate::forward::{softmax_in_place, CachedDecoder};
use crate::model::{ArchConfig, ModelCheckpoint, Proj, TokenCorpus};
use crate::quant::{quantize_model, QuantModel, DEFAULT_GROUP_SIZE};
use crate::tensor::Tensor;

pub const MAX_FIXTURE_LAYERS: usize = 8;
pub const MAX_FIXTURE_DIM: usize = 128;

/// Synthetic checkpoint + corpus recipe.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FixtureSpec {
    pub n_layers: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub vocab_size: usize,
    pub max_seq_len: usize,
    pub seed: u64,
    /// Layer given low-rank, high-gain attention weights.
    pub hot_layer: Option<usize>,
    pub hot_gain: f64,
    /// Inner dimension of the low-rank factorisation of the hot weights.
    pub hot_rank: usize,
    /// Standard deviation of the logits for a unit-RMS final hidden state.
    pub logit_scale: f64,
    /// Passage length ranges of the generated corpus (inclusive).
    pub corpus_ranges: Vec<(usize, usize)>,
    pub passages_per_range: usize,
}

impl Default for FixtureSpec {
    fn default() -> Self {
        Self {
            n_layers: 4,
            d_model: 64,
            n_heads: 4,
            d_ff: 128,
            vocab_size: 256,
            max_seq_len: 512,
            seed: 0,
            hot_layer: None,
            hot_gain: 10.0,
            hot_rank: 4,
            logit_scale: 2.0,
            corpus_ranges: BucketSpec::default().ranges().to_vec(),
            passages_per_range: 8,
        }
    }
}

impl FixtureSpec {
    pub fn arch(&self) -> Result<ArchConfig> {
        if self.n_heads == 0 || self.d_model % self.n_heads != 0 {
            return Err(Error::InvalidArch(format!(
                "d_model ({}) must be divisible by n_heads ({})",
                self.d_model, self.n_heads
            )));
        }
        let arch = ArchConfig {
            n_layers: self.n_layers,
            d_model: self.d_model,
            n_heads: self.n_heads,
            d_head: self.d_model / self.n_heads,
            d_ff: self.d_ff,
            vocab_size: self.vocab_size,
            max_seq_len: self.max_seq_len,
            norm_eps: 1e-6,
        };
        arch.validate()?;
        Ok(arch)
    }

    pub fn validate(&self) -> Result<ArchConfig> {
        if self.n_layers > MAX_FIXTURE_LAYERS || self.d_model > MAX_FIXTURE_DIM {
            return Err(Error::DimsTooLarge(format!(
                "layers {} (max {MAX_FIXTURE_LAYERS}), dim {} (max {MAX_FIXTURE_DIM})",
                self.n_layers, self.d_model
            )));
        }
        let arch = self.arch()?;
        if let Some(h) = self.hot_layer {
            if h >= self.n_layers {
                return Err(Error::LayerOutOfRange { layer: h, n_layers: self.n_layers });
            }
        }
        if !(self.hot_gain > 1.0) || !self.hot_gain.is_finite() {
            return Err(Error::InvalidFixture("hot_gain must be > 1".into()));
        }
        if self.hot_rank == 0 || self.hot_rank > self.d_model {
            return Err(Error::InvalidFixture("hot_rank must be in [1, d_model]".into()));
        }
        if !(self.logit_scale > 0.0) || !self.logit_scale.is_finite() {
            return Err(Error::InvalidFixture("logit_scale must be positive".into()));
        }
        for &(lo, hi) in &self.corpus_ranges {
            if lo < 2 || lo > hi || lo > self.max_seq_len {
                return Err(Error::InvalidFixture(format!("corpus range {lo}-{hi} is not usable")));
            }
        }
        Ok(arch)
    }
}

fn gaussian(rng: &mut ChaCha8Rng, n: usize, std: f64) -> Vec<f32> {
    (0..n)
        .map(|_| {
            let g: f64 = StandardNormal.sample(rng);
            (g * std) as f32
        })
        .collect()
}

fn gaussian_f64(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| StandardNormal.sample(rng)).collect()
}

/// `gain * A B` with `A: rows x rank`, `B: rank x cols`, scaled so that
/// entries have standard deviation `gain / sqrt(cols)`.
fn low_rank(rng: &mut ChaCha8Rng, rows: usize, cols: usize, rank: usize, gain: f64) -> Vec<f32> {
    let a = gaussian_f64(rng, rows * rank);
    let b = gaussian_f64(rng, rank * cols);
    let scale = gain / libm::sqrt((rank * cols) as f64);
    let mut out = Vec::with_capacity(rows * cols);
    for r in 0..rows {
        for c in 0..cols {
            let v: f64 = (0..rank).map(|k| a[r * rank + k] * b[k * cols + c]).sum();
            out.push((v * scale) as f32);
        }
    }
    out
}

fn sample_categorical(logits: &mut [f64], rng: &mut ChaCha8Rng) -> u32 {
    softmax_in_place(logits);
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (i, p) in logits.iter().enumerate() {
        acc += p;
        if u < acc {
            return i as u32;
        }
    }
    (logits.len() - 1) as u32
}

/// Seeded checkpoint and a corpus sampled from it.
///
/// Weights are Gaussian with standard deviation `1/sqrt(fan_in)`; norms are
/// ones. The hot layer's Q/K/V/O weights are replaced by low-rank products,
/// each scaled by `sqrt(hot_gain)`, so `Q Kᵀ` and `V O` carry `hot_gain`. Each corpus passage starts with a uniform token and
/// continues by ancestral sampling from the model, so the FP weights are the
/// best predictor of the corpus.
pub fn make_fixture(spec: &FixtureSpec) -> Result<(ModelCheckpoint, TokenCorpus)> {
    let arch = spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut tensors = alloc::collections::BTreeMap::new();
    for (name, shape) in arch.tensor_layout() {
        let n: usize = shape.iter().product();
        let data = if name.ends_with("norm") {
            vec![1.0; n]
        } else if name == "embedding" {
            gaussian(&mut rng, n, 1.0)
        } else if name == "lm_head" {
            gaussian(&mut rng, n, spec.logit_scale / libm::sqrt(arch.d_model as f64))
        } else {
            let (rows, cols) = (shape[0], shape[1]);
            let hot = spec.hot_layer.is_some_and(|h| {
                [Proj::Q, Proj::K, Proj::V, Proj::O].iter().any(|p| name == p.tensor_name(h))
            });
            if hot {
                // sqrt per factor so the score and output paths each gain `hot_gain`
                low_rank(&mut rng, rows, cols, spec.hot_rank, libm::sqrt(spec.hot_gain))
            } else {
                gaussian(&mut rng, n, 1.0 / libm::sqrt(cols as f64))
            }
        };
        tensors.insert(name, Tensor::new(shape, data).expect("layout shape"));
    }
    let model = ModelCheckpoint::new(arch, tensors)?;

    let mut seqs = Vec::new();
    for &(lo, hi) in &spec.corpus_ranges {
        let hi = hi.min(arch.max_seq_len);
        for _ in 0..spec.passages_per_range {
            let len = rng.random_range(lo..=hi);
            let mut seq = Vec::with_capacity(len);
            seq.push(rng.random_range(0..arch.vocab_size as u32));
            let mut decoder = CachedDecoder::new(&model, len);
            while seq.len() < len {
                let mut logits = decoder.step(*seq.last().expect("non-empty"));
                seq.push(sample_categorical(&mut logits, &mut rng));
            }
            seqs.push(seq);
        }
    }
    let corpus = TokenCorpus::new(arch.vocab_size as u32, seqs)?;
    Ok((model, corpus))
}

/// Unweighted bucket mean of the triplets, normalized and fused.
pub fn scores_from_diagnostics(buckets: &[LayerDiagnostics], weights: &ScoreWeights) -> Result<Vec<f64>> {
    let normalized = LayerTriplets::from_buckets(buckets)?.normalize()?;
    effectiveness_score(&normalized, weights)
}

/// Diagnostics, scores and the top-m plan for one model.
#[derive(Debug, Clone, PartialEq)]
pub struct Allocation {
    pub diagnostics: Vec<LayerDiagnostics>,
    pub scores: Vec<f64>,
    pub plan: BitPlan,
}

pub fn allocate(
    model: &ModelCheckpoint,
    corpus: &TokenCorpus,
    config: &DiagnosticsConfig,
    weights: &ScoreWeights,
    m: usize,
    b_hi: u8,
    b_lo: u8,
) -> Result<Allocation> {
    let diagnostics = run_diagnostics(model, corpus, config)?;
    let scores = scores_from_diagnostics(&diagnostics, weights)?;
    let plan = plan_from_scores(&scores, m, b_hi, b_lo)?;
    Ok(Allocation { diagnostics, scores, plan })
}

/// Index of the lowest score (lowest index on ties).
pub fn lowest_score_layer(scores: &[f64]) -> Option<usize> {
    (0..scores.len()).min_by(|&a, &b| scores[a].total_cmp(&scores[b]).then(a.cmp(&b)))
}

/// Index of the highest score (lowest index on ties).
pub fn highest_score_layer(scores: &[f64]) -> Option<usize> {
    (0..scores.len()).min_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BucketCorrelation {
    pub bucket: (usize, usize),
    pub spearman_ppl_r: Option<f64>,
    pub spearman_ppl_e: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlanSummary {
    pub bits: Vec<u8>,
    pub s_hi: Vec<usize>,
    pub m: usize,
    pub b_hi: u8,
    pub b_lo: u8,
    pub group_size: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub ppl_fp: f64,
    pub ppl_quant: f64,
    /// `ppl_fp / ppl_quant`; 1 means no perplexity loss.
    pub ppl_recovery: f64,
    pub cr: f64,
    pub avg_bits: f64,
    pub whole_model_avg_bits: f64,
    pub plan: PlanSummary,
    pub correlations: Vec<BucketCorrelation>,
    pub model_checksum: u32,
    pub corpus_checksum: u32,
}

/// Perplexity of the FP and quantized models on the same corpus.
pub fn evaluate(
    model: &ModelCheckpoint,
    qmodel: &QuantModel,
    corpus: &TokenCorpus,
    diagnostics: Option<&[LayerDiagnostics]>,
) -> Result<EvalReport> {
    if model.arch() != &qmodel.arch {
        return Err(Error::ArchMismatch);
    }
    let model_checksum = model.fingerprint();
    if qmodel.source_checksum != model_checksum {
        return Err(Error::SourceMismatch { expected: qmodel.source_checksum, actual: model_checksum });
    }
    corpus.check_vocab(model.arch().vocab_size)?;
    let ppl_fp = baseline_perplexity(model, corpus)?;
    let ppl_quant = baseline_perplexity(qmodel, corpus)?;
    let compression = compression_ratio(&qmodel.plan, model.arch())?;
    let correlations = diagnostics
        .unwrap_or(&[])
        .iter()
        .map(|d| BucketCorrelation {
            bucket: d.provenance.bucket,
            spearman_ppl_r: d.spearman_ppl_r,
            spearman_ppl_e: d.spearman_ppl_e,
        })
        .collect();
    Ok(EvalReport {
        ppl_fp,
        ppl_quant,
        ppl_recovery: ppl_fp / ppl_quant,
        cr: compression.cr,
        avg_bits: compression.avg_bits,
        whole_model_avg_bits: compression.whole_model_avg_bits,
        plan: PlanSummary {
            bits: qmodel.plan.bits.clone(),
            s_hi: qmodel.plan.s_hi.clone(),
            m: qmodel.plan.m,
            b_hi: qmodel.plan.b_hi,
            b_lo: qmodel.plan.b_lo,
            group_size: qmodel.group_size,
        },
        correlations,
        model_checksum,
        corpus_checksum: corpus.fingerprint(),
    })
}

/// Quantizes with `plan` and returns the quantized perplexity.
pub fn quantized_perplexity(
    model: &ModelCheckpoint,
    corpus: &TokenCorpus,
    plan: &BitPlan,
    group_size: usize,
) -> Result<f64> {
    let q = quantize_model(model, plan, group_size)?;
    baseline_perplexity(&q, corpus)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub m: usize,
    pub avg_bits: f64,
    pub cr: f64,
    pub ppl_quant: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepResult {
    pub ppl_fp: f64,
    pub b_hi: u8,
    pub b_lo: u8,
    pub group_size: usize,
    pub points: Vec<SweepPoint>,
}

/// Default sweep range `1..=min(16, n_layers)`.
pub fn default_sweep_range(n_layers: usize) -> (usize, usize) {
    (1, 16.min(n_layers))
}

/// One quantized evaluation per `m`, all from the same scores.
pub fn sweep_m(
    model: &ModelCheckpoint,
    corpus: &TokenCorpus,
    scores: &[f64],
    m_values: &[usize],
    b_hi: u8,
    b_lo: u8,
    group_size: usize,
) -> Result<SweepResult> {
    let n_layers = model.arch().n_layers;
    if scores.len() != n_layers {
        return Err(Error::PlanLengthMismatch { expected: n_layers, actual: scores.len() });
    }
    if let Some(&m) = m_values.iter().find(|&&m| m > n_layers) {
        return Err(Error::MOutOfRange { m, n_layers });
    }
    if m_values.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::InvalidFixture("sweep values must be strictly increasing".into()));
    }
    let points = m_values
        .iter()
        .map(|&m| {
            let plan = plan_from_scores(scores, m, b_hi, b_lo)?;
            let compression = compression_ratio(&plan, model.arch())?;
            Ok(SweepPoint {
                m,
                avg_bits: compression.avg_bits,
                cr: compression.cr,
                ppl_quant: quantized_perplexity(model, corpus, &plan, group_size)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(SweepResult { ppl_fp: baseline_perplexity(model, corpus)?, b_hi, b_lo, group_size, points })
}

impl SweepResult {
    pub fn default_group_size() -> usize {
        DEFAULT_GROUP_SIZE
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> FixtureSpec {
        FixtureSpec {
            n_layers: 2,
            d_model: 16,
            n_heads: 2,
            d_ff: 24,
            vocab_size: 32,
            max_seq_len: 64,
            corpus_ranges: vec![(5, 12), (20, 30)],
            passages_per_range: 2,
            ..FixtureSpec::default()
        }
    }

    #[test]
    fn fixture_is_deterministic() {
        let (m1, c1) = make_fixture(&tiny()).unwrap();
        let (m2, c2) = make_fixture(&tiny()).unwrap();
        assert_eq!(m1, m2);
        assert_eq!(c1, c2);
        assert_eq!(c1.len(), 4);
        assert!(c1.sequences()[..2].iter().all(|s| (5..=12).contains(&s.len())));
        let other = make_fixture(&FixtureSpec { seed: 1, ..tiny() }).unwrap().0;
        assert_ne!(m1.fingerprint(), other.fingerprint());
    }

    #[test]
    fn fixture_limits() {
        let big = FixtureSpec { n_layers: 9, ..tiny() };
        assert!(matches!(make_fixture(&big), Err(Error::DimsTooLarge(_))));
        let wide = FixtureSpec { d_model: 256, ..tiny() };
        assert!(matches!(make_fixture(&wide), Err(Error::DimsTooLarge(_))));
        let none = FixtureSpec { n_layers: 0, ..tiny() };
        assert!(matches!(make_fixture(&none), Err(Error::InvalidArch(_))));
        let hot = FixtureSpec { hot_layer: Some(2), ..tiny() };
        assert!(matches!(make_fixture(&hot), Err(Error::LayerOutOfRange { .. })));
    }

    #[test]
    fn hot_layer_weights_are_low_rank() {
        let spec = FixtureSpec { hot_layer: Some(1), ..tiny() };
        let (m, _) = make_fixture(&spec).unwrap();
        let w = m.weight(1, Proj::Q);
        let mat = crate::tensor::Matrix::from_vec(
            w.rows(),
            w.cols(),
            w.data().iter().map(|&v| v as f64).collect(),
        )
        .unwrap();
        let s = crate::linalg::singular_values(&mat).unwrap();
        let r = spec.hot_rank;
        assert!(s[r] < 1e-5 * s[0] && s[r - 1] > 1e-3 * s[0]);
    }

    #[test]
    fn score_extremes() {
        assert_eq!(lowest_score_layer(&[0.3, 0.1, 0.1]), Some(1));
        assert_eq!(highest_score_layer(&[0.3, 0.9, 0.9]), Some(1));
        assert_eq!(lowest_score_layer(&[]), None);
    }
}
