//! Score fusion, top-m layer selection, bit assignment and compression ratio.

use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::diagnostics::LayerDiagnostics;
use crate::error::{Error, Result};
use crate::model::ArchConfig;

/// Bit widths a plan may assign. 16 keeps the layer in floating point.
pub const SUPPORTED_BITS: [u8; 5] = [2, 3, 4, 8, 16];

pub fn is_supported_bits(bits: u8) -> bool {
    SUPPORTED_BITS.contains(&bits)
}

/// Convex weights of the three normalized metrics.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScoreWeights {
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
}

impl ScoreWeights {
    pub fn new(alpha: f64, beta: f64, gamma: f64) -> Result<Self> {
        let w = Self { alpha, beta, gamma };
        w.validate()?;
        Ok(w)
    }

    pub fn validate(&self) -> Result<()> {
        let all = [self.alpha, self.beta, self.gamma];
        if all.iter().any(|w| !w.is_finite() || *w < 0.0) || (all.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(Error::WeightSumInvalid);
        }
        Ok(())
    }
}

impl Default for ScoreWeights {
    fn default() -> Self {
        Self { alpha: 1.0 / 3.0, beta: 1.0 / 3.0, gamma: 1.0 / 3.0 }
    }
}

/// Per-layer metrics scaled so each list peaks at 1.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormalizedMetrics {
    pub delta_ppl: Vec<f64>,
    pub delta_r: Vec<f64>,
    pub delta_e: Vec<f64>,
}

fn scale_to_unit_max(values: Vec<f64>, name: &'static str) -> Result<Vec<f64>> {
    let max = values.iter().copied().fold(0.0, f64::max);
    if !(max > 0.0) || !max.is_finite() {
        return Err(Error::DegenerateMetric(name));
    }
    Ok(values.into_iter().map(|v| v / max).collect())
}

/// Negative perplexity and energy changes clamp to zero; compactness change
/// is taken in absolute value. Each metric is then divided by its maximum.
pub fn normalize_metrics(delta_ppl: &[f64], delta_r: &[f64], delta_e: &[f64]) -> Result<NormalizedMetrics> {
    let n = delta_ppl.len();
    if n == 0 {
        return Err(Error::TooFewSamples { min: 1, actual: 0 });
    }
    for len in [delta_r.len(), delta_e.len()] {
        if len != n {
            return Err(Error::LengthMismatch { expected: n, actual: len });
        }
    }
    if delta_ppl.iter().chain(delta_r).chain(delta_e).any(|v| !v.is_finite()) {
        return Err(Error::NonFiniteInput);
    }
    Ok(NormalizedMetrics {
        delta_ppl: scale_to_unit_max(delta_ppl.iter().map(|v| v.max(0.0)).collect(), "delta_ppl")?,
        delta_r: scale_to_unit_max(delta_r.iter().map(|v| v.abs()).collect(), "delta_r")?,
        delta_e: scale_to_unit_max(delta_e.iter().map(|v| v.max(0.0)).collect(), "delta_e")?,
    })
}

/// Raw per-layer triplet, averaged over buckets with equal weight.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerTriplets {
    pub delta_ppl: Vec<f64>,
    pub delta_r: Vec<f64>,
    pub delta_e: Vec<f64>,
}

impl LayerTriplets {
    pub fn from_buckets(buckets: &[LayerDiagnostics]) -> Result<Self> {
        let first = buckets.first().ok_or(Error::TooFewSamples { min: 1, actual: 0 })?;
        let n = first.layers.len();
        let mut out = Self {
            delta_ppl: alloc::vec![0.0; n],
            delta_r: alloc::vec![0.0; n],
            delta_e: alloc::vec![0.0; n],
        };
        for b in buckets {
            if b.layers.len() != n {
                return Err(Error::LengthMismatch { expected: n, actual: b.layers.len() });
            }
            for (l, rec) in b.layers.iter().enumerate() {
                out.delta_ppl[l] += rec.delta_ppl;
                out.delta_r[l] += rec.delta_r_mean;
                out.delta_e[l] += rec.delta_e_mean;
            }
        }
        let k = buckets.len() as f64;
        for v in out.delta_ppl.iter_mut().chain(&mut out.delta_r).chain(&mut out.delta_e) {
            *v /= k;
        }
        Ok(out)
    }

    pub fn normalize(&self) -> Result<NormalizedMetrics> {
        normalize_metrics(&self.delta_ppl, &self.delta_r, &self.delta_e)
    }
}

/// `s_l = alpha * ppl_hat + beta * r_hat + gamma * e_hat`.
pub fn effectiveness_score(metrics: &NormalizedMetrics, weights: &ScoreWeights) -> Result<Vec<f64>> {
    weights.validate()?;
    Ok(metrics
        .delta_ppl
        .iter()
        .zip(&metrics.delta_r)
        .zip(&metrics.delta_e)
        .map(|((&p, &r), &e)| weights.alpha * p + weights.beta * r + weights.gamma * e)
        .collect())
}

/// High- and low-precision layer sets, each sorted ascending.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Partition {
    pub s_hi: Vec<usize>,
    pub s_lo: Vec<usize>,
}

/// The `m` highest-scoring layers; equal scores go to the lower index.
pub fn select_topk(scores: &[f64], m: usize) -> Result<Partition> {
    if m > scores.len() {
        return Err(Error::MOutOfRange { m, n_layers: scores.len() });
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    let mut s_hi = order[..m].to_vec();
    let mut s_lo = order[m..].to_vec();
    s_hi.sort_unstable();
    s_lo.sort_unstable();
    Ok(Partition { s_hi, s_lo })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BitPlan {
    pub bits: Vec<u8>,
    pub s_hi: Vec<usize>,
    pub s_lo: Vec<usize>,
    pub b_hi: u8,
    pub b_lo: u8,
    pub scores: Vec<f64>,
    pub m: usize,
}

/// Layers in `s_hi` get `b_hi`, the rest `b_lo`.
pub fn assign_bits(partition: &Partition, scores: &[f64], b_hi: u8, b_lo: u8) -> Result<BitPlan> {
    for b in [b_hi, b_lo] {
        if !is_supported_bits(b) {
            return Err(Error::UnsupportedBitWidth(b));
        }
    }
    if b_hi <= b_lo {
        return Err(Error::UnsupportedBitWidth(b_hi));
    }
    let n = partition.s_hi.len() + partition.s_lo.len();
    if scores.len() != n {
        return Err(Error::LengthMismatch { expected: n, actual: scores.len() });
    }
    let mut bits = alloc::vec![0u8; n];
    for (set, b) in [(&partition.s_hi, b_hi), (&partition.s_lo, b_lo)] {
        for &l in set {
            if l >= n || bits[l] != 0 {
                return Err(Error::LayerOutOfRange { layer: l, n_layers: n });
            }
            bits[l] = b;
        }
    }
    Ok(BitPlan {
        bits,
        s_hi: partition.s_hi.clone(),
        s_lo: partition.s_lo.clone(),
        b_hi,
        b_lo,
        scores: scores.to_vec(),
        m: partition.s_hi.len(),
    })
}

impl BitPlan {
    /// Every layer at the same width, e.g. 16 for a passthrough model.
    pub fn uniform(n_layers: usize, bits: u8) -> Result<Self> {
        if !is_supported_bits(bits) {
            return Err(Error::UnsupportedBitWidth(bits));
        }
        Ok(Self {
            bits: alloc::vec![bits; n_layers],
            s_hi: Vec::new(),
            s_lo: (0..n_layers).collect(),
            b_hi: bits,
            b_lo: bits,
            scores: alloc::vec![0.0; n_layers],
            m: 0,
        })
    }

    /// Explicit high-precision set, regardless of scores.
    pub fn with_hi_layers(scores: &[f64], hi: &[usize], b_hi: u8, b_lo: u8) -> Result<Self> {
        let n = scores.len();
        if let Some(&l) = hi.iter().find(|&&l| l >= n) {
            return Err(Error::LayerOutOfRange { layer: l, n_layers: n });
        }
        let mut s_hi = hi.to_vec();
        s_hi.sort_unstable();
        s_hi.dedup();
        let s_lo = (0..n).filter(|l| !s_hi.contains(l)).collect();
        assign_bits(&Partition { s_hi, s_lo }, scores, b_hi, b_lo)
    }

    pub fn n_layers(&self) -> usize {
        self.bits.len()
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.bits.len();
        if self.scores.len() != n {
            return Err(Error::LengthMismatch { expected: n, actual: self.scores.len() });
        }
        if let Some(&b) = self.bits.iter().find(|&&b| !is_supported_bits(b)) {
            return Err(Error::UnsupportedBitWidth(b));
        }
        let mut seen = alloc::vec![false; n];
        for &l in self.s_hi.iter().chain(&self.s_lo) {
            if l >= n || seen[l] {
                return Err(Error::LayerOutOfRange { layer: l, n_layers: n });
            }
            seen[l] = true;
        }
        if seen.iter().any(|s| !s) || self.s_hi.len() != self.m {
            return Err(Error::PlanLengthMismatch { expected: n, actual: self.s_hi.len() + self.s_lo.len() });
        }
        Ok(())
    }
}

/// Scores -> top-m partition -> bit plan in one step.
pub fn plan_from_scores(scores: &[f64], m: usize, b_hi: u8, b_lo: u8) -> Result<BitPlan> {
    assign_bits(&select_topk(scores, m)?, scores, b_hi, b_lo)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompressionReport {
    /// `sum b_l N_l / (16 sum N_l)` over the quantizable layer weights.
    pub cr: f64,
    /// `16 * cr`.
    pub avg_bits: f64,
    pub layer_params: Vec<u64>,
    /// Average bits over every parameter, with embedding, head and norms
    /// counted at 16 bits.
    pub whole_model_avg_bits: f64,
}

pub fn compression_ratio_for(plan: &BitPlan, layer_params: &[u64], fp_params: u64) -> Result<CompressionReport> {
    if plan.bits.len() != layer_params.len() {
        return Err(Error::PlanLengthMismatch { expected: layer_params.len(), actual: plan.bits.len() });
    }
    let weighted: u128 = plan.bits.iter().zip(layer_params).map(|(&b, &n)| b as u128 * n as u128).sum();
    let total: u128 = layer_params.iter().map(|&n| n as u128).sum();
    if total == 0 {
        return Err(Error::TooFewSamples { min: 1, actual: 0 });
    }
    let avg_bits = weighted as f64 / total as f64;
    let whole = (weighted + 16 * fp_params as u128) as f64 / (total + fp_params as u128) as f64;
    Ok(CompressionReport { cr: avg_bits / 16.0, avg_bits, layer_params: layer_params.to_vec(), whole_model_avg_bits: whole })
}

/// Compression of `plan` on a model with architecture `arch`.
pub fn compression_ratio(plan: &BitPlan, arch: &ArchConfig) -> Result<CompressionReport> {
    let params = alloc::vec![arch.layer_linear_params(); arch.n_layers];
    compression_ratio_for(plan, &params, arch.unquantized_params())
}
