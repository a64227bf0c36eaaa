//! Ablation perplexity drop and the per-bucket diagnostic protocol.

use alloc::format;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::forward::{mean_nll, DecoderWeights};
use crate::model::{ModelCheckpoint, SkipSet, TokenCorpus};
use crate::par::map_range;
use crate::spectral::{default_k, spectral_diagnose, SpectralDiag};
use crate::stats::spearman;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PerplexityResult {
    pub ppl_base: f64,
    pub ppl_without: Vec<f64>,
    /// `ppl_without[l] - ppl_base`.
    pub delta_ppl: Vec<f64>,
}

/// Perplexity as `exp` of the mean over sequences of each sequence's mean
/// token NLL.
pub fn corpus_perplexity<M: DecoderWeights + ?Sized>(
    model: &M,
    seqs: &[&[u32]],
    skip: &SkipSet,
) -> Result<f64> {
    if seqs.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    let per_seq = map_range(seqs.len(), |i| mean_nll(model, seqs[i], skip));
    let mut total = 0.0;
    for v in per_seq {
        total += v?;
    }
    Ok(libm::exp(total / seqs.len() as f64))
}

fn all_sequences(corpus: &TokenCorpus) -> Vec<&[u32]> {
    corpus.sequences().iter().map(Vec::as_slice).collect()
}

pub fn baseline_perplexity<M: DecoderWeights + ?Sized>(model: &M, corpus: &TokenCorpus) -> Result<f64> {
    corpus_perplexity(model, &all_sequences(corpus), &SkipSet::empty())
}

/// Perplexity with block `layer` bypassed, minus the baseline. Negative when
/// removing the block helps.
pub fn perplexity_drop<M: DecoderWeights + ?Sized>(
    model: &M,
    corpus: &TokenCorpus,
    layer: usize,
) -> Result<f64> {
    let n_layers = model.arch().n_layers;
    let skip = SkipSet::single(layer, n_layers)?;
    let seqs = all_sequences(corpus);
    let without = corpus_perplexity(model, &seqs, &skip)?;
    let base = corpus_perplexity(model, &seqs, &SkipSet::empty())?;
    Ok(without - base)
}

/// Baseline plus every single-layer ablation, `(L + 1) * N` forward passes.
pub fn perplexity_profile<M: DecoderWeights + ?Sized>(model: &M, seqs: &[&[u32]]) -> Result<PerplexityResult> {
    if seqs.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    let n_layers = model.arch().n_layers;
    let n = seqs.len();
    // Task t: variant t / n (0 = baseline, l + 1 = skip l), sequence t % n.
    let nll = map_range((n_layers + 1) * n, |t| {
        let (variant, i) = (t / n, t % n);
        let skip = if variant == 0 { SkipSet::empty() } else { SkipSet::single(variant - 1, n_layers)? };
        mean_nll(model, seqs[i], &skip)
    });
    let mut ppl = Vec::with_capacity(n_layers + 1);
    for chunk in nll.chunks(n) {
        let mut total = 0.0;
        for v in chunk {
            total += v.clone()?;
        }
        ppl.push(libm::exp(total / n as f64));
    }
    let ppl_base = ppl[0];
    let ppl_without = ppl[1..].to_vec();
    let delta_ppl = ppl_without.iter().map(|p| p - ppl_base).collect();
    Ok(PerplexityResult { ppl_base, ppl_without, delta_ppl })
}

/// Length buckets and how many passages to draw from each.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BucketSpec {
    ranges: Vec<(usize, usize)>,
    passages_per_bucket: usize,
}

impl BucketSpec {
    /// Ranges are inclusive `(min_len, max_len)` and must not overlap.
    pub fn new(ranges: Vec<(usize, usize)>, passages_per_bucket: usize) -> Result<Self> {
        if ranges.is_empty() {
            return Err(Error::InvalidBuckets("no ranges".into()));
        }
        if passages_per_bucket == 0 {
            return Err(Error::InvalidBuckets("passages_per_bucket must be positive".into()));
        }
        for &(lo, hi) in &ranges {
            if lo > hi {
                return Err(Error::InvalidBuckets(format!("range {lo}-{hi} has min > max")));
            }
        }
        for (i, a) in ranges.iter().enumerate() {
            for b in &ranges[i + 1..] {
                if a.0 <= b.1 && b.0 <= a.1 {
                    return Err(Error::InvalidBuckets(format!(
                        "ranges {}-{} and {}-{} overlap",
                        a.0, a.1, b.0, b.1
                    )));
                }
            }
        }
        Ok(Self { ranges, passages_per_bucket })
    }

    pub fn ranges(&self) -> &[(usize, usize)] {
        &self.ranges
    }

    pub fn passages_per_bucket(&self) -> usize {
        self.passages_per_bucket
    }
}

impl Default for BucketSpec {
    /// Short (33-128 tokens) and long (129-512 tokens) passages, 100 each.
    fn default() -> Self {
        Self { ranges: alloc::vec![(33, 128), (129, 512)], passages_per_bucket: 100 }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DiagnosticsConfig {
    pub buckets: BucketSpec,
    /// Top-k for the energy metric; `None` selects [`default_k`].
    pub k: Option<usize>,
    pub seed: u64,
}

impl Default for DiagnosticsConfig {
    fn default() -> Self {
        Self { buckets: BucketSpec::default(), k: None, seed: 0 }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Provenance {
    pub model_checksum: u32,
    pub corpus_checksum: u32,
    pub bucket: (usize, usize),
    pub seed: u64,
    pub k: usize,
    /// Corpus indices of the sampled passages, in sample order.
    pub passages: Vec<usize>,
    /// Passage used for the spectral metrics (first of the sample).
    pub representative: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerRecord {
    pub layer: usize,
    pub ppl_without: f64,
    pub delta_ppl: f64,
    pub delta_r_mean: f64,
    pub delta_e_mean: f64,
    pub spectral: SpectralDiag,
}

/// Diagnostic triplets for every layer, measured on one length bucket.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerDiagnostics {
    pub ppl_base: f64,
    pub layers: Vec<LayerRecord>,
    /// Spearman rank correlation of delta_ppl with delta_r; `None` when
    /// undefined (fewer than two layers or a constant metric).
    pub spearman_ppl_r: Option<f64>,
    pub spearman_ppl_e: Option<f64>,
    pub provenance: Provenance,
}

impl LayerDiagnostics {
    pub fn delta_ppl(&self) -> Vec<f64> {
        self.layers.iter().map(|l| l.delta_ppl).collect()
    }

    pub fn delta_r(&self) -> Vec<f64> {
        self.layers.iter().map(|l| l.delta_r_mean).collect()
    }

    pub fn delta_e(&self) -> Vec<f64> {
        self.layers.iter().map(|l| l.delta_e_mean).collect()
    }
}

fn bucket_rng(seed: u64, bucket: usize) -> ChaCha8Rng {
    let mut s = ChaCha8Rng::seed_from_u64(seed);
    let mut bytes = [0u8; 32];
    for (i, b) in bytes.iter_mut().enumerate() {
        *b = rand::RngCore::next_u32(&mut s) as u8 ^ (bucket as u8).wrapping_mul(i as u8 + 1);
    }
    ChaCha8Rng::from_seed(bytes)
}

/// Seeded sample of up to `count` corpus indices whose length falls in
/// `range` (inclusive).
pub fn sample_bucket(
    corpus: &TokenCorpus,
    range: (usize, usize),
    count: usize,
    seed: u64,
    bucket: usize,
) -> Result<Vec<usize>> {
    let mut candidates: Vec<usize> = corpus
        .sequences()
        .iter()
        .enumerate()
        .filter(|(_, s)| (range.0..=range.1).contains(&s.len()))
        .map(|(i, _)| i)
        .collect();
    if candidates.is_empty() {
        return Err(Error::EmptyBucket { min: range.0, max: range.1 });
    }
    candidates.shuffle(&mut bucket_rng(seed, bucket));
    candidates.truncate(count);
    Ok(candidates)
}

/// Runs the full protocol on every bucket: ablation perplexity over all
/// sampled passages, spectral metrics on the first sampled passage, and the
/// two Spearman correlations.
pub fn run_diagnostics(
    model: &ModelCheckpoint,
    corpus: &TokenCorpus,
    config: &DiagnosticsConfig,
) -> Result<Vec<LayerDiagnostics>> {
    let arch = *model.arch();
    corpus.check_vocab(arch.vocab_size)?;
    let model_checksum = model.fingerprint();
    let corpus_checksum = corpus.fingerprint();

    let mut out = Vec::with_capacity(config.buckets.ranges().len());
    for (bi, &range) in config.buckets.ranges().iter().enumerate() {
        let picked = sample_bucket(corpus, range, config.buckets.passages_per_bucket(), config.seed, bi)?;
        let seqs: Vec<&[u32]> = picked.iter().map(|&i| corpus.sequences()[i].as_slice()).collect();
        let ppl = perplexity_profile(model, &seqs)?;

        let representative = picked[0];
        let passage = seqs[0];
        let k_used = config.k.unwrap_or_else(|| default_k(passage.len(), arch.d_head));
        let layers = (0..arch.n_layers)
            .map(|l| {
                let spectral = spectral_diagnose(model, passage, l, Some(k_used), config.seed)?;
                Ok(LayerRecord {
                    layer: l,
                    ppl_without: ppl.ppl_without[l],
                    delta_ppl: ppl.delta_ppl[l],
                    delta_r_mean: spectral.delta_r_mean,
                    delta_e_mean: spectral.delta_e_mean,
                    spectral,
                })
            })
            .collect::<Result<Vec<_>>>()?;

        let mut diag = LayerDiagnostics {
            ppl_base: ppl.ppl_base,
            layers,
            spearman_ppl_r: None,
            spearman_ppl_e: None,
            provenance: Provenance {
                model_checksum,
                corpus_checksum,
                bucket: range,
                seed: config.seed,
                k: k_used,
                passages: picked,
                representative,
            },
        };
        let dppl = diag.delta_ppl();
        diag.spearman_ppl_r = spearman(&dppl, &diag.delta_r()).ok();
        diag.spearman_ppl_e = spearman(&dppl, &diag.delta_e()).ok();
        out.push(diag);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    #[test]
    fn bucket_validation() {
        assert!(BucketSpec::new(vec![(1, 5), (5, 9)], 1).is_err());
        assert!(BucketSpec::new(vec![(6, 5)], 1).is_err());
        assert!(BucketSpec::new(vec![], 1).is_err());
        assert!(BucketSpec::new(vec![(1, 5)], 0).is_err());
        assert!(BucketSpec::new(vec![(9, 12), (1, 5)], 3).is_ok());
    }

    #[test]
    fn default_buckets() {
        let b = BucketSpec::default();
        assert_eq!(b.ranges(), &[(33, 128), (129, 512)]);
        assert_eq!(b.passages_per_bucket(), 100);
    }

    #[test]
    fn sampling_is_seeded_and_filtered() {
        let seqs = (1..=40).map(|n| vec![0u32; n]).collect();
        let corpus = TokenCorpus::new(2, seqs).unwrap();
        let a = sample_bucket(&corpus, (10, 30), 5, 7, 0).unwrap();
        assert_eq!(a, sample_bucket(&corpus, (10, 30), 5, 7, 0).unwrap());
        assert_eq!(a.len(), 5);
        assert!(a.iter().all(|&i| (10..=30).contains(&(i + 1))));
        let all = sample_bucket(&corpus, (38, 100), 10, 7, 0).unwrap();
        assert_eq!(all.len(), 3);
        assert_eq!(
            sample_bucket(&corpus, (41, 50), 5, 7, 0),
            Err(Error::EmptyBucket { min: 41, max: 50 })
        );
    }
}
