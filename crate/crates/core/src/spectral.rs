//! Spectral diagnostics: compactness (exponentiated entropy of the
//! normalised singular values), top-k energy, and their trained-versus-random
//! differences for the Q/K/V projections of one layer.

use alloc::vec::Vec;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::forward::{capture_hidden, project_activation};
use crate::linalg::singular_values;
use crate::model::{ModelCheckpoint, Proj};
use crate::par::map_range;
use crate::tensor::Tensor;

/// Singular values below `DEFAULT_RANK_TOL * sigma_1` do not count toward
/// the numerical rank.
pub const DEFAULT_RANK_TOL: f64 = 1e-10;
/// Upper bound on the default top-k.
pub const DEFAULT_TOP_K: usize = 8;

/// `exp(-sum p_i ln p_i)` with `p_i = sigma_i / sum sigma_j` over the
/// numerical rank. Lies in `[1, rank]`.
pub fn compactness(sigma: &[f64], rank_tol: f64) -> Result<f64> {
    let s1 = match sigma.first() {
        Some(&s) if s > 0.0 => s,
        _ => return Err(Error::AllZeroSpectrum),
    };
    let cutoff = rank_tol * s1;
    let kept: Vec<f64> = sigma.iter().copied().filter(|&s| s > cutoff).collect();
    if kept.len() <= 1 {
        return Ok(1.0);
    }
    let total: f64 = kept.iter().sum();
    let entropy: f64 = kept
        .iter()
        .map(|&s| {
            let p = s / total;
            -p * libm::log(p)
        })
        .sum();
    Ok(libm::exp(entropy))
}

/// Share of squared singular mass held by the `k` leading values.
pub fn topk_energy(sigma: &[f64], k: usize) -> Result<f64> {
    if k == 0 {
        return Err(Error::InvalidTopK);
    }
    let total: f64 = sigma.iter().map(|s| s * s).sum();
    if !(total > 0.0) {
        return Err(Error::AllZeroSpectrum);
    }
    if k >= sigma.len() {
        return Ok(1.0);
    }
    let head: f64 = sigma[..k].iter().map(|s| s * s).sum();
    Ok(head / total)
}

/// `min(8, min(T, d_head))`.
pub fn default_k(seq_len: usize, d_head: usize) -> usize {
    DEFAULT_TOP_K.min(seq_len.min(d_head)).max(1)
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Seed of the random counterpart for `(layer, proj)` under a run seed.
pub fn counterpart_seed(seed: u64, layer: usize, proj: Proj) -> u64 {
    splitmix64(seed ^ splitmix64(((layer as u64) << 8) | proj.index() as u64))
}

fn population_std(values: impl Iterator<Item = f64> + Clone) -> f64 {
    let (n, sum) = values.clone().fold((0usize, 0.0), |(n, s), v| (n + 1, s + v));
    if n == 0 {
        return 0.0;
    }
    let mean = sum / n as f64;
    let var = values.map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
    libm::sqrt(var)
}

/// Untrained stand-in for `weight`: zero-mean Gaussian entries of the same
/// shape, rescaled so their empirical standard deviation equals that of
/// `weight`. Deterministic in `seed`.
pub fn random_counterpart(weight: &Tensor, seed: u64) -> Tensor {
    let target = population_std(weight.data().iter().map(|&v| v as f64));
    if target == 0.0 {
        return Tensor::zeros(weight.shape().to_vec());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let draws: Vec<f64> = (0..weight.len()).map(|_| StandardNormal.sample(&mut rng)).collect();
    let drawn = population_std(draws.iter().copied());
    let factor = if drawn > 0.0 { target / drawn } else { 0.0 };
    let data = draws.iter().map(|&g| (g * factor) as f32).collect();
    Tensor::new(weight.shape().to_vec(), data).expect("shape preserved")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeadSpectrum {
    pub compact_trained: f64,
    pub compact_random: f64,
    pub delta_r: f64,
    pub e_k_trained: f64,
    pub e_k_random: f64,
    pub delta_e: f64,
}

/// One projection of one layer; the scalar fields are means over heads.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProjectionDiag {
    pub proj: Proj,
    pub compact_trained: f64,
    pub compact_random: f64,
    pub delta_r: f64,
    pub e_k_trained: f64,
    pub e_k_random: f64,
    pub delta_e: f64,
    pub heads: Vec<HeadSpectrum>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpectralDiag {
    pub layer: usize,
    pub k_used: usize,
    /// Mean of the per-projection `delta_r`.
    pub delta_r_mean: f64,
    /// Mean of the per-projection `delta_e`.
    pub delta_e_mean: f64,
    pub projections: Vec<ProjectionDiag>,
}

fn mean(xs: impl Iterator<Item = f64>) -> f64 {
    let (n, s) = xs.fold((0usize, 0.0), |(n, s), v| (n + 1, s + v));
    s / n as f64
}

/// Compares trained and random-counterpart activations of every Q/K/V head
/// of `layer` on one passage.
pub fn spectral_diagnose(
    model: &ModelCheckpoint,
    passage: &[u32],
    layer: usize,
    k: Option<usize>,
    seed: u64,
) -> Result<SpectralDiag> {
    let arch = *model.arch();
    if passage.len() < 2 {
        return Err(Error::SequenceTooShort { len: passage.len(), min: 2 });
    }
    let hidden = capture_hidden(model, passage, layer)?;
    let k_used = k.unwrap_or_else(|| default_k(passage.len(), arch.d_head));
    let counterparts: Vec<Tensor> = Proj::QKV
        .iter()
        .map(|&p| random_counterpart(model.weight(layer, p), counterpart_seed(seed, layer, p)))
        .collect();

    let n_heads = arch.n_heads;
    let heads: Vec<Result<HeadSpectrum>> = map_range(Proj::QKV.len() * n_heads, |task| {
        let (pi, head) = (task / n_heads, task % n_heads);
        let trained = project_activation(model.weight(layer, Proj::QKV[pi]), &hidden, head, arch.d_head)?;
        let random = project_activation(&counterparts[pi], &hidden, head, arch.d_head)?;
        let (s, s_rand) = (singular_values(&trained)?, singular_values(&random)?);
        let compact_trained = compactness(&s, DEFAULT_RANK_TOL)?;
        let compact_random = compactness(&s_rand, DEFAULT_RANK_TOL)?;
        let e_k_trained = topk_energy(&s, k_used)?;
        let e_k_random = topk_energy(&s_rand, k_used)?;
        Ok(HeadSpectrum {
            compact_trained,
            compact_random,
            delta_r: (compact_random - compact_trained) / compact_random,
            e_k_trained,
            e_k_random,
            delta_e: e_k_trained - e_k_random,
        })
    });
    let heads = heads.into_iter().collect::<Result<Vec<_>>>()?;

    let projections: Vec<ProjectionDiag> = Proj::QKV
        .iter()
        .enumerate()
        .map(|(pi, &proj)| {
            let hs = &heads[pi * n_heads..(pi + 1) * n_heads];
            ProjectionDiag {
                proj,
                compact_trained: mean(hs.iter().map(|h| h.compact_trained)),
                compact_random: mean(hs.iter().map(|h| h.compact_random)),
                delta_r: mean(hs.iter().map(|h| h.delta_r)),
                e_k_trained: mean(hs.iter().map(|h| h.e_k_trained)),
                e_k_random: mean(hs.iter().map(|h| h.e_k_random)),
                delta_e: mean(hs.iter().map(|h| h.delta_e)),
                heads: hs.to_vec(),
            }
        })
        .collect();

    Ok(SpectralDiag {
        layer,
        k_used,
        delta_r_mean: mean(projections.iter().map(|p| p.delta_r)),
        delta_e_mean: mean(projections.iter().map(|p| p.delta_e)),
        projections,
    })
}
