//! Test-only references, written independently of the crate's code paths.
#![allow(dead_code)]

use std::collections::BTreeMap;

use lieq_core::model::{ArchConfig, ModelCheckpoint};
use lieq_core::tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn arch(n_layers: usize, d_model: usize, n_heads: usize, vocab: usize) -> ArchConfig {
    ArchConfig {
        n_layers,
        d_model,
        n_heads,
        d_head: d_model / n_heads,
        d_ff: 2 * d_model,
        vocab_size: vocab,
        max_seq_len: 128,
        norm_eps: 1e-5,
    }
}

/// Uniform weights in `[-a, a]` with `a = sqrt(3 / fan_in)`, norm gains near 1.
pub fn random_model(arch: ArchConfig, seed: u64) -> ModelCheckpoint {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let tensors: BTreeMap<String, Tensor> = arch
        .tensor_layout()
        .into_iter()
        .map(|(name, shape)| {
            let n: usize = shape.iter().product();
            let data: Vec<f32> = if name.ends_with("norm") {
                (0..n).map(|_| rng.random_range(0.8f32..1.2)).collect()
            } else {
                let a = if name == "embedding" { 1.0 } else { (3.0 / shape[1] as f32).sqrt() };
                (0..n).map(|_| rng.random_range(-a..a)).collect()
            };
            (name, Tensor::new(shape, data).unwrap())
        })
        .collect();
    ModelCheckpoint::new(arch, tensors).unwrap()
}

pub fn random_seq(rng: &mut ChaCha8Rng, len: usize, vocab: usize) -> Vec<u32> {
    (0..len).map(|_| rng.random_range(0..vocab as u32)).collect()
}

/// Copy of `model` with W_O and W_down of `layer` set to zero.
pub fn zero_block(model: &ModelCheckpoint, layer: usize) -> ModelCheckpoint {
    let mut m = model.clone();
    for name in [format!("layer.{layer}.W_O"), format!("layer.{layer}.W_down")] {
        let shape = m.tensor(&name).shape().to_vec();
        m = m.with_tensor(&name, Tensor::zeros(shape)).unwrap();
    }
    m
}

type Mat = Vec<Vec<f64>>;

fn weight(model: &ModelCheckpoint, name: &str) -> Mat {
    let t = model.tensor(name);
    let (r, c) = (t.shape()[0], t.shape()[1]);
    (0..r).map(|i| (0..c).map(|j| t.data()[i * c + j] as f64).collect()).collect()
}

fn vector(model: &ModelCheckpoint, name: &str) -> Vec<f64> {
    model.tensor(name).data().iter().map(|&v| v as f64).collect()
}

fn matvec(w: &Mat, x: &[f64]) -> Vec<f64> {
    w.iter().map(|row| {
        let mut s = 0.0;
        for j in 0..x.len() {
            s += row[j] * x[j];
        }
        s
    }).collect()
}

fn rmsnorm(x: &[f64], g: &[f64], eps: f64) -> Vec<f64> {
    let mut ss = 0.0;
    for v in x {
        ss += v * v;
    }
    let inv = 1.0 / (ss / x.len() as f64 + eps).sqrt();
    (0..x.len()).map(|i| x[i] * inv * g[i]).collect()
}

fn rope(v: &mut [f64], pos: usize, d_head: usize) {
    let half = d_head / 2;
    for i in 0..half {
        let theta = pos as f64 / 10_000f64.powf((2 * i) as f64 / d_head as f64);
        let (a, b) = (v[i], v[i + half]);
        v[i] = a * theta.cos() - b * theta.sin();
        v[i + half] = a * theta.sin() + b * theta.cos();
    }
}

/// Straight-line FP64 forward. Returns the residual stream entering each
/// layer (index `L` = after the last block) and per-token NLL.
pub fn reference_forward(model: &ModelCheckpoint, seq: &[u32], skip: &[usize]) -> (Vec<Mat>, Vec<f64>) {
    let a = *model.arch();
    let (t_len, dh) = (seq.len(), a.d_head);
    let emb = weight(model, "embedding");
    let mut x: Mat = seq.iter().map(|&t| emb[t as usize].clone()).collect();
    let mut streams = Vec::new();
    for l in 0..a.n_layers {
        streams.push(x.clone());
        if skip.contains(&l) {
            continue;
        }
        let g1 = vector(model, &format!("layer.{l}.attn_norm"));
        let g2 = vector(model, &format!("layer.{l}.mlp_norm"));
        let wq = weight(model, &format!("layer.{l}.W_Q"));
        let wk = weight(model, &format!("layer.{l}.W_K"));
        let wv = weight(model, &format!("layer.{l}.W_V"));
        let wo = weight(model, &format!("layer.{l}.W_O"));
        let wg = weight(model, &format!("layer.{l}.W_gate"));
        let wu = weight(model, &format!("layer.{l}.W_up"));
        let wd = weight(model, &format!("layer.{l}.W_down"));

        let h: Mat = x.iter().map(|r| rmsnorm(r, &g1, a.norm_eps)).collect();
        let mut q: Mat = h.iter().map(|r| matvec(&wq, r)).collect();
        let mut k: Mat = h.iter().map(|r| matvec(&wk, r)).collect();
        let v: Mat = h.iter().map(|r| matvec(&wv, r)).collect();
        for t in 0..t_len {
            for hd in 0..a.n_heads {
                rope(&mut q[t][hd * dh..(hd + 1) * dh], t, dh);
                rope(&mut k[t][hd * dh..(hd + 1) * dh], t, dh);
            }
        }
        let mut att = vec![vec![0.0; a.d_model]; t_len];
        for hd in 0..a.n_heads {
            for t in 0..t_len {
                let mut s = Vec::new();
                for u in 0..=t {
                    let mut dot = 0.0;
                    for c in hd * dh..(hd + 1) * dh {
                        dot += q[t][c] * k[u][c];
                    }
                    s.push(dot / (dh as f64).sqrt());
                }
                let mx = s.iter().cloned().fold(f64::MIN, f64::max);
                let e: Vec<f64> = s.iter().map(|v| (v - mx).exp()).collect();
                let z: f64 = e.iter().sum();
                for u in 0..=t {
                    for c in hd * dh..(hd + 1) * dh {
                        att[t][c] += e[u] / z * v[u][c];
                    }
                }
            }
        }
        for t in 0..t_len {
            let o = matvec(&wo, &att[t]);
            for c in 0..a.d_model {
                x[t][c] += o[c];
            }
            let h2 = rmsnorm(&x[t], &g2, a.norm_eps);
            let gate = matvec(&wg, &h2);
            let up = matvec(&wu, &h2);
            let act: Vec<f64> = (0..a.d_ff).map(|i| gate[i] / (1.0 + (-gate[i]).exp()) * up[i]).collect();
            let dn = matvec(&wd, &act);
            for c in 0..a.d_model {
                x[t][c] += dn[c];
            }
        }
    }
    streams.push(x.clone());
    let gf = vector(model, "final_norm");
    let head = weight(model, "lm_head");
    let mut nll = Vec::new();
    for t in 0..t_len - 1 {
        let logits = matvec(&head, &rmsnorm(&x[t], &gf, a.norm_eps));
        let mx = logits.iter().cloned().fold(f64::MIN, f64::max);
        let lse = mx + logits.iter().map(|v| (v - mx).exp()).sum::<f64>().ln();
        nll.push(lse - logits[seq[t + 1] as usize]);
    }
    (streams, nll)
}

/// attn_norm input to `layer` from the reference forward.
pub fn reference_hidden(model: &ModelCheckpoint, seq: &[u32], layer: usize) -> Mat {
    let (streams, _) = reference_forward(model, seq, &[]);
    let g = vector(model, &format!("layer.{layer}.attn_norm"));
    streams[layer].iter().map(|r| rmsnorm(r, &g, model.arch().norm_eps)).collect()
}

/// Two-level mean perplexity from the reference forward.
pub fn reference_perplexity(model: &ModelCheckpoint, seqs: &[Vec<u32>], skip: &[usize]) -> f64 {
    let mut total = 0.0;
    for s in seqs {
        let (_, nll) = reference_forward(model, s, skip);
        total += nll.iter().sum::<f64>() / nll.len() as f64;
    }
    (total / seqs.len() as f64).exp()
}

/// Singular values via the symmetric eigendecomposition of `Z^T Z`.
pub fn eigen_singular_values(rows: usize, cols: usize, data: &[f64]) -> Vec<f64> {
    let z = nalgebra::DMatrix::from_row_slice(rows, cols, data);
    let gram = if cols <= rows { z.transpose() * &z } else { &z * z.transpose() };
    let eig = nalgebra::SymmetricEigen::new(gram);
    let mut s: Vec<f64> = eig.eigenvalues.iter().map(|&l| l.max(0.0).sqrt()).collect();
    s.sort_by(|a, b| b.partial_cmp(a).unwrap());
    s
}

/// Entropy-exponential compactness and top-k energy from raw formulas.
pub fn reference_compactness(sigma: &[f64]) -> f64 {
    let s1 = sigma[0];
    let kept: Vec<f64> = sigma.iter().cloned().filter(|&s| s > 1e-10 * s1).collect();
    let total: f64 = kept.iter().sum();
    (-kept.iter().map(|s| s / total).map(|p| p * p.ln()).sum::<f64>()).exp()
}

pub fn reference_energy(sigma: &[f64], k: usize) -> f64 {
    let k = k.min(sigma.len());
    sigma[..k].iter().map(|s| s * s).sum::<f64>() / sigma.iter().map(|s| s * s).sum::<f64>()
}

/// Scalar min-max quantizer (zero-inclusive range) returning dequantized
/// values and the scale.
pub fn reference_roundtrip(values: &[f32], bits: u8) -> (Vec<f32>, f32) {
    let levels = ((1u32 << bits) - 1) as f64;
    let lo = values.iter().fold(0.0f64, |m, &v| m.min(v as f64));
    let hi = values.iter().fold(0.0f64, |m, &v| m.max(v as f64));
    if hi == lo {
        return (vec![0.0; values.len()], 1.0);
    }
    let mut scale = ((hi - lo) / levels) as f32;
    while scale as f64 * levels < hi - lo {
        scale = f32::from_bits(scale.to_bits() + 1);
    }
    let z = (-lo / scale as f64).round().clamp(0.0, levels);
    let out = values
        .iter()
        .map(|&v| {
            let c = ((v as f64 / scale as f64).round() + z).clamp(0.0, levels);
            (c as i32 - z as i32) as f32 * scale
        })
        .collect();
    (out, scale)
}
