//! Teacher-forced forward pass shared by the FP32 checkpoint and the
//! quantized model. Activations, matmul accumulation and softmax run in f64
//! whatever the weight storage.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::model::{ArchConfig, HiddenMatrix, ModelCheckpoint, NormSlot, Proj, SkipSet, ROPE_THETA};
use crate::tensor::{Matrix, Tensor};

/// A linear map `y = W x` with `W` of shape `out_dim x in_dim`.
pub trait LinearMap: Sync {
    fn out_dim(&self) -> usize;
    fn in_dim(&self) -> usize;
    /// Writes `W x` into `out`, accumulating in f64.
    fn apply(&self, x: &[f64], out: &mut [f64]);

    /// Applies the map to every row of `x`.
    fn apply_rows(&self, x: &Matrix) -> Matrix {
        let mut out = Matrix::zeros(x.rows(), self.out_dim());
        for t in 0..x.rows() {
            self.apply(x.row(t), out.row_mut(t));
        }
        out
    }
}

#[inline]
pub(crate) fn dot_f32_f64(w: &[f32], x: &[f64]) -> f64 {
    w.iter().zip(x).map(|(&a, &b)| a as f64 * b).sum()
}

impl LinearMap for Tensor {
    fn out_dim(&self) -> usize {
        self.rows()
    }

    fn in_dim(&self) -> usize {
        self.cols()
    }

    fn apply(&self, x: &[f64], out: &mut [f64]) {
        debug_assert_eq!(x.len(), self.cols());
        for (i, o) in out.iter_mut().enumerate() {
            *o = dot_f32_f64(self.row(i), x);
        }
    }
}

/// Weight access needed by the forward pass.
pub trait DecoderWeights: Sync {
    fn arch(&self) -> &ArchConfig;
    fn embedding_row(&self, token: usize) -> &[f32];
    fn attn_norm(&self, layer: usize) -> &[f32];
    fn mlp_norm(&self, layer: usize) -> &[f32];
    fn final_norm(&self) -> &[f32];
    fn linear(&self, layer: usize, proj: Proj) -> &dyn LinearMap;
    fn lm_head(&self) -> &dyn LinearMap;
}

impl DecoderWeights for ModelCheckpoint {
    fn arch(&self) -> &ArchConfig {
        ModelCheckpoint::arch(self)
    }

    fn embedding_row(&self, token: usize) -> &[f32] {
        self.tensor("embedding").row(token)
    }

    fn attn_norm(&self, layer: usize) -> &[f32] {
        self.norm(layer, NormSlot::Attn).data()
    }

    fn mlp_norm(&self, layer: usize) -> &[f32] {
        self.norm(layer, NormSlot::Mlp).data()
    }

    fn final_norm(&self) -> &[f32] {
        self.tensor("final_norm").data()
    }

    fn linear(&self, layer: usize, proj: Proj) -> &dyn LinearMap {
        self.weight(layer, proj)
    }

    fn lm_head(&self) -> &dyn LinearMap {
        self.tensor("lm_head")
    }
}

pub(crate) fn rms_norm(x: &[f64], gain: &[f32], eps: f64, out: &mut [f64]) {
    let ms = x.iter().map(|v| v * v).sum::<f64>() / x.len() as f64;
    let r = 1.0 / libm::sqrt(ms + eps);
    for ((o, &v), &g) in out.iter_mut().zip(x).zip(gain) {
        *o = v * r * g as f64;
    }
}

fn rms_norm_rows(x: &Matrix, gain: &[f32], eps: f64) -> Matrix {
    let mut out = Matrix::zeros(x.rows(), x.cols());
    for t in 0..x.rows() {
        rms_norm(x.row(t), gain, eps, out.row_mut(t));
    }
    out
}

#[inline]
fn silu(v: f64) -> f64 {
    v / (1.0 + libm::exp(-v))
}

/// Cos/sin tables for rotary embedding, `positions x d_head/2`.
pub(crate) struct Rope {
    half: usize,
    cos: Vec<f64>,
    sin: Vec<f64>,
}

impl Rope {
    pub(crate) fn new(d_head: usize, positions: usize) -> Self {
        let half = d_head / 2;
        let mut cos = Vec::with_capacity(positions * half);
        let mut sin = Vec::with_capacity(positions * half);
        for pos in 0..positions {
            for i in 0..half {
                let freq = libm::pow(ROPE_THETA, -2.0 * i as f64 / d_head as f64);
                let angle = pos as f64 * freq;
                cos.push(libm::cos(angle));
                sin.push(libm::sin(angle));
            }
        }
        Self { half, cos, sin }
    }

    /// Rotates one head slice (rotate-half pairing) in place.
    pub(crate) fn rotate(&self, head: &mut [f64], pos: usize) {
        let h = self.half;
        let (c, s) = (&self.cos[pos * h..(pos + 1) * h], &self.sin[pos * h..(pos + 1) * h]);
        for i in 0..h {
            let (a, b) = (head[i], head[i + h]);
            head[i] = a * c[i] - b * s[i];
            head[i + h] = a * s[i] + b * c[i];
        }
    }
}

pub(crate) fn softmax_in_place(v: &mut [f64]) {
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for x in v.iter_mut() {
        *x = libm::exp(*x - max);
        sum += *x;
    }
    for x in v.iter_mut() {
        *x /= sum;
    }
}

fn log_sum_exp(v: &[f64]) -> f64 {
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    max + libm::log(v.iter().map(|&x| libm::exp(x - max)).sum::<f64>())
}

fn check_sequence(arch: &ArchConfig, seq: &[u32], min_len: usize) -> Result<()> {
    if seq.len() < min_len {
        return Err(Error::SequenceTooShort { len: seq.len(), min: min_len });
    }
    if seq.len() > arch.max_seq_len {
        return Err(Error::SequenceTooLong { len: seq.len(), max: arch.max_seq_len });
    }
    if let Some(pos) = seq.iter().position(|&t| t as usize >= arch.vocab_size) {
        return Err(Error::TokenOutOfRange { seq: 0, pos });
    }
    Ok(())
}

fn check_skip(arch: &ArchConfig, skip: &SkipSet) -> Result<()> {
    match skip.layers().iter().find(|&&l| l >= arch.n_layers) {
        Some(&layer) => Err(Error::LayerOutOfRange { layer, n_layers: arch.n_layers }),
        None => Ok(()),
    }
}

fn embed<M: DecoderWeights + ?Sized>(model: &M, seq: &[u32]) -> Matrix {
    let d = model.arch().d_model;
    let mut x = Matrix::zeros(seq.len(), d);
    for (t, &tok) in seq.iter().enumerate() {
        for (o, &e) in x.row_mut(t).iter_mut().zip(model.embedding_row(tok as usize)) {
            *o = e as f64;
        }
    }
    x
}

/// Adds the output of block `layer` to the residual stream `x`.
fn block<M: DecoderWeights + ?Sized>(model: &M, layer: usize, x: &mut Matrix, rope: &Rope) {
    let arch = model.arch();
    let (t_len, dh) = (x.rows(), arch.d_head);
    let h = rms_norm_rows(x, model.attn_norm(layer), arch.norm_eps);
    let mut q = model.linear(layer, Proj::Q).apply_rows(&h);
    let mut k = model.linear(layer, Proj::K).apply_rows(&h);
    let v = model.linear(layer, Proj::V).apply_rows(&h);
    for t in 0..t_len {
        for head in 0..arch.n_heads {
            rope.rotate(&mut q.row_mut(t)[head * dh..(head + 1) * dh], t);
            rope.rotate(&mut k.row_mut(t)[head * dh..(head + 1) * dh], t);
        }
    }

    let scale = 1.0 / libm::sqrt(dh as f64);
    let mut attn = Matrix::zeros(t_len, arch.n_heads * dh);
    let mut scores = vec![0.0; t_len];
    for head in 0..arch.n_heads {
        let cols = head * dh..(head + 1) * dh;
        for t in 0..t_len {
            let qt = &q.row(t)[cols.clone()];
            for s in 0..=t {
                let ks = &k.row(s)[cols.clone()];
                scores[s] = qt.iter().zip(ks).map(|(a, b)| a * b).sum::<f64>() * scale;
            }
            softmax_in_place(&mut scores[..=t]);
            let out = &mut attn.row_mut(t)[cols.clone()];
            for s in 0..=t {
                let p = scores[s];
                for (o, &vv) in out.iter_mut().zip(&v.row(s)[cols.clone()]) {
                    *o += p * vv;
                }
            }
        }
    }
    let o = model.linear(layer, Proj::O).apply_rows(&attn);
    for t in 0..t_len {
        for (xv, ov) in x.row_mut(t).iter_mut().zip(o.row(t)) {
            *xv += ov;
        }
    }

    let h2 = rms_norm_rows(x, model.mlp_norm(layer), arch.norm_eps);
    let gate = model.linear(layer, Proj::Gate).apply_rows(&h2);
    let up = model.linear(layer, Proj::Up).apply_rows(&h2);
    let mut act = Matrix::zeros(t_len, arch.d_ff);
    for t in 0..t_len {
        for ((a, &g), &u) in act.row_mut(t).iter_mut().zip(gate.row(t)).zip(up.row(t)) {
            *a = silu(g) * u;
        }
    }
    let down = model.linear(layer, Proj::Down).apply_rows(&act);
    for t in 0..t_len {
        for (xv, dv) in x.row_mut(t).iter_mut().zip(down.row(t)) {
            *xv += dv;
        }
    }
}

/// Residual stream after blocks `0..stop`, skipping those in `skip`.
fn residual_stream<M: DecoderWeights + ?Sized>(
    model: &M,
    seq: &[u32],
    skip: &SkipSet,
    stop: usize,
) -> Matrix {
    let arch = model.arch();
    let rope = Rope::new(arch.d_head, seq.len());
    let mut x = embed(model, seq);
    for layer in 0..stop {
        if !skip.contains(layer) {
            block(model, layer, &mut x, &rope);
        }
    }
    x
}

/// Per-token negative log-likelihood `-ln p(x_t | x_<t)` for `t = 1..T`,
/// with every block in `skip` replaced by the identity.
pub fn forward_nll<M: DecoderWeights + ?Sized>(
    model: &M,
    seq: &[u32],
    skip: &SkipSet,
) -> Result<Vec<f64>> {
    let arch = model.arch();
    check_sequence(arch, seq, 2)?;
    check_skip(arch, skip)?;
    let x = residual_stream(model, seq, skip, arch.n_layers);

    let mut normed = vec![0.0; arch.d_model];
    let mut logits = vec![0.0; arch.vocab_size];
    let mut nll = Vec::with_capacity(seq.len() - 1);
    for t in 0..seq.len() - 1 {
        rms_norm(x.row(t), model.final_norm(), arch.norm_eps, &mut normed);
        model.lm_head().apply(&normed, &mut logits);
        nll.push(log_sum_exp(&logits) - logits[seq[t + 1] as usize]);
    }
    Ok(nll)
}

/// Mean per-token NLL of one sequence.
pub fn mean_nll<M: DecoderWeights + ?Sized>(model: &M, seq: &[u32], skip: &SkipSet) -> Result<f64> {
    let nll = forward_nll(model, seq, skip)?;
    Ok(nll.iter().sum::<f64>() / nll.len() as f64)
}

/// The attn_norm output consumed by layer `layer`'s Q/K/V projections.
pub fn capture_hidden<M: DecoderWeights + ?Sized>(
    model: &M,
    seq: &[u32],
    layer: usize,
) -> Result<HiddenMatrix> {
    let arch = model.arch();
    if layer >= arch.n_layers {
        return Err(Error::LayerOutOfRange { layer, n_layers: arch.n_layers });
    }
    check_sequence(arch, seq, 1)?;
    let x = residual_stream(model, seq, &SkipSet::empty(), layer);
    Ok(HiddenMatrix { layer, values: rms_norm_rows(&x, model.attn_norm(layer), arch.norm_eps) })
}

/// `Z[t, :] = W_head . H[t, :]` where `W_head` is rows
/// `head*d_head .. (head+1)*d_head` of `weight`.
pub fn project_activation(
    weight: &Tensor,
    hidden: &HiddenMatrix,
    head: usize,
    d_head: usize,
) -> Result<Matrix> {
    if weight.shape().len() != 2 || weight.cols() != hidden.dim() || d_head == 0 {
        return Err(Error::ShapeMismatch("projection weight".into()));
    }
    if weight.rows() % d_head != 0 {
        return Err(Error::ShapeMismatch("projection weight".into()));
    }
    let n_heads = weight.rows() / d_head;
    if head >= n_heads {
        return Err(Error::HeadOutOfRange { head, n_heads });
    }
    let h = &hidden.values;
    let mut z = Matrix::zeros(h.rows(), d_head);
    for t in 0..h.rows() {
        let x = h.row(t);
        for (j, o) in z.row_mut(t).iter_mut().enumerate() {
            *o = dot_f32_f64(weight.row(head * d_head + j), x);
        }
    }
    Ok(z)
}

/// Single-sequence decoder with a key/value cache. Used to sample fixture
/// corpora from a model; it applies the same math as [`forward_nll`].
pub(crate) struct CachedDecoder<'a, M: DecoderWeights + ?Sized> {
    model: &'a M,
    rope: Rope,
    keys: Vec<Vec<f64>>,
    values: Vec<Vec<f64>>,
    pos: usize,
}

impl<'a, M: DecoderWeights + ?Sized> CachedDecoder<'a, M> {
    pub(crate) fn new(model: &'a M, capacity: usize) -> Self {
        let arch = model.arch();
        Self {
            model,
            rope: Rope::new(arch.d_head, capacity),
            keys: vec![Vec::with_capacity(capacity * arch.d_model); arch.n_layers],
            values: vec![Vec::with_capacity(capacity * arch.d_model); arch.n_layers],
            pos: 0,
        }
    }

    /// Feeds one token and returns next-token logits.
    pub(crate) fn step(&mut self, token: u32) -> Vec<f64> {
        let model = self.model;
        let arch = model.arch();
        let (d, dh, pos) = (arch.d_model, arch.d_head, self.pos);
        let mut x: Vec<f64> = model.embedding_row(token as usize).iter().map(|&v| v as f64).collect();
        let mut h = vec![0.0; d];
        let scale = 1.0 / libm::sqrt(dh as f64);
        for layer in 0..arch.n_layers {
            rms_norm(&x, model.attn_norm(layer), arch.norm_eps, &mut h);
            let mut q = vec![0.0; d];
            let mut k = vec![0.0; d];
            let mut v = vec![0.0; d];
            model.linear(layer, Proj::Q).apply(&h, &mut q);
            model.linear(layer, Proj::K).apply(&h, &mut k);
            model.linear(layer, Proj::V).apply(&h, &mut v);
            for head in 0..arch.n_heads {
                self.rope.rotate(&mut q[head * dh..(head + 1) * dh], pos);
                self.rope.rotate(&mut k[head * dh..(head + 1) * dh], pos);
            }
            self.keys[layer].extend_from_slice(&k);
            self.values[layer].extend_from_slice(&v);
            let (kc, vc) = (&self.keys[layer], &self.values[layer]);
            let mut attn = vec![0.0; d];
            let mut scores = vec![0.0; pos + 1];
            for head in 0..arch.n_heads {
                let cols = head * dh..(head + 1) * dh;
                for (s, sc) in scores.iter_mut().enumerate() {
                    let ks = &kc[s * d..(s + 1) * d][cols.clone()];
                    *sc = q[cols.clone()].iter().zip(ks).map(|(a, b)| a * b).sum::<f64>() * scale;
                }
                softmax_in_place(&mut scores);
                for (s, &p) in scores.iter().enumerate() {
                    let vs = &vc[s * d..(s + 1) * d][cols.clone()];
                    for (o, &vv) in attn[cols.clone()].iter_mut().zip(vs) {
                        *o += p * vv;
                    }
                }
            }
            let mut o = vec![0.0; d];
            model.linear(layer, Proj::O).apply(&attn, &mut o);
            x.iter_mut().zip(&o).for_each(|(a, b)| *a += b);

            rms_norm(&x, model.mlp_norm(layer), arch.norm_eps, &mut h);
            let mut gate = vec![0.0; arch.d_ff];
            let mut up = vec![0.0; arch.d_ff];
            model.linear(layer, Proj::Gate).apply(&h, &mut gate);
            model.linear(layer, Proj::Up).apply(&h, &mut up);
            let act: Vec<f64> = gate.iter().zip(&up).map(|(&g, &u)| silu(g) * u).collect();
            let mut down = vec![0.0; d];
            model.linear(layer, Proj::Down).apply(&act, &mut down);
            x.iter_mut().zip(&down).for_each(|(a, b)| *a += b);
        }
        rms_norm(&x, model.final_norm(), arch.norm_eps, &mut h);
        let mut logits = vec![0.0; arch.vocab_size];
        model.lm_head().apply(&h, &mut logits);
        self.pos += 1;
        logits
    }
}
