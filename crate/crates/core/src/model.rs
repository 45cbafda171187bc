//! Decoder-only causal transformer (GPT-2 layout: learned positions, pre-norm
//! blocks, GELU feed-forward, output projection tied to the token embedding)
//! with an explicit backward pass.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng as _;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::rng::{rng_from_seed, Rng};
use crate::scalar::{matmul, matmul_at, matmul_bt, Scalar};
use crate::tensor::{Matrix, Tensor};
use crate::{Direction, Error, Result};

const LN_EPS: f64 = 1e-5;
const INIT_STD: f64 = 0.02;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub max_seq_len: usize,
    pub dropout_rate: f64,
    pub direction: Direction,
}

impl ModelConfig {
    /// Small default used for local experiments.
    pub fn desk(vocab_size: usize, direction: Direction) -> Self {
        ModelConfig {
            vocab_size,
            d_model: 128,
            n_layers: 4,
            n_heads: 4,
            d_ff: 512,
            max_seq_len: 256,
            dropout_rate: 0.1,
            direction,
        }
    }

    /// GPT-2 base (124M) shape.
    pub fn gpt2_base(vocab_size: usize, direction: Direction) -> Self {
        ModelConfig {
            vocab_size,
            d_model: 768,
            n_layers: 12,
            n_heads: 12,
            d_ff: 3072,
            max_seq_len: 1024,
            dropout_rate: 0.1,
            direction,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if self.vocab_size == 0 || self.d_model == 0 || self.n_heads == 0 || self.max_seq_len == 0 {
            return bad("model dimensions must be positive".into());
        }
        if !self.d_model.is_multiple_of(self.n_heads) {
            return bad(format!("d_model {} not divisible by n_heads {}", self.d_model, self.n_heads));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return bad(format!("dropout_rate {} outside [0, 1)", self.dropout_rate));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams<T> {
    pub ln1_gain: Tensor<T>,
    pub ln1_bias: Tensor<T>,
    pub w_q: Tensor<T>,
    pub b_q: Tensor<T>,
    pub w_k: Tensor<T>,
    pub b_k: Tensor<T>,
    pub w_v: Tensor<T>,
    pub b_v: Tensor<T>,
    pub w_o: Tensor<T>,
    pub b_o: Tensor<T>,
    pub ln2_gain: Tensor<T>,
    pub ln2_bias: Tensor<T>,
    pub w_in: Tensor<T>,
    pub b_in: Tensor<T>,
    pub w_out: Tensor<T>,
    pub b_out: Tensor<T>,
}

macro_rules! layer_fields {
    ($m:ident) => {
        $m!(
            ln1_gain "ln1.gain", ln1_bias "ln1.bias",
            w_q "attn.w_q", b_q "attn.b_q", w_k "attn.w_k", b_k "attn.b_k",
            w_v "attn.w_v", b_v "attn.b_v", w_o "attn.w_o", b_o "attn.b_o",
            ln2_gain "ln2.gain", ln2_bias "ln2.bias",
            w_in "mlp.w_in", b_in "mlp.b_in", w_out "mlp.w_out", b_out "mlp.b_out"
        )
    };
}

/// All weights of one causal LM. Linear weights are stored `in x out`.
#[derive(Debug, Clone, PartialEq)]
pub struct Parameters<T> {
    pub tok_emb: Tensor<T>,
    pub pos_emb: Tensor<T>,
    pub layers: Vec<LayerParams<T>>,
    pub lnf_gain: Tensor<T>,
    pub lnf_bias: Tensor<T>,
}

impl<T: Scalar> Parameters<T> {
    pub fn zeros(cfg: &ModelConfig) -> Self {
        let d = cfg.d_model;
        let z = |s: &[usize]| Tensor::zeros(s);
        Parameters {
            tok_emb: z(&[cfg.vocab_size, d]),
            pos_emb: z(&[cfg.max_seq_len, d]),
            layers: (0..cfg.n_layers)
                .map(|_| LayerParams {
                    ln1_gain: z(&[d]),
                    ln1_bias: z(&[d]),
                    w_q: z(&[d, d]),
                    b_q: z(&[d]),
                    w_k: z(&[d, d]),
                    b_k: z(&[d]),
                    w_v: z(&[d, d]),
                    b_v: z(&[d]),
                    w_o: z(&[d, d]),
                    b_o: z(&[d]),
                    ln2_gain: z(&[d]),
                    ln2_bias: z(&[d]),
                    w_in: z(&[d, cfg.d_ff]),
                    b_in: z(&[cfg.d_ff]),
                    w_out: z(&[cfg.d_ff, d]),
                    b_out: z(&[d]),
                })
                .collect(),
            lnf_gain: z(&[d]),
            lnf_bias: z(&[d]),
        }
    }

    pub fn zeros_like(&self) -> Self {
        let mut p = self.clone();
        for t in p.tensors_mut() {
            t.data.iter_mut().for_each(|v| *v = T::zero());
        }
        p
    }

    /// Tensor names in canonical order, matching [`Parameters::tensors`].
    pub fn names(&self) -> Vec<String> {
        let mut out = vec![String::from("tok_emb"), String::from("pos_emb")];
        for i in 0..self.layers.len() {
            macro_rules! push_names {
                ($($f:ident $n:literal),*) => { $( out.push(format!("layers.{i}.{}", $n)); )* };
            }
            layer_fields!(push_names);
        }
        out.push("ln_f.gain".into());
        out.push("ln_f.bias".into());
        out
    }

    pub fn tensors(&self) -> Vec<&Tensor<T>> {
        let mut out = vec![&self.tok_emb, &self.pos_emb];
        for l in &self.layers {
            macro_rules! push_refs {
                ($($f:ident $n:literal),*) => { $( out.push(&l.$f); )* };
            }
            layer_fields!(push_refs);
        }
        out.push(&self.lnf_gain);
        out.push(&self.lnf_bias);
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor<T>> {
        let mut out = vec![&mut self.tok_emb, &mut self.pos_emb];
        for l in &mut self.layers {
            macro_rules! push_muts {
                ($($f:ident $n:literal),*) => { $( out.push(&mut l.$f); )* };
            }
            layer_fields!(push_muts);
        }
        out.push(&mut self.lnf_gain);
        out.push(&mut self.lnf_bias);
        out
    }

    pub fn n_params(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.is_finite())
    }

    pub fn cast<U: Scalar>(&self) -> Parameters<U> {
        let mut out = Parameters::<U> {
            tok_emb: self.tok_emb.cast(),
            pos_emb: self.pos_emb.cast(),
            layers: Vec::new(),
            lnf_gain: self.lnf_gain.cast(),
            lnf_bias: self.lnf_bias.cast(),
        };
        for l in &self.layers {
            macro_rules! cast_layer {
                ($($f:ident $n:literal),*) => { LayerParams { $( $f: l.$f.cast(), )* } };
            }
            out.layers.push(layer_fields!(cast_layer));
        }
        out
    }

    /// Checks tensor shapes against `cfg`.
    pub fn check_shapes(&self, cfg: &ModelConfig) -> Result<()> {
        let want = Parameters::<T>::zeros(cfg);
        if want.layers.len() != self.layers.len() {
            return Err(Error::ShapeMismatch(format!("{} layers, config says {}", self.layers.len(), cfg.n_layers)));
        }
        for ((name, a), b) in self.names().iter().zip(self.tensors()).zip(want.tensors()) {
            if a.shape != b.shape {
                return Err(Error::ShapeMismatch(format!("{name}: {:?} vs {:?}", a.shape, b.shape)));
            }
        }
        Ok(())
    }
}

/// Normal(0, 0.02²) weights, residual output projections shrunk by
/// `1/sqrt(2 * n_layers)`, layer norms at identity, biases zero.
pub fn init_params<T: Scalar>(cfg: &ModelConfig, seed: u64) -> Result<Parameters<T>> {
    cfg.validate()?;
    let mut rng = rng_from_seed(seed);
    let mut p = Parameters::<T>::zeros(cfg);
    let normal = Normal::new(0.0f64, INIT_STD).expect("valid std");
    let resid = Normal::new(0.0f64, INIT_STD / libm::sqrt(2.0 * cfg.n_layers.max(1) as f64)).expect("valid std");
    let fill = |t: &mut Tensor<T>, dist: &Normal<f64>, rng: &mut Rng| {
        for v in t.data.iter_mut() {
            *v = T::from_f64(dist.sample(rng));
        }
    };
    fill(&mut p.tok_emb, &normal, &mut rng);
    fill(&mut p.pos_emb, &normal, &mut rng);
    for l in &mut p.layers {
        fill(&mut l.w_q, &normal, &mut rng);
        fill(&mut l.w_k, &normal, &mut rng);
        fill(&mut l.w_v, &normal, &mut rng);
        fill(&mut l.w_o, &resid, &mut rng);
        fill(&mut l.w_in, &normal, &mut rng);
        fill(&mut l.w_out, &resid, &mut rng);
        l.ln1_gain.data.fill(T::one());
        l.ln2_gain.data.fill(T::one());
    }
    p.lnf_gain.data.fill(T::one());
    Ok(p)
}

// ---------------------------------------------------------------------------
// Kernels

struct LnCache<T> {
    xhat: Vec<T>,
    rstd: Vec<T>,
    out: Vec<T>,
}

fn layer_norm<T: Scalar>(x: &[T], gain: &[T], bias: &[T], d: usize) -> LnCache<T> {
    let rows = x.len() / d;
    let eps = T::from_f64(LN_EPS);
    let inv_d = T::from_f64(1.0 / d as f64);
    let mut xhat = vec![T::zero(); x.len()];
    let mut out = vec![T::zero(); x.len()];
    let mut rstd = vec![T::zero(); rows];
    for r in 0..rows {
        let xr = &x[r * d..(r + 1) * d];
        let mean = xr.iter().fold(T::zero(), |a, &v| a + v) * inv_d;
        let var = xr.iter().fold(T::zero(), |a, &v| a + (v - mean) * (v - mean)) * inv_d;
        let rs = T::one() / (var + eps).sqrt();
        rstd[r] = rs;
        for c in 0..d {
            let h = (xr[c] - mean) * rs;
            xhat[r * d + c] = h;
            out[r * d + c] = h * gain[c] + bias[c];
        }
    }
    LnCache { xhat, rstd, out }
}

/// Accumulates gain/bias gradients and adds the input gradient into `dx`.
fn layer_norm_backward<T: Scalar>(
    dy: &[T],
    cache: &LnCache<T>,
    gain: &[T],
    d: usize,
    dgain: &mut [T],
    dbias: &mut [T],
    dx: &mut [T],
) {
    let rows = dy.len() / d;
    let inv_d = T::from_f64(1.0 / d as f64);
    let mut dxhat = vec![T::zero(); d];
    for r in 0..rows {
        let dyr = &dy[r * d..(r + 1) * d];
        let xh = &cache.xhat[r * d..(r + 1) * d];
        let mut m1 = T::zero();
        let mut m2 = T::zero();
        for c in 0..d {
            dgain[c] = dgain[c] + dyr[c] * xh[c];
            dbias[c] = dbias[c] + dyr[c];
            dxhat[c] = dyr[c] * gain[c];
            m1 = m1 + dxhat[c];
            m2 = m2 + dxhat[c] * xh[c];
        }
        m1 = m1 * inv_d;
        m2 = m2 * inv_d;
        let rs = cache.rstd[r];
        for c in 0..d {
            dx[r * d + c] = dx[r * d + c] + rs * (dxhat[c] - m1 - xh[c] * m2);
        }
    }
}

fn linear<T: Scalar>(x: &[T], w: &Tensor<T>, b: &Tensor<T>, rows: usize) -> Vec<T> {
    let (din, dout) = (w.shape[0], w.shape[1]);
    let mut out = vec![T::zero(); rows * dout];
    matmul(x, &w.data, &mut out, rows, din, dout, false);
    for r in 0..rows {
        for (o, &bv) in out[r * dout..(r + 1) * dout].iter_mut().zip(&b.data) {
            *o = *o + bv;
        }
    }
    out
}

/// Accumulates `dw`, `db` and adds `dout * w^T` into `dx`.
fn linear_backward<T: Scalar>(
    x: &[T],
    dout: &[T],
    w: &Tensor<T>,
    rows: usize,
    dw: &mut Tensor<T>,
    db: &mut Tensor<T>,
    dx: &mut [T],
) {
    let (din, dn) = (w.shape[0], w.shape[1]);
    matmul_at(x, dout, &mut dw.data, din, rows, dn, true);
    for r in 0..rows {
        for (g, &v) in db.data.iter_mut().zip(&dout[r * dn..(r + 1) * dn]) {
            *g = *g + v;
        }
    }
    matmul_bt(dout, &w.data, dx, rows, dn, din, true);
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

/// `sigmoid(2z)` with `z = c(u + a u^3)`, which equals `(1 + tanh z) / 2`.
fn gelu_gate<T: Scalar>(u: T) -> T {
    let c = T::from_f64(GELU_C);
    let a = T::from_f64(0.044715);
    let z = c * (u + a * u * u * u);
    T::one() / (T::one() + (-(z + z)).exp())
}

fn gelu<T: Scalar>(u: T) -> T {
    u * gelu_gate(u)
}

fn gelu_grad<T: Scalar>(u: T) -> T {
    let c = T::from_f64(GELU_C);
    let a = T::from_f64(0.044715);
    let s = gelu_gate(u);
    let two = T::from_f64(2.0);
    s + two * u * s * (T::one() - s) * c * (T::one() + T::from_f64(3.0) * a * u * u)
}

/// Inverted-dropout mask (`0` or `1/(1-p)`), or `None` when inactive.
fn dropout_mask<T: Scalar>(len: usize, rate: f64, rng: Option<&mut Rng>) -> Option<Vec<T>> {
    let rng = rng?;
    if rate <= 0.0 {
        return None;
    }
    let keep = T::from_f64(1.0 / (1.0 - rate));
    Some((0..len).map(|_| if rng.random::<f64>() < rate { T::zero() } else { keep }).collect())
}

fn apply_mask<T: Scalar>(x: &mut [T], mask: &Option<Vec<T>>) {
    if let Some(m) = mask {
        x.iter_mut().zip(m).for_each(|(v, &k)| *v = *v * k);
    }
}

// ---------------------------------------------------------------------------
// Forward / backward over a batch of equal-length sequences

struct LayerCache<T> {
    ln1: LnCache<T>,
    q: Vec<T>,
    k: Vec<T>,
    v: Vec<T>,
    /// Post-softmax attention weights, `[batch][head][i][j]`, before dropout.
    probs: Vec<T>,
    attn_mask: Option<Vec<T>>,
    z: Vec<T>,
    resid1_mask: Option<Vec<T>>,
    ln2: LnCache<T>,
    u: Vec<T>,
    g: Vec<T>,
    resid2_mask: Option<Vec<T>>,
}

pub(crate) struct ForwardPass<T> {
    batch: usize,
    n: usize,
    ids: Vec<u32>,
    emb_mask: Option<Vec<T>>,
    layers: Vec<LayerCache<T>>,
    /// Residual stream after the last block, `(batch*n) x d`.
    pub(crate) resid: Vec<T>,
}

fn check_ids(cfg: &ModelConfig, ids: &[u32]) -> Result<()> {
    if ids.len() > cfg.max_seq_len {
        return Err(Error::SequenceTooLong { len: ids.len(), max: cfg.max_seq_len });
    }
    if let Some(&bad) = ids.iter().find(|&&i| i as usize >= cfg.vocab_size) {
        return Err(Error::UnknownId(bad));
    }
    Ok(())
}

pub(crate) fn forward_pass<T: Scalar>(
    cfg: &ModelConfig,
    p: &Parameters<T>,
    seqs: &[&[u32]],
    mut rng: Option<&mut Rng>,
) -> Result<ForwardPass<T>> {
    let batch = seqs.len();
    let n = seqs.first().map_or(0, |s| s.len());
    if seqs.iter().any(|s| s.len() != n) {
        return Err(Error::ShapeMismatch("sequences in a batch must share a length".into()));
    }
    for s in seqs {
        check_ids(cfg, s)?;
    }
    let d = cfg.d_model;
    let heads = cfg.n_heads;
    let dh = cfg.head_dim();
    let rows = batch * n;
    let rate = cfg.dropout_rate;
    let ids: Vec<u32> = seqs.iter().flat_map(|s| s.iter().copied()).collect();

    let mut x = vec![T::zero(); rows * d];
    for (r, &id) in ids.iter().enumerate() {
        let pos = r % n.max(1);
        let te = &p.tok_emb.data[id as usize * d..(id as usize + 1) * d];
        let pe = &p.pos_emb.data[pos * d..(pos + 1) * d];
        for c in 0..d {
            x[r * d + c] = te[c] + pe[c];
        }
    }
    let emb_mask = dropout_mask(rows * d, rate, rng.as_deref_mut());
    apply_mask(&mut x, &emb_mask);

    let scale = T::from_f64(1.0 / libm::sqrt(dh as f64));
    let mut layers = Vec::with_capacity(p.layers.len());
    for lp in &p.layers {
        let ln1 = layer_norm(&x, &lp.ln1_gain.data, &lp.ln1_bias.data, d);
        let q = linear(&ln1.out, &lp.w_q, &lp.b_q, rows);
        let k = linear(&ln1.out, &lp.w_k, &lp.b_k, rows);
        let v = linear(&ln1.out, &lp.w_v, &lp.b_v, rows);

        let mut probs = vec![T::zero(); batch * heads * n * n];
        let mut scores = vec![T::zero(); n * n];
        for b in 0..batch {
            for h in 0..heads {
                let off = b * n * d + h * dh;
                T::gemm(
                    n, dh, n, scale,
                    &q[off..], d as isize, 1,
                    &k[off..], 1, d as isize,
                    T::zero(), &mut scores, n as isize, 1,
                );
                let pb = &mut probs[(b * heads + h) * n * n..(b * heads + h + 1) * n * n];
                for i in 0..n {
                    let row = &scores[i * n..i * n + i + 1];
                    let mx = row.iter().fold(T::neg_infinity(), |a, &s| a.max(s));
                    let mut sum = T::zero();
                    for j in 0..=i {
                        let e = (row[j] - mx).exp();
                        pb[i * n + j] = e;
                        sum = sum + e;
                    }
                    let inv = T::one() / sum;
                    for j in 0..=i {
                        pb[i * n + j] = pb[i * n + j] * inv;
                    }
                }
            }
        }
        let attn_mask = dropout_mask(probs.len(), rate, rng.as_deref_mut());
        let mut z = vec![T::zero(); rows * d];
        let mut dropped = vec![T::zero(); n * n];
        for b in 0..batch {
            for h in 0..heads {
                let base = (b * heads + h) * n * n;
                let pb: &[T] = match &attn_mask {
                    Some(m) => {
                        for idx in 0..n * n {
                            dropped[idx] = probs[base + idx] * m[base + idx];
                        }
                        &dropped
                    }
                    None => &probs[base..base + n * n],
                };
                let off = b * n * d + h * dh;
                T::gemm(
                    n, n, dh, T::one(),
                    pb, n as isize, 1,
                    &v[off..], d as isize, 1,
                    T::zero(), &mut z[off..], d as isize, 1,
                );
            }
        }
        let mut a_out = linear(&z, &lp.w_o, &lp.b_o, rows);
        let resid1_mask = dropout_mask(rows * d, rate, rng.as_deref_mut());
        apply_mask(&mut a_out, &resid1_mask);
        for (xv, &av) in x.iter_mut().zip(&a_out) {
            *xv = *xv + av;
        }

        let ln2 = layer_norm(&x, &lp.ln2_gain.data, &lp.ln2_bias.data, d);
        let u = linear(&ln2.out, &lp.w_in, &lp.b_in, rows);
        let g: Vec<T> = u.iter().map(|&uv| gelu(uv)).collect();
        let mut f = linear(&g, &lp.w_out, &lp.b_out, rows);
        let resid2_mask = dropout_mask(rows * d, rate, rng.as_deref_mut());
        apply_mask(&mut f, &resid2_mask);
        for (xv, &fv) in x.iter_mut().zip(&f) {
            *xv = *xv + fv;
        }

        layers.push(LayerCache { ln1, q, k, v, probs, attn_mask, z, resid1_mask, ln2, u, g, resid2_mask });
    }
    Ok(ForwardPass { batch, n, ids, emb_mask, layers, resid: x })
}

/// Backpropagates `d_resid` (gradient w.r.t. the final residual stream) and
/// accumulates parameter gradients into `grads`.
pub(crate) fn backward_pass<T: Scalar>(
    cfg: &ModelConfig,
    p: &Parameters<T>,
    fwd: &ForwardPass<T>,
    mut dx: Vec<T>,
    grads: &mut Parameters<T>,
) {
    let d = cfg.d_model;
    let heads = cfg.n_heads;
    let dh = cfg.head_dim();
    let (batch, n) = (fwd.batch, fwd.n);
    let rows = batch * n;
    let scale = T::from_f64(1.0 / libm::sqrt(dh as f64));

    for (li, (lp, c)) in p.layers.iter().zip(&fwd.layers).enumerate().rev() {
        let gl = &mut grads.layers[li];

        // Feed-forward branch.
        let mut df = dx.clone();
        apply_mask(&mut df, &c.resid2_mask);
        let mut dg = vec![T::zero(); rows * cfg.d_ff];
        linear_backward(&c.g, &df, &lp.w_out, rows, &mut gl.w_out, &mut gl.b_out, &mut dg);
        for (dgv, &uv) in dg.iter_mut().zip(&c.u) {
            *dgv = *dgv * gelu_grad(uv);
        }
        let mut dm = vec![T::zero(); rows * d];
        linear_backward(&c.ln2.out, &dg, &lp.w_in, rows, &mut gl.w_in, &mut gl.b_in, &mut dm);
        layer_norm_backward(&dm, &c.ln2, &lp.ln2_gain.data, d, &mut gl.ln2_gain.data, &mut gl.ln2_bias.data, &mut dx);

        // Attention branch.
        let mut da_out = dx.clone();
        apply_mask(&mut da_out, &c.resid1_mask);
        let mut dz = vec![T::zero(); rows * d];
        linear_backward(&c.z, &da_out, &lp.w_o, rows, &mut gl.w_o, &mut gl.b_o, &mut dz);

        let mut dq = vec![T::zero(); rows * d];
        let mut dk = vec![T::zero(); rows * d];
        let mut dv = vec![T::zero(); rows * d];
        let mut dp = vec![T::zero(); n * n];
        let mut dropped = vec![T::zero(); n * n];
        for b in 0..batch {
            for h in 0..heads {
                let base = (b * heads + h) * n * n;
                let probs = &c.probs[base..base + n * n];
                let off = b * n * d + h * dh;
                let pd: &[T] = match &c.attn_mask {
                    Some(m) => {
                        for idx in 0..n * n {
                            dropped[idx] = probs[idx] * m[base + idx];
                        }
                        &dropped
                    }
                    None => probs,
                };
                // dV = P'^T dZ
                T::gemm(
                    n, n, dh, T::one(),
                    pd, 1, n as isize,
                    &dz[off..], d as isize, 1,
                    T::zero(), &mut dv[off..], d as isize, 1,
                );
                // dP' = dZ V^T
                T::gemm(
                    n, dh, n, T::one(),
                    &dz[off..], d as isize, 1,
                    &c.v[off..], 1, d as isize,
                    T::zero(), &mut dp, n as isize, 1,
                );
                if let Some(m) = &c.attn_mask {
                    for idx in 0..n * n {
                        dp[idx] = dp[idx] * m[base + idx];
                    }
                }
                // Softmax backward over the causal prefix; dp becomes dScores.
                for i in 0..n {
                    let mut dot = T::zero();
                    for j in 0..=i {
                        dot = dot + probs[i * n + j] * dp[i * n + j];
                    }
                    for j in 0..n {
                        dp[i * n + j] = if j <= i { probs[i * n + j] * (dp[i * n + j] - dot) * scale } else { T::zero() };
                    }
                }
                // dQ = dS K, dK = dS^T Q
                T::gemm(
                    n, n, dh, T::one(),
                    &dp, n as isize, 1,
                    &c.k[off..], d as isize, 1,
                    T::zero(), &mut dq[off..], d as isize, 1,
                );
                T::gemm(
                    n, n, dh, T::one(),
                    &dp, 1, n as isize,
                    &c.q[off..], d as isize, 1,
                    T::zero(), &mut dk[off..], d as isize, 1,
                );
            }
        }
        let mut da = vec![T::zero(); rows * d];
        linear_backward(&c.ln1.out, &dq, &lp.w_q, rows, &mut gl.w_q, &mut gl.b_q, &mut da);
        linear_backward(&c.ln1.out, &dk, &lp.w_k, rows, &mut gl.w_k, &mut gl.b_k, &mut da);
        linear_backward(&c.ln1.out, &dv, &lp.w_v, rows, &mut gl.w_v, &mut gl.b_v, &mut da);
        layer_norm_backward(&da, &c.ln1, &lp.ln1_gain.data, d, &mut gl.ln1_gain.data, &mut gl.ln1_bias.data, &mut dx);
    }

    apply_mask(&mut dx, &fwd.emb_mask);
    for (r, &id) in fwd.ids.iter().enumerate() {
        let pos = r % n;
        let src = &dx[r * d..(r + 1) * d];
        let te = &mut grads.tok_emb.data[id as usize * d..(id as usize + 1) * d];
        for c in 0..d {
            te[c] = te[c] + src[c];
        }
        let pe = &mut grads.pos_emb.data[pos * d..(pos + 1) * d];
        for c in 0..d {
            pe[c] = pe[c] + src[c];
        }
    }
}

/// Mean next-token cross-entropy over a batch of equal-length sequences and
/// its gradient with respect to every parameter.
pub fn loss_and_grads<T: Scalar>(
    cfg: &ModelConfig,
    p: &Parameters<T>,
    seqs: &[&[u32]],
    rng: Option<&mut Rng>,
) -> Result<(T, Parameters<T>)> {
    if seqs.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let fwd = forward_pass(cfg, p, seqs, rng)?;
    let d = cfg.d_model;
    let v = cfg.vocab_size;
    let (batch, n) = (fwd.batch, fwd.n);
    if n < 2 {
        return Err(Error::ShapeMismatch("sequences need at least two tokens".into()));
    }
    let rows = batch * n;
    let lnf = layer_norm(&fwd.resid, &p.lnf_gain.data, &p.lnf_bias.data, d);
    let mut logits = vec![T::zero(); rows * v];
    matmul_bt(&lnf.out, &p.tok_emb.data, &mut logits, rows, d, v, false);

    // Softmax in place; logits become dLoss/dLogits.
    let count = batch * (n - 1);
    let inv_count = T::from_f64(1.0 / count as f64);
    let mut loss = T::zero();
    for r in 0..rows {
        let row = &mut logits[r * v..(r + 1) * v];
        let pos = r % n;
        if pos == n - 1 {
            row.fill(T::zero());
            continue;
        }
        let target = fwd.ids[r + 1] as usize;
        let mx = row.iter().fold(T::neg_infinity(), |a, &x| a.max(x));
        let mut sum = T::zero();
        for x in row.iter_mut() {
            *x = (*x - mx).exp();
            sum = sum + *x;
        }
        let lse = mx + sum.ln();
        let target_logit = row[target].ln() + mx;
        loss = loss + (lse - target_logit);
        let inv = T::one() / sum;
        for x in row.iter_mut() {
            *x = *x * inv * inv_count;
        }
        row[target] = row[target] - inv_count;
    }
    let loss = loss * inv_count;
    if !loss.is_finite() {
        return Err(Error::Divergence { step: 0 });
    }

    let mut grads = p.zeros_like();
    // logits = lnf.out * E^T
    matmul_at(&logits, &lnf.out, &mut grads.tok_emb.data, v, rows, d, true);
    let mut dy = vec![T::zero(); rows * d];
    matmul(&logits, &p.tok_emb.data, &mut dy, rows, v, d, false);
    let mut dx = vec![T::zero(); rows * d];
    layer_norm_backward(&dy, &lnf, &p.lnf_gain.data, d, &mut grads.lnf_gain.data, &mut grads.lnf_bias.data, &mut dx);
    backward_pass(cfg, p, &fwd, dx, &mut grads);
    Ok((loss, grads))
}

/// Residual-stream states (before the final layer norm), one row per input
/// position. Row `i` depends on `ids[..=i]` only.
pub fn forward_hidden<T: Scalar>(
    cfg: &ModelConfig,
    p: &Parameters<T>,
    ids: &[u32],
    train_mode: bool,
    seed: u64,
) -> Result<Matrix<T>> {
    let mut rng = rng_from_seed(seed);
    let rng = if train_mode { Some(&mut rng) } else { None };
    let fwd = forward_pass(cfg, p, &[ids], rng)?;
    Ok(Matrix::from_vec(ids.len(), cfg.d_model, fwd.resid))
}

/// Applies the final layer norm row-wise.
pub fn final_norm<T: Scalar>(p: &Parameters<T>, hidden: &Matrix<T>) -> Result<Matrix<T>> {
    let d = p.lnf_gain.len();
    if hidden.cols != d {
        return Err(Error::ShapeMismatch(format!("hidden has {} columns, model has {d}", hidden.cols)));
    }
    let ln = layer_norm(&hidden.data, &p.lnf_gain.data, &p.lnf_bias.data, d);
    Ok(Matrix::from_vec(hidden.rows, d, ln.out))
}

/// `final_norm(hidden) * E^T`.
pub fn lm_logits<T: Scalar>(p: &Parameters<T>, hidden: &Matrix<T>) -> Result<Matrix<T>> {
    let normed = final_norm(p, hidden)?;
    let v = p.tok_emb.shape[0];
    let d = normed.cols;
    let mut out = Matrix::zeros(normed.rows, v);
    matmul_bt(&normed.data, &p.tok_emb.data, &mut out.data, normed.rows, d, v, false);
    Ok(out)
}

/// Mean `-log softmax(logits[i])[targets[i]]` over the first `n - 1` rows;
/// the last row has no next token.
pub fn loss_next_token<T: Scalar>(logits: &Matrix<T>, targets: &[u32]) -> Result<T> {
    if targets.len() + 1 != logits.rows || targets.is_empty() {
        return Err(Error::LengthMismatch(logits.rows, targets.len()));
    }
    let mut total = T::zero();
    for (i, &t) in targets.iter().enumerate() {
        let row = logits.row(i);
        let t = t as usize;
        if t >= row.len() {
            return Err(Error::UnknownId(t as u32));
        }
        let mx = row.iter().fold(T::neg_infinity(), |a, &x| a.max(x));
        let sum = row.iter().fold(T::zero(), |a, &x| a + (x - mx).exp());
        total = total + (mx + sum.ln() - row[t]);
    }
    Ok(total / T::from_f64(targets.len() as f64))
}
