//! Two-layer classification head trained on frozen word representations:
//! `p = softmax(W2 relu(W1 h + b1) + b2)`.

use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng as _;

use crate::eval::select_best_epoch;
use crate::fusion::RepMatrix;
use crate::rng::{derive_seed, rng_from_seed, shuffle, Rng};
use crate::scalar::{matmul, matmul_at, matmul_bt, Scalar};
use crate::tensor::Tensor;
use crate::train::{lr_at, AdamW, TrainConfig};
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct ProbeParams<T> {
    /// `d x d`, applied as `W1 h`.
    pub w1: Tensor<T>,
    pub b1: Tensor<T>,
    /// `c x d`.
    pub w2: Tensor<T>,
    pub b2: Tensor<T>,
    pub label_set: Vec<String>,
    pub dropout_rate: f64,
}

impl<T: Scalar> ProbeParams<T> {
    pub fn zeros(d: usize, label_set: Vec<String>, dropout_rate: f64) -> Result<Self> {
        check_labels(&label_set)?;
        let c = label_set.len();
        Ok(ProbeParams {
            w1: Tensor::zeros(&[d, d]),
            b1: Tensor::zeros(&[d]),
            w2: Tensor::zeros(&[c, d]),
            b2: Tensor::zeros(&[c]),
            label_set,
            dropout_rate,
        })
    }

    /// Uniform(-1/sqrt(d), 1/sqrt(d)) for every weight and bias.
    pub fn init(d: usize, label_set: Vec<String>, dropout_rate: f64, seed: u64) -> Result<Self> {
        let mut p = Self::zeros(d, label_set, dropout_rate)?;
        let bound = 1.0 / libm::sqrt(d.max(1) as f64);
        let mut rng = rng_from_seed(seed);
        for t in p.tensors_mut() {
            for v in t.data.iter_mut() {
                *v = T::from_f64(rng.random_range(-bound..bound));
            }
        }
        Ok(p)
    }

    pub fn dim(&self) -> usize {
        self.w1.shape[1]
    }

    pub fn n_classes(&self) -> usize {
        self.label_set.len()
    }

    pub fn tensors(&self) -> [&Tensor<T>; 4] {
        [&self.w1, &self.b1, &self.w2, &self.b2]
    }

    pub fn tensors_mut(&mut self) -> [&mut Tensor<T>; 4] {
        [&mut self.w1, &mut self.b1, &mut self.w2, &mut self.b2]
    }

    pub fn label_index(&self, tag: &str) -> Result<usize> {
        self.label_set.iter().position(|l| l == tag).ok_or_else(|| Error::UnknownLabel(tag.into()))
    }
}

fn check_labels(labels: &[String]) -> Result<()> {
    for (i, l) in labels.iter().enumerate() {
        if labels[..i].contains(l) {
            return Err(Error::InvalidConfig(alloc::format!("duplicate label `{l}`")));
        }
    }
    if labels.is_empty() {
        return Err(Error::InvalidConfig("empty label set".into()));
    }
    Ok(())
}

/// Label set in canonical order: `O` first when present, the rest sorted.
pub fn label_set_from<'a, I: IntoIterator<Item = &'a String>>(tags: I) -> Vec<String> {
    let mut set: alloc::collections::BTreeSet<&String> = tags.into_iter().collect();
    let mut out = Vec::with_capacity(set.len());
    if let Some(o) = set.iter().find(|t| t.as_str() == "O").copied() {
        set.remove(o);
        out.push(o.clone());
    }
    out.extend(set.into_iter().cloned());
    out
}

struct Pass<T> {
    h: Vec<T>,
    a: Vec<T>,
    r: Vec<T>,
    r_mask: Option<Vec<T>>,
    probs: Vec<T>,
}

fn mask<T: Scalar>(len: usize, rate: f64, rng: Option<&mut Rng>) -> Option<Vec<T>> {
    let rng = rng?;
    if rate <= 0.0 {
        return None;
    }
    let keep = T::from_f64(1.0 / (1.0 - rate));
    Some((0..len).map(|_| if rng.random::<f64>() < rate { T::zero() } else { keep }).collect())
}

fn forward_batch<T: Scalar>(pp: &ProbeParams<T>, x: &[T], rows: usize, mut rng: Option<&mut Rng>) -> Pass<T> {
    let d = pp.dim();
    let c = pp.n_classes();
    let mut h = x.to_vec();
    if let Some(m) = mask::<T>(h.len(), pp.dropout_rate, rng.as_deref_mut()) {
        h.iter_mut().zip(&m).for_each(|(v, &k)| *v = *v * k);
    }
    let mut a = vec![T::zero(); rows * d];
    matmul_bt(&h, &pp.w1.data, &mut a, rows, d, d, false);
    for row in a.chunks_mut(d) {
        row.iter_mut().zip(&pp.b1.data).for_each(|(v, &b)| *v = *v + b);
    }
    let mut r: Vec<T> = a.iter().map(|&v| v.max(T::zero())).collect();
    let r_mask = mask::<T>(r.len(), pp.dropout_rate, rng);
    if let Some(m) = &r_mask {
        r.iter_mut().zip(m).for_each(|(v, &k)| *v = *v * k);
    }
    let mut probs = vec![T::zero(); rows * c];
    matmul_bt(&r, &pp.w2.data, &mut probs, rows, d, c, false);
    for row in probs.chunks_mut(c) {
        row.iter_mut().zip(&pp.b2.data).for_each(|(v, &b)| *v = *v + b);
        softmax_in_place(row);
    }
    Pass { h, a, r, r_mask, probs }
}

fn softmax_in_place<T: Scalar>(row: &mut [T]) {
    let mx = row.iter().fold(T::neg_infinity(), |a, &v| a.max(v));
    let mut sum = T::zero();
    for v in row.iter_mut() {
        *v = (*v - mx).exp();
        sum = sum + *v;
    }
    row.iter_mut().for_each(|v| *v = *v / sum);
}

/// Class distribution for one representation vector.
pub fn probe_forward<T: Scalar>(pp: &ProbeParams<T>, h: &[T], train_mode: bool, seed: u64) -> Result<Vec<T>> {
    if h.len() != pp.dim() {
        return Err(Error::ShapeMismatch(alloc::format!("input has {} dims, probe expects {}", h.len(), pp.dim())));
    }
    let mut rng = rng_from_seed(seed);
    Ok(forward_batch(pp, h, 1, train_mode.then_some(&mut rng)).probs)
}

/// Mean cross-entropy over `rows` examples and gradients for `[w1, b1, w2, b2]`.
pub fn probe_loss_and_grads<T: Scalar>(
    pp: &ProbeParams<T>,
    x: &[T],
    labels: &[usize],
    rng: Option<&mut Rng>,
) -> Result<(T, [Tensor<T>; 4])> {
    let d = pp.dim();
    let c = pp.n_classes();
    let rows = labels.len();
    if x.len() != rows * d || rows == 0 {
        return Err(Error::ShapeMismatch(alloc::format!("{} values for {rows} rows of {d}", x.len())));
    }
    let pass = forward_batch(pp, x, rows, rng);
    let inv = T::from_f64(1.0 / rows as f64);
    let mut loss = T::zero();
    let mut dz = pass.probs.clone();
    for (r, &y) in labels.iter().enumerate() {
        if y >= c {
            return Err(Error::UnknownLabel(alloc::format!("#{y}")));
        }
        loss = loss - pass.probs[r * c + y].ln();
        dz[r * c + y] = dz[r * c + y] - T::one();
    }
    dz.iter_mut().for_each(|v| *v = *v * inv);

    let mut gw2 = Tensor::zeros(&[c, d]);
    matmul_at(&dz, &pass.r, &mut gw2.data, c, rows, d, false);
    let mut gb2 = Tensor::zeros(&[c]);
    for row in dz.chunks(c) {
        gb2.data.iter_mut().zip(row).for_each(|(g, &v)| *g = *g + v);
    }
    let mut da = vec![T::zero(); rows * d];
    matmul(&dz, &pp.w2.data, &mut da, rows, c, d, false);
    if let Some(m) = &pass.r_mask {
        da.iter_mut().zip(m).for_each(|(v, &k)| *v = *v * k);
    }
    da.iter_mut().zip(&pass.a).for_each(|(g, &a)| {
        if a <= T::zero() {
            *g = T::zero();
        }
    });
    let mut gw1 = Tensor::zeros(&[d, d]);
    matmul_at(&da, &pass.h, &mut gw1.data, d, rows, d, false);
    let mut gb1 = Tensor::zeros(&[d]);
    for row in da.chunks(d) {
        gb1.data.iter_mut().zip(row).for_each(|(g, &v)| *g = *g + v);
    }
    Ok((loss * inv, [gw1, gb1, gw2, gb2]))
}

/// Argmax tag per row; ties go to the lowest label index.
pub fn predict_tags(pp: &ProbeParams<f32>, reps: &RepMatrix) -> Result<Vec<String>> {
    Ok(predict_indices(pp, reps)?.into_iter().map(|i| pp.label_set[i].clone()).collect())
}

pub fn predict_indices(pp: &ProbeParams<f32>, reps: &RepMatrix) -> Result<Vec<usize>> {
    if reps.dim() != pp.dim() {
        return Err(Error::ShapeMismatch(alloc::format!("reps have {} dims, probe expects {}", reps.dim(), pp.dim())));
    }
    if reps.rows() == 0 {
        return Ok(Vec::new());
    }
    let pass = forward_batch(pp, &reps.values.data, reps.rows(), None);
    Ok(pass.probs.chunks(pp.n_classes()).map(argmax).collect())
}

fn argmax(row: &[f32]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProbeConfig {
    /// Batch size, learning rate, schedule, AdamW settings and seed.
    pub train: TrainConfig,
    pub epochs: usize,
    pub dropout: f64,
    /// Fixed label order; derived from the training tags when `None`.
    pub label_set: Option<Vec<String>>,
}

impl ProbeConfig {
    pub fn full_data(seed: u64) -> Self {
        ProbeConfig { train: TrainConfig::probe(seed), epochs: 30, dropout: 0.1, label_set: None }
    }
}

#[derive(Debug, Clone)]
pub struct ProbeTraining {
    pub params: ProbeParams<f32>,
    /// `(epoch, dev score)` for every epoch that was validated (1-based).
    pub dev_scores: Vec<(usize, f64)>,
    pub best_epoch: usize,
}

/// Trains the probe on precomputed word-level representations.
///
/// `validate(epoch, params)` is called after every epoch; the returned
/// parameters are those of the epoch with the best score (earliest on ties),
/// or of the last epoch when `validate` always returns `None`.
pub fn train_probe(
    reps: &[RepMatrix],
    labels: &[Vec<String>],
    cfg: &ProbeConfig,
    mut validate: impl FnMut(usize, &ProbeParams<f32>) -> Option<f64>,
) -> Result<ProbeTraining> {
    if reps.len() != labels.len() {
        return Err(Error::LengthMismatch(reps.len(), labels.len()));
    }
    cfg.train.validate()?;
    let d = reps.first().map(|r| r.dim()).ok_or(Error::EmptyBatch)?;
    let label_set = match &cfg.label_set {
        Some(ls) => ls.clone(),
        None => label_set_from(labels.iter().flatten()),
    };
    let seed = cfg.train.seed;
    let mut params = ProbeParams::<f32>::init(d, label_set, cfg.dropout, derive_seed(seed, "probe-init"))?;

    let mut x: Vec<f32> = Vec::new();
    let mut y: Vec<usize> = Vec::new();
    for (r, tags) in reps.iter().zip(labels) {
        if r.rows() != tags.len() {
            return Err(Error::LengthMismatch(r.rows(), tags.len()));
        }
        if r.dim() != d {
            return Err(Error::ShapeMismatch(alloc::format!("representation width {} vs {d}", r.dim())));
        }
        x.extend_from_slice(&r.values.data);
        for t in tags {
            y.push(params.label_index(t)?);
        }
    }
    let n = y.len();
    if n == 0 {
        return Err(Error::EmptyBatch);
    }

    let bs = cfg.train.batch_size;
    let per_epoch = n.div_ceil(bs);
    let schedule = TrainConfig { total_steps: (per_epoch * cfg.epochs) as u64, ..cfg.train.clone() };
    let mut opt = AdamW::new(params.tensors());
    let decay = [true, false, true, false];
    let mut order: Vec<usize> = (0..n).collect();
    let mut order_rng = rng_from_seed(derive_seed(seed, "probe-order"));
    let mut drop_rng = rng_from_seed(derive_seed(seed, "probe-dropout"));
    let mut step = 0u64;
    let mut snapshots: Vec<ProbeParams<f32>> = Vec::new();
    let mut dev_scores = Vec::new();
    let mut bx: Vec<f32> = Vec::with_capacity(bs * d);
    let mut by: Vec<usize> = Vec::with_capacity(bs);

    for epoch in 1..=cfg.epochs {
        shuffle(&mut order, &mut order_rng);
        for chunk in order.chunks(bs) {
            bx.clear();
            by.clear();
            for &i in chunk {
                bx.extend_from_slice(&x[i * d..(i + 1) * d]);
                by.push(y[i]);
            }
            let (loss, grads) = probe_loss_and_grads(&params, &bx, &by, Some(&mut drop_rng))?;
            if !loss.is_finite() {
                return Err(Error::Divergence { step });
            }
            let lr = lr_at(step, &schedule);
            let g = [&grads[0], &grads[1], &grads[2], &grads[3]];
            opt.step_masked(&mut params.tensors_mut(), &g, lr, &schedule, &decay)?;
            step += 1;
        }
        if let Some(score) = validate(epoch, &params) {
            dev_scores.push((epoch, score));
            snapshots.push(params.clone());
        }
    }

    let (params, best_epoch) = match select_best_epoch(&dev_scores) {
        Some(best) => {
            let idx = dev_scores.iter().position(|&(e, _)| e == best).expect("selected epoch was scored");
            (snapshots.swap_remove(idx), best)
        }
        None => (params, cfg.epochs),
    };
    Ok(ProbeTraining { params, dev_scores, best_epoch })
}
