//! Gradients, AdamW, learning-rate schedules and the LM pretraining loop.

use alloc::boxed::Box;
use alloc::format;
use alloc::vec::Vec;
use core::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::corpus::{reverse_segment, segment_stream, DocumentStore, TokenSegment};
use crate::model::{init_params, loss_and_grads, ModelConfig, Parameters};
use crate::rng::{derive_seed, rng_from_seed};
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use crate::tokenizer::{Vocab, VocabHash};
use crate::{Direction, Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Schedule {
    Cosine,
    LinearToZero,
}

impl core::str::FromStr for Schedule {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cosine" => Ok(Schedule::Cosine),
            "linear" | "linear_to_zero" => Ok(Schedule::LinearToZero),
            other => Err(Error::InvalidConfig(format!("unknown schedule `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub total_steps: u64,
    pub base_lr: f64,
    pub schedule: Schedule,
    pub warmup_steps: u64,
    pub weight_decay: f64,
    pub betas: (f64, f64),
    pub eps: f64,
    pub grad_clip_norm: f64,
    pub seed: u64,
    pub eval_every: u64,
    /// Segment length for LM pretraining.
    pub seq_len: usize,
}

impl TrainConfig {
    /// Desk-scale LM pretraining.
    pub fn lm_desk(seed: u64) -> Self {
        TrainConfig {
            batch_size: 32,
            total_steps: 2_000,
            base_lr: 1e-3,
            schedule: Schedule::Cosine,
            warmup_steps: 0,
            weight_decay: 0.01,
            betas: (0.9, 0.999),
            eps: 1e-8,
            grad_clip_norm: 1.0,
            seed,
            eval_every: 50,
            seq_len: 128,
        }
    }

    /// Large-scale pretraining preset (batch 512, lr 2e-5, cosine, 1,024-token segments).
    pub fn lm_paper(seed: u64) -> Self {
        TrainConfig { batch_size: 512, base_lr: 2e-5, seq_len: 1024, total_steps: 100_000, ..Self::lm_desk(seed) }
    }

    /// Probe training: batch 32, lr 1e-3 decayed linearly to zero.
    pub fn probe(seed: u64) -> Self {
        TrainConfig {
            batch_size: 32,
            total_steps: 0,
            base_lr: 1e-3,
            schedule: Schedule::LinearToZero,
            warmup_steps: 0,
            weight_decay: 0.01,
            betas: (0.9, 0.999),
            eps: 1e-8,
            grad_clip_norm: 0.0,
            seed,
            eval_every: 0,
            seq_len: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.base_lr.is_nan() || self.base_lr <= 0.0 {
            return Err(Error::InvalidConfig(format!("base_lr must be positive, got {}", self.base_lr)));
        }
        if self.batch_size == 0 {
            return Err(Error::InvalidConfig("batch_size must be at least 1".into()));
        }
        Ok(())
    }
}

/// Learning rate at `step`; steps past `total_steps` clamp to the final value.
pub fn lr_at(step: u64, cfg: &TrainConfig) -> f64 {
    let total = cfg.total_steps;
    let step = step.min(total);
    if step < cfg.warmup_steps {
        return cfg.base_lr * step as f64 / cfg.warmup_steps as f64;
    }
    let span = total.saturating_sub(cfg.warmup_steps);
    if span == 0 {
        return 0.0;
    }
    let frac = (step - cfg.warmup_steps) as f64 / span as f64;
    match cfg.schedule {
        Schedule::Cosine => cfg.base_lr * 0.5 * (1.0 + libm::cos(PI * frac)),
        Schedule::LinearToZero => cfg.base_lr * (1.0 - frac),
    }
}

/// AdamW with decoupled weight decay and global-norm clipping.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamW<T> {
    pub m: Vec<Vec<T>>,
    pub v: Vec<Vec<T>>,
    pub t: u64,
}

impl<T: Scalar> AdamW<T> {
    pub fn new<'a, I: IntoIterator<Item = &'a Tensor<T>>>(params: I) -> Self {
        let (m, v) = params.into_iter().map(|p| (alloc::vec![T::zero(); p.len()], alloc::vec![T::zero(); p.len()])).unzip();
        AdamW { m, v, t: 0 }
    }

    pub fn step(&mut self, params: &mut [&mut Tensor<T>], grads: &[&Tensor<T>], lr: f64, cfg: &TrainConfig) -> Result<()> {
        let decay = alloc::vec![true; params.len()];
        self.step_masked(params, grads, lr, cfg, &decay)
    }

    /// One update; `decay[i]` selects which tensors receive weight decay.
    pub fn step_masked(
        &mut self,
        params: &mut [&mut Tensor<T>],
        grads: &[&Tensor<T>],
        lr: f64,
        cfg: &TrainConfig,
        decay: &[bool],
    ) -> Result<()> {
        if params.len() != grads.len() || params.len() != self.m.len() || decay.len() != params.len() {
            return Err(Error::ShapeMismatch(format!(
                "{} params, {} grads, {} moment tensors",
                params.len(),
                grads.len(),
                self.m.len()
            )));
        }
        for (i, (p, g)) in params.iter().zip(grads).enumerate() {
            if p.shape != g.shape || p.len() != self.m[i].len() {
                return Err(Error::ShapeMismatch(format!("tensor {i}: {:?} vs {:?}", p.shape, g.shape)));
            }
        }
        let mut clip = 1.0;
        if cfg.grad_clip_norm > 0.0 {
            let sq: f64 = grads.iter().flat_map(|g| g.data.iter()).map(|x| x.as_f64() * x.as_f64()).sum();
            let norm = libm::sqrt(sq);
            if norm > cfg.grad_clip_norm {
                clip = cfg.grad_clip_norm / norm;
            }
        }
        self.t += 1;
        let (b1, b2) = cfg.betas;
        let bc1 = 1.0 - libm::pow(b1, self.t as f64);
        let bc2 = 1.0 - libm::pow(b2, self.t as f64);
        let clip = T::from_f64(clip);
        let (b1t, b2t) = (T::from_f64(b1), T::from_f64(b2));
        let one = T::one();
        let lr_t = T::from_f64(lr);
        let eps = T::from_f64(cfg.eps);
        let inv_bc1 = T::from_f64(1.0 / bc1);
        let inv_bc2 = T::from_f64(1.0 / bc2);
        for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            let shrink = if decay[i] { T::from_f64(1.0 - lr * cfg.weight_decay) } else { one };
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for j in 0..p.data.len() {
                let gj = g.data[j] * clip;
                m[j] = b1t * m[j] + (one - b1t) * gj;
                v[j] = b2t * v[j] + (one - b2t) * gj * gj;
                let mhat = m[j] * inv_bc1;
                let vhat = v[j] * inv_bc2;
                p.data[j] = p.data[j] * shrink - lr_t * mhat / (vhat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

/// Gradient of the mean next-token loss over `batch` for every parameter.
///
/// `dropout_seed = None` runs deterministically without dropout.
pub fn gradients<T: Scalar>(
    cfg: &ModelConfig,
    params: &Parameters<T>,
    batch: &[TokenSegment],
    dropout_seed: Option<u64>,
) -> Result<(Parameters<T>, T)> {
    if batch.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let seqs: Vec<&[u32]> = batch.iter().map(|s| s.ids.as_slice()).collect();
    let mut rng = dropout_seed.map(rng_from_seed);
    let (loss, grads) = loss_and_grads(cfg, params, &seqs, rng.as_mut())?;
    Ok((grads, loss))
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelCheckpoint {
    pub config: ModelConfig,
    pub params: Parameters<f32>,
    pub vocab_hash: VocabHash,
    pub step: u64,
}

impl ModelCheckpoint {
    pub fn direction(&self) -> Direction {
        self.config.direction
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LogEntry {
    pub step: u64,
    pub loss: f64,
    pub lr: f64,
}

#[derive(Debug, Clone)]
pub struct TrainRun {
    pub checkpoint: ModelCheckpoint,
    /// Loss at every step.
    pub losses: Vec<f64>,
}

#[derive(Debug, Clone, thiserror::Error)]
pub enum TrainError {
    #[error(transparent)]
    Invalid(#[from] Error),
    #[error("divergence: non-finite loss at step {step}")]
    Diverged { step: u64, last_good: Box<ModelCheckpoint> },
}

/// Pretrains a causal LM on `segments` (given in forward order). A backward
/// model sees every segment reversed.
pub fn train_on_segments(
    direction: Direction,
    segments: &[TokenSegment],
    vocab_hash: VocabHash,
    model_cfg: &ModelConfig,
    train_cfg: &TrainConfig,
    mut on_log: impl FnMut(&LogEntry),
) -> core::result::Result<TrainRun, TrainError> {
    train_cfg.validate()?;
    model_cfg.validate()?;
    if model_cfg.direction != direction {
        return Err(Error::DirectionMismatch { expected: direction, found: model_cfg.direction }.into());
    }
    if segments.len() < train_cfg.batch_size {
        return Err(Error::InvalidConfig(format!(
            "{} segments cannot fill a batch of {}",
            segments.len(),
            train_cfg.batch_size
        ))
        .into());
    }
    let data: Vec<TokenSegment> = match direction {
        Direction::Forward => segments.to_vec(),
        Direction::Backward => segments.iter().map(reverse_segment).collect::<Result<_>>()?,
    };

    let mut params: Parameters<f32> = init_params(model_cfg, derive_seed(train_cfg.seed, "init"))?;
    let decay: Vec<bool> = params.tensors().iter().map(|t| t.rank() >= 2).collect();
    let mut opt = AdamW::new(params.tensors());
    let dropout_base = derive_seed(train_cfg.seed, "dropout");
    let mut losses = Vec::with_capacity(train_cfg.total_steps as usize);
    let bs = train_cfg.batch_size;
    let n_batches = data.len() / bs;

    for step in 0..train_cfg.total_steps {
        let b = (step as usize) % n_batches;
        let batch = &data[b * bs..(b + 1) * bs];
        let seed = (model_cfg.dropout_rate > 0.0).then(|| dropout_base.wrapping_add(step));
        let last_good = |params: &Parameters<f32>| {
            Box::new(ModelCheckpoint { config: model_cfg.clone(), params: params.clone(), vocab_hash, step })
        };
        let (grads, loss) = match gradients(model_cfg, &params, batch, seed) {
            Ok(r) => r,
            Err(Error::Divergence { .. }) => return Err(TrainError::Diverged { step, last_good: last_good(&params) }),
            Err(e) => return Err(e.into()),
        };
        let lr = lr_at(step, train_cfg);
        let before = params.clone();
        let grad_refs = grads.tensors();
        opt.step_masked(&mut params.tensors_mut(), &grad_refs, lr, train_cfg, &decay)?;
        if !params.is_finite() {
            return Err(TrainError::Diverged { step, last_good: last_good(&before) });
        }
        let loss = loss as f64;
        losses.push(loss);
        let last = step + 1 == train_cfg.total_steps;
        if (train_cfg.eval_every > 0 && step % train_cfg.eval_every == 0) || last {
            on_log(&LogEntry { step, loss, lr });
        }
    }
    Ok(TrainRun {
        checkpoint: ModelCheckpoint { config: model_cfg.clone(), params, vocab_hash, step: train_cfg.total_steps },
        losses,
    })
}

/// Tokenizes and segments `store`, then trains in `direction`.
pub fn train_lm(
    direction: Direction,
    store: &DocumentStore,
    vocab: &Vocab,
    model_cfg: &ModelConfig,
    train_cfg: &TrainConfig,
    on_log: impl FnMut(&LogEntry),
) -> core::result::Result<TrainRun, TrainError> {
    let segments: Vec<TokenSegment> = segment_stream(store, vocab, train_cfg.seq_len)?.collect();
    train_on_segments(direction, &segments, vocab.digest(), model_cfg, train_cfg, on_log)
}
