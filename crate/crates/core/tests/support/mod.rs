//! Reference checks shared by the test targets of both crates.
#![allow(dead_code)]

use std::collections::BTreeSet;

use bidirep_core::corpus::{LabeledSentence, TokenSegment};
use bidirep_core::fewshot::{sample_kshot, sample_kshot_indices, single_entity_type, FewShotSpec};
use bidirep_core::fusion::{concat_reps, extract_backward, extract_forward};
use bidirep_core::model::{init_params, loss_and_grads, ModelConfig, Parameters};
use bidirep_core::probe::{probe_loss_and_grads, ProbeParams};
use bidirep_core::rng::rng_from_seed;
use bidirep_core::tokenizer::VocabHash;
use bidirep_core::train::{train_on_segments, ModelCheckpoint, TrainConfig};
use bidirep_core::Direction;
use rand::Rng;

// ---------------------------------------------------------------- gradients

pub const H: f64 = 1e-4;
pub const GRAD_TOL: f64 = 1e-4;

/// `||a - n|| / max(||a||, ||n||, 1e-7)`.
pub fn rel_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let diff: f64 = analytic.iter().zip(numeric).map(|(a, n)| (a - n) * (a - n)).sum::<f64>().sqrt();
    let na: f64 = analytic.iter().map(|a| a * a).sum::<f64>().sqrt();
    let nn: f64 = numeric.iter().map(|a| a * a).sum::<f64>().sqrt();
    // Some gradients are exactly zero (a key bias shifts every score in a
    // row equally); there the central difference is pure rounding, about
    // one ulp of the loss over 2h, so the denominator is floored.
    diff / na.max(nn).max(1e-7)
}

fn central_difference(len: usize, mut at: impl FnMut(usize, f64) -> f64) -> Vec<f64> {
    (0..len).map(|e| (at(e, H) - at(e, -H)) / (2.0 * H)).collect()
}

/// Relative gradient error per parameter tensor of a d_model=8, one-layer,
/// vocab-11 transformer with jittered weights. Dropout masks come from a
/// fixed stream so the loss is a deterministic function of the weights.
pub fn model_grad_errors(dropout_rate: f64) -> Vec<(String, f64)> {
    let cfg = ModelConfig {
        vocab_size: 11,
        d_model: 8,
        n_layers: 1,
        n_heads: 2,
        d_ff: 16,
        max_seq_len: 6,
        dropout_rate,
        direction: Direction::Forward,
    };
    let mut p: Parameters<f64> = init_params(&cfg, 5).unwrap();
    let mut jitter = rng_from_seed(6);
    for t in p.tensors_mut() {
        for v in t.data.iter_mut() {
            *v += jitter.random_range(-0.3..0.3);
        }
    }
    let seqs: Vec<Vec<u32>> = vec![vec![1, 4, 2, 9, 10], vec![3, 3, 7, 0, 5]];
    let refs: Vec<&[u32]> = seqs.iter().map(|s| s.as_slice()).collect();
    let loss = |p: &Parameters<f64>| {
        let mut rng = rng_from_seed(77);
        loss_and_grads(&cfg, p, &refs, (dropout_rate > 0.0).then_some(&mut rng)).unwrap()
    };
    let grads = loss(&p).1;
    let mut out = Vec::new();
    for (ti, name) in p.names().into_iter().enumerate() {
        let len = p.tensors()[ti].len();
        let numeric = central_difference(len, |e, h| {
            let orig = p.tensors()[ti].data[e];
            p.tensors_mut()[ti].data[e] = orig + h;
            let l = loss(&p).0;
            p.tensors_mut()[ti].data[e] = orig;
            l
        });
        out.push((name, rel_error(&grads.tensors()[ti].data, &numeric)));
    }
    out
}

/// Same check for a d=4, three-class probe on five rows.
pub fn probe_grad_errors() -> Vec<(String, f64)> {
    let labels: Vec<String> = ["O", "B-X", "I-X"].iter().map(|s| s.to_string()).collect();
    let mut pp = ProbeParams::<f64>::init(4, labels, 0.0, 9).unwrap();
    let mut rng = rng_from_seed(10);
    let x: Vec<f64> = (0..5 * 4).map(|_| rng.random_range(-1.5..1.5)).collect();
    let y = [0usize, 2, 1, 1, 0];
    let (_, grads) = probe_loss_and_grads(&pp, &x, &y, None).unwrap();
    let mut out = Vec::new();
    for (ti, name) in ["w1", "b1", "w2", "b2"].into_iter().enumerate() {
        let len = pp.tensors()[ti].len();
        let numeric = central_difference(len, |e, h| {
            let orig = pp.tensors()[ti].data[e];
            pp.tensors_mut()[ti].data[e] = orig + h;
            let l = probe_loss_and_grads(&pp, &x, &y, None).unwrap().0;
            pp.tensors_mut()[ti].data[e] = orig;
            l
        });
        out.push((format!("probe.{name}"), rel_error(&grads[ti].data, &numeric)));
    }
    out
}

// ---------------------------------------------------------------- causality

const CAUSAL_VOCAB: usize = 40;

fn causal_model(direction: Direction, seed: u64) -> ModelCheckpoint {
    let config = ModelConfig {
        vocab_size: CAUSAL_VOCAB,
        d_model: 16,
        n_layers: 2,
        n_heads: 2,
        d_ff: 32,
        max_seq_len: 24,
        dropout_rate: 0.1,
        direction,
    };
    let mut params = init_params::<f32>(&config, seed).unwrap();
    // Larger weights so a change anywhere is visible in every row it reaches.
    let mut rng = rng_from_seed(seed ^ 0xabc);
    for t in params.tensors_mut() {
        for v in t.data.iter_mut() {
            *v += rng.random_range(-0.2..0.2);
        }
    }
    ModelCheckpoint { config, params, vocab_hash: VocabHash([0; 32]), step: 0 }
}

fn bits(row: &[f32]) -> Vec<u32> {
    row.iter().map(|x| x.to_bits()).collect()
}

/// Perturbs every position of `n_inputs` random sequences and lists each
/// row that saw a position it should not, or missed one it should.
pub fn causality_violations(n_inputs: usize, seed: u64) -> Vec<String> {
    let fwd = causal_model(Direction::Forward, 1);
    let bwd = causal_model(Direction::Backward, 2);
    let mut rng = rng_from_seed(seed);
    let mut bad = Vec::new();
    let v = CAUSAL_VOCAB as u32;
    for _ in 0..n_inputs {
        let n = rng.random_range(2..=16);
        let ids: Vec<u32> = (0..n).map(|_| rng.random_range(0..v)).collect();
        let f0 = extract_forward(&fwd, &ids).unwrap();
        let b0 = extract_backward(&bwd, &ids).unwrap();
        let c0 = concat_reps(&f0, &b0).unwrap();
        for j in 0..n {
            let mut perturbed = ids.clone();
            perturbed[j] = (ids[j] + rng.random_range(1..v)) % v;
            let f1 = extract_forward(&fwd, &perturbed).unwrap();
            let b1 = extract_backward(&bwd, &perturbed).unwrap();
            let c1 = concat_reps(&f1, &b1).unwrap();
            for i in 0..n {
                if j > i && bits(f0.row(i)) != bits(f1.row(i)) {
                    bad.push(format!("forward row {i} saw position {j} in {ids:?}"));
                }
                if j < i && bits(b0.row(i)) != bits(b1.row(i)) {
                    bad.push(format!("backward row {i} saw position {j} in {ids:?}"));
                }
                if bits(c0.row(i)) == bits(c1.row(i)) {
                    bad.push(format!("fused row {i} blind to position {j} in {ids:?}"));
                }
            }
        }
    }
    bad
}

// ---------------------------------------------------------------- spans

pub const TAGS: [&str; 7] = ["O", "B-PER", "I-PER", "B-LOC", "I-LOC", "B-ORG", "I-ORG"];

fn kind(t: &str) -> Option<(char, &str)> {
    let (p, l) = t.split_once('-')?;
    Some((p.chars().next()?, l))
}

/// Every `[s, e)` labeled `X` that a chunk reader would report: it starts a
/// chunk, continues with `I-X` only, and the next tag does not continue it.
pub fn brute_spans(tags: &[String]) -> BTreeSet<(String, usize, usize)> {
    let n = tags.len();
    let starts = |i: usize, x: &str| match kind(&tags[i]) {
        Some(('B', l)) => l == x,
        Some(('I', l)) => l == x && (i == 0 || kind(&tags[i - 1]).map(|k| k.1) != Some(x)),
        _ => false,
    };
    let cont = |i: usize, x: &str| kind(&tags[i]) == Some(('I', x));
    let labels: BTreeSet<&str> = tags.iter().filter_map(|t| kind(t).map(|k| k.1)).collect();
    let mut out = BTreeSet::new();
    for x in labels {
        for s in 0..n {
            for e in s + 1..=n {
                if starts(s, x) && (s + 1..e).all(|k| cont(k, x)) && (e == n || !cont(e, x)) {
                    out.insert((x.to_string(), s, e));
                }
            }
        }
    }
    out
}

/// Micro precision, recall and F1 from set intersections.
pub fn brute_prf(gold: &[Vec<String>], pred: &[Vec<String>]) -> (f64, f64, f64) {
    let (mut c, mut p, mut g) = (0usize, 0usize, 0usize);
    for (gs, ps) in gold.iter().zip(pred) {
        let (gs, ps) = (brute_spans(gs), brute_spans(ps));
        c += gs.intersection(&ps).count();
        p += ps.len();
        g += gs.len();
    }
    let prec = if p == 0 { 0.0 } else { c as f64 / p as f64 };
    let rec = if g == 0 { 0.0 } else { c as f64 / g as f64 };
    let f = if prec + rec == 0.0 { 0.0 } else { 2.0 * prec * rec / (prec + rec) };
    (prec, rec, f)
}

pub fn random_tags(rng: &mut impl Rng, max_len: usize) -> Vec<String> {
    let n = rng.random_range(0..=max_len);
    (0..n).map(|_| TAGS[rng.random_range(0..TAGS.len())].to_string()).collect()
}

// ---------------------------------------------------------------- LM sanity

fn small_lm(vocab_size: usize, direction: Direction) -> ModelConfig {
    ModelConfig { vocab_size, d_model: 32, n_layers: 2, n_heads: 2, d_ff: 64, max_seq_len: 32, dropout_rate: 0.0, direction }
}

fn small_train(steps: u64) -> TrainConfig {
    TrainConfig { batch_size: 8, total_steps: steps, base_lr: 3e-3, seq_len: 32, ..TrainConfig::lm_desk(9) }
}

fn tail_mean(losses: &[f64]) -> f64 {
    let tail = &losses[losses.len() - 20..];
    tail.iter().sum::<f64>() / tail.len() as f64
}

/// Final loss on a cyclic 8-token pattern and the bound 0.1 ln V.
pub fn repeated_pattern_loss() -> (f64, f64) {
    let v = 16;
    let pattern = [3u32, 7, 1, 12, 5, 9, 0, 14];
    let segs: Vec<TokenSegment> = (0..64)
        .map(|k| TokenSegment::forward((0..32).map(|i| pattern[(i + k) % pattern.len()]).collect()))
        .collect();
    let run = train_on_segments(Direction::Forward, &segs, VocabHash([0; 32]), &small_lm(v, Direction::Forward), &small_train(300), |_| {})
        .unwrap();
    (tail_mean(&run.losses), 0.1 * (v as f64).ln())
}

/// Final forward and backward losses on segments that read the same both ways.
pub fn palindrome_losses() -> (f64, f64) {
    let v = 20;
    let mut rng = rng_from_seed(17);
    let segs: Vec<TokenSegment> = (0..64)
        .map(|_| {
            let half: Vec<u32> = (0..16).map(|_| rng.random_range(0..v as u32)).collect();
            let mut ids = half.clone();
            ids.extend(half.iter().rev());
            TokenSegment::forward(ids)
        })
        .collect();
    let loss = |d| {
        let run = train_on_segments(d, &segs, VocabHash([0; 32]), &small_lm(v, d), &small_train(150), |_| {}).unwrap();
        tail_mean(&run.losses)
    };
    (loss(Direction::Forward), loss(Direction::Backward))
}

// ---------------------------------------------------------------- few-shot

/// Checks sample size 4K, single-type membership and nesting across
/// K in {1, 4, 16} for one seed.
pub fn kshot_violations(pool: &[LabeledSentence], seed: u64) -> Vec<String> {
    let mut bad = Vec::new();
    let mut prev: Option<(usize, Vec<usize>)> = None;
    for k in [1, 4, 16] {
        let spec = FewShotSpec::new(k, seed);
        let idx = match sample_kshot_indices(pool, &spec) {
            Ok(i) => i,
            Err(e) => {
                bad.push(format!("K={k}: {e}"));
                continue;
            }
        };
        if idx.len() != 4 * k {
            bad.push(format!("K={k}: sample has {} sentences", idx.len()));
        }
        if idx.iter().collect::<BTreeSet<_>>().len() != idx.len() {
            bad.push(format!("K={k}: repeated sentence"));
        }
        let sample = sample_kshot(pool, &spec).unwrap();
        for (t, chunk) in spec.entity_types.iter().zip(sample.chunks(k)) {
            for s in chunk {
                if single_entity_type(s).as_deref() != Some(t.as_str()) {
                    bad.push(format!("K={k}: sentence {:?} is not single-type {t}", s.tags));
                }
            }
        }
        if let Some((pk, p)) = &prev {
            for (t, small) in p.chunks(*pk).enumerate() {
                if small != &idx[t * k..t * k + pk] {
                    bad.push(format!("K={k} does not extend K={pk} for type {t}"));
                }
            }
        }
        prev = Some((k, idx));
    }
    bad
}
