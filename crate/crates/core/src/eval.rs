//! Span extraction, span-level precision/recall/F1, word accuracy and
//! result aggregation.

use alloc::collections::BTreeMap;
use alloc::string::String;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Labeled word range `[start, end)`.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Span {
    pub label: String,
    pub start: usize,
    pub end: usize,
}

impl Span {
    pub fn new(label: impl Into<String>, start: usize, end: usize) -> Self {
        Span { label: label.into(), start, end }
    }
}

fn split_tag(tag: &str) -> Option<(char, &str)> {
    if let Some(t) = tag.strip_prefix("B-") {
        Some(('B', t))
    } else {
        tag.strip_prefix("I-").map(|t| ('I', t))
    }
}

/// IOB2 tags to spans. `B-X` opens a span, `I-X` extends an open `X` span,
/// anything else closes it. An `I-X` with no open `X` span opens one, as the
/// CoNLL scorer does.
pub fn bio_to_spans<S: AsRef<str>>(tags: &[S]) -> Vec<Span> {
    let mut out = Vec::new();
    let mut open: Option<(String, usize)> = None;
    for (i, tag) in tags.iter().enumerate() {
        match split_tag(tag.as_ref()) {
            Some(('I', t)) if open.as_ref().is_some_and(|(l, _)| l == t) => {}
            Some((_, t)) => {
                if let Some((l, s)) = open.take() {
                    out.push(Span::new(l, s, i));
                }
                open = Some((t.into(), i));
            }
            None => {
                if let Some((l, s)) = open.take() {
                    out.push(Span::new(l, s, i));
                }
            }
        }
    }
    if let Some((l, s)) = open {
        out.push(Span::new(l, s, tags.len()));
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Prf {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

impl Prf {
    pub fn from_counts(correct: usize, predicted: usize, gold: usize) -> Self {
        let ratio = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
        let precision = ratio(correct, predicted);
        let recall = ratio(correct, gold);
        Prf { precision, recall, f1: f1(precision, recall) }
    }
}

pub fn f1(precision: f64, recall: f64) -> f64 {
    if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct TypeScores {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    /// Gold spans of this type.
    pub support: u64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct MetricsReport {
    pub per_type: BTreeMap<String, TypeScores>,
    pub micro: Prf,
    pub accuracy: Option<f64>,
    pub seeds: Vec<u64>,
    pub config_digest: String,
}

/// Exact-match span scoring pooled over sentences.
pub fn span_prf(gold: &[Vec<Span>], pred: &[Vec<Span>]) -> Result<MetricsReport> {
    if gold.len() != pred.len() {
        return Err(Error::LengthMismatch(gold.len(), pred.len()));
    }
    // label -> (correct, predicted, gold)
    let mut counts: BTreeMap<&str, (usize, usize, usize)> = BTreeMap::new();
    for (g, p) in gold.iter().zip(pred) {
        let mut unmatched: Vec<&Span> = g.iter().collect();
        for s in g {
            counts.entry(&s.label).or_default().2 += 1;
        }
        for s in p {
            let e = counts.entry(&s.label).or_default();
            e.1 += 1;
            if let Some(k) = unmatched.iter().position(|u| *u == s) {
                unmatched.swap_remove(k);
                e.0 += 1;
            }
        }
    }
    let (mut c, mut pr, mut gd) = (0, 0, 0);
    let mut per_type = BTreeMap::new();
    for (label, &(cc, pp, gg)) in &counts {
        c += cc;
        pr += pp;
        gd += gg;
        let s = Prf::from_counts(cc, pp, gg);
        per_type.insert(
            String::from(*label),
            TypeScores { precision: s.precision, recall: s.recall, f1: s.f1, support: gg as u64 },
        );
    }
    Ok(MetricsReport { per_type, micro: Prf::from_counts(c, pr, gd), ..Default::default() })
}

/// Span scores straight from tag sequences.
pub fn span_prf_tags<S: AsRef<str>>(gold: &[Vec<S>], pred: &[Vec<S>]) -> Result<MetricsReport> {
    let g: Vec<Vec<Span>> = gold.iter().map(|t| bio_to_spans(t)).collect();
    let p: Vec<Vec<Span>> = pred.iter().map(|t| bio_to_spans(t)).collect();
    span_prf(&g, &p)
}

/// Fraction of positions where the tags agree; `0.0` for empty input.
pub fn token_accuracy<S: AsRef<str>>(gold: &[S], pred: &[S]) -> Result<f64> {
    if gold.len() != pred.len() {
        return Err(Error::LengthMismatch(gold.len(), pred.len()));
    }
    if gold.is_empty() {
        return Ok(0.0);
    }
    let hits = gold.iter().zip(pred).filter(|(g, p)| g.as_ref() == p.as_ref()).count();
    Ok(hits as f64 / gold.len() as f64)
}

/// Word accuracy pooled over sentences.
pub fn corpus_accuracy<S: AsRef<str>>(gold: &[Vec<S>], pred: &[Vec<S>]) -> Result<f64> {
    if gold.len() != pred.len() {
        return Err(Error::LengthMismatch(gold.len(), pred.len()));
    }
    let (mut hits, mut total) = (0usize, 0usize);
    for (g, p) in gold.iter().zip(pred) {
        if g.len() != p.len() {
            return Err(Error::LengthMismatch(g.len(), p.len()));
        }
        total += g.len();
        hits += g.iter().zip(p).filter(|(a, b)| a.as_ref() == b.as_ref()).count();
    }
    Ok(if total == 0 { 0.0 } else { hits as f64 / total as f64 })
}

/// Epoch with the highest dev score; the earliest wins ties.
pub fn select_best_epoch(dev_scores: &[(usize, f64)]) -> Option<usize> {
    let mut best: Option<(usize, f64)> = None;
    for &(epoch, score) in dev_scores {
        if best.is_none_or(|(_, s)| score > s) {
            best = Some((epoch, score));
        }
    }
    best.map(|(e, _)| e)
}

/// Arithmetic mean of every metric across runs.
pub fn aggregate_seeds(reports: &[MetricsReport]) -> Result<MetricsReport> {
    let first = reports.first().ok_or(Error::EmptyBatch)?;
    if reports.iter().any(|r| !r.per_type.keys().eq(first.per_type.keys())) {
        return Err(Error::LabelSetMismatch);
    }
    let n = reports.len() as f64;
    let mean = |f: &dyn Fn(&MetricsReport) -> f64| reports.iter().map(f).sum::<f64>() / n;
    let mut per_type = BTreeMap::new();
    for (label, s) in &first.per_type {
        let get = |r: &MetricsReport| r.per_type[label];
        per_type.insert(
            label.clone(),
            TypeScores {
                precision: mean(&|r| get(r).precision),
                recall: mean(&|r| get(r).recall),
                f1: mean(&|r| get(r).f1),
                support: s.support,
            },
        );
    }
    let accuracy = if reports.iter().all(|r| r.accuracy.is_some()) {
        Some(mean(&|r| r.accuracy.unwrap_or(0.0)))
    } else {
        None
    };
    Ok(MetricsReport {
        per_type,
        micro: Prf {
            precision: mean(&|r| r.micro.precision),
            recall: mean(&|r| r.micro.recall),
            f1: mean(&|r| r.micro.f1),
        },
        accuracy,
        seeds: reports.iter().flat_map(|r| r.seeds.iter().copied()).collect(),
        config_digest: first.config_digest.clone(),
    })
}
