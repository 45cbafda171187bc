//! Glue shared by the commands and the test suites: word-level
//! representations for labeled sentences, probe fitting with dev-based
//! epoch selection, and test-set scoring.

use bidirep_core::corpus::LabeledSentence;
use bidirep_core::eval::{corpus_accuracy, span_prf_tags, MetricsReport};
use bidirep_core::fusion::{sentence_reps, Pooling, Provenance, RepMatrix, Setting};
use bidirep_core::probe::{predict_tags, train_probe, ProbeConfig, ProbeParams, ProbeTraining};
use bidirep_core::tensor::Matrix;
use bidirep_core::tokenizer::VocabHash;
use bidirep_core::train::ModelCheckpoint;

use crate::error::{Error, Result};

/// Dev metric used for epoch selection.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Metric {
    SpanF1,
    Accuracy,
}

impl Metric {
    /// Word accuracy for POS tagging, span F1 for everything else.
    pub fn for_task(task: &str) -> Self {
        if task == "pos" {
            Metric::Accuracy
        } else {
            Metric::SpanF1
        }
    }

    pub fn score(self, gold: &[Vec<String>], pred: &[Vec<String>]) -> Result<f64> {
        Ok(match self {
            Metric::SpanF1 => span_prf_tags(gold, pred)?.micro.f1,
            Metric::Accuracy => corpus_accuracy(gold, pred)?,
        })
    }
}

#[derive(Debug, Clone, Copy, Default)]
pub struct Backbones<'a> {
    pub forward: Option<&'a ModelCheckpoint>,
    pub backward: Option<&'a ModelCheckpoint>,
    /// Token-level forward states per sentence, used instead of `forward`.
    pub external_forward: Option<&'a [RepMatrix]>,
}

pub fn word_reps(
    setting: Setting,
    backbones: &Backbones<'_>,
    sentences: &[LabeledSentence],
    pooling: Pooling,
) -> Result<Vec<RepMatrix>> {
    if let Some(ext) = backbones.external_forward {
        if ext.len() != sentences.len() {
            return Err(Error::format(format!(
                "external representations cover {} sentences, data has {}",
                ext.len(),
                sentences.len()
            )));
        }
    }
    sentences
        .iter()
        .enumerate()
        .map(|(i, s)| {
            let ext = backbones.external_forward.map(|e| &e[i]);
            Ok(sentence_reps(setting, backbones.forward, backbones.backward, ext, &s.encoding, pooling)?)
        })
        .collect()
}

pub fn tags_of(sentences: &[LabeledSentence]) -> Vec<Vec<String>> {
    sentences.iter().map(|s| s.tags.clone()).collect()
}

/// Concatenates per-sentence matrices row-wise.
pub fn stack(reps: &[RepMatrix]) -> Matrix<f32> {
    let cols = reps.first().map_or(0, |r| r.dim());
    let mut data = Vec::with_capacity(reps.iter().map(|r| r.values.data.len()).sum());
    for r in reps {
        data.extend_from_slice(&r.values.data);
    }
    Matrix::from_vec(data.len().checked_div(cols).unwrap_or(0), cols, data)
}

/// Inverse of [`stack`] given the row count of each sentence.
pub fn unstack(m: &Matrix<f32>, rows: &[usize], provenance: Provenance, vocab_hash: Option<VocabHash>) -> Result<Vec<RepMatrix>> {
    if rows.iter().sum::<usize>() != m.rows {
        return Err(Error::format(format!(
            "representation dump has {} rows, sentences need {}",
            m.rows,
            rows.iter().sum::<usize>()
        )));
    }
    let mut out = Vec::with_capacity(rows.len());
    let mut at = 0;
    for &n in rows {
        let data = m.data[at * m.cols..(at + n) * m.cols].to_vec();
        out.push(RepMatrix { values: Matrix::from_vec(n, m.cols, data), provenance, vocab_hash });
        at += n;
    }
    Ok(out)
}

pub fn predict_all(pp: &ProbeParams<f32>, reps: &[RepMatrix]) -> Result<Vec<Vec<String>>> {
    reps.iter().map(|r| Ok(predict_tags(pp, r)?)).collect()
}

/// Trains a probe, scoring every epoch on dev with `metric`.
pub fn fit_probe(
    train: (&[RepMatrix], &[Vec<String>]),
    dev: (&[RepMatrix], &[Vec<String>]),
    cfg: &ProbeConfig,
    metric: Metric,
) -> Result<ProbeTraining> {
    let mut failure = None;
    let out = train_probe(train.0, train.1, cfg, |_, pp| match predict_all(pp, dev.0).and_then(|p| metric.score(dev.1, &p)) {
        Ok(s) => Some(s),
        Err(e) => {
            failure.get_or_insert(e);
            None
        }
    })?;
    match failure {
        Some(e) => Err(e),
        None => Ok(out),
    }
}

/// Span scores plus word accuracy of `pp` on one split.
pub fn evaluate(pp: &ProbeParams<f32>, reps: &[RepMatrix], gold: &[Vec<String>]) -> Result<MetricsReport> {
    let pred = predict_all(pp, reps)?;
    let mut report = span_prf_tags(gold, &pred)?;
    report.accuracy = Some(corpus_accuracy(gold, &pred)?);
    Ok(report)
}

/// Span F1 of always predicting the most frequent training tag.
pub fn majority_baseline(train: &[Vec<String>], gold: &[Vec<String>]) -> Result<MetricsReport> {
    let mut counts = std::collections::BTreeMap::<&str, usize>::new();
    for t in train.iter().flatten() {
        *counts.entry(t).or_default() += 1;
    }
    let majority = counts.iter().max_by_key(|(_, &c)| c).map_or("O", |(t, _)| *t).to_owned();
    let pred: Vec<Vec<String>> = gold.iter().map(|g| vec![majority.clone(); g.len()]).collect();
    let mut report = span_prf_tags(gold, &pred)?;
    report.accuracy = Some(corpus_accuracy(gold, &pred)?);
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn stack_and_unstack_are_inverse() {
        let a = RepMatrix { values: Matrix::from_vec(2, 2, vec![1.0, 2.0, 3.0, 4.0]), provenance: Provenance::Fused, vocab_hash: None };
        let b = RepMatrix { values: Matrix::from_vec(1, 2, vec![5.0, 6.0]), provenance: Provenance::Fused, vocab_hash: None };
        let m = stack(&[a.clone(), b.clone()]);
        assert_eq!(m.rows, 3);
        let back = unstack(&m, &[2, 1], Provenance::Fused, None).unwrap();
        assert_eq!(back, vec![a, b]);
        assert!(unstack(&m, &[2, 2], Provenance::Fused, None).is_err());
    }

    #[test]
    fn majority_of_o_scores_zero_f1() {
        let train = vec![vec!["O".to_string(), "O".into(), "B-X".into()]];
        let gold = vec![vec!["B-X".to_string(), "O".into()]];
        let r = majority_baseline(&train, &gold).unwrap();
        assert_eq!(r.micro.f1, 0.0);
        assert_eq!(r.accuracy, Some(0.5));
    }
}
