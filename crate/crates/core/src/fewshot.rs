//! K-shot sampling, random hyperparameter search and top-3 aggregation.

use alloc::string::{String, ToString};
use alloc::vec::Vec;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::corpus::LabeledSentence;
use crate::eval::bio_to_spans;
use crate::rng::{derive_seed, rng_from_seed, shuffle};
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FewShotSpec {
    pub k: usize,
    pub entity_types: Vec<String>,
    pub seed: u64,
    pub lr_grid: Vec<f64>,
    pub seed_grid: Vec<u64>,
    pub dropout_grid: Vec<f64>,
    pub n_trials: usize,
    pub batch_size: usize,
}

/// `1e-4, 2e-4, ..., 9e-3`.
pub fn default_lr_grid() -> Vec<f64> {
    (1..=90).map(|k| k as f64 / 10_000.0).collect()
}

impl FewShotSpec {
    pub fn new(k: usize, seed: u64) -> Self {
        FewShotSpec {
            k,
            entity_types: ["PER", "LOC", "ORG", "MISC"].iter().map(|s| s.to_string()).collect(),
            seed,
            lr_grid: default_lr_grid(),
            seed_grid: (10..=19).collect(),
            dropout_grid: alloc::vec![0.0, 0.1, 0.2, 0.3],
            n_trials: 20,
            batch_size: 4,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.k == 0 {
            return Err(Error::InvalidConfig("K must be at least 1".into()));
        }
        if self.entity_types.is_empty()
            || self.lr_grid.is_empty()
            || self.seed_grid.is_empty()
            || self.dropout_grid.is_empty()
        {
            return Err(Error::InvalidConfig("few-shot grids must be non-empty".into()));
        }
        Ok(())
    }
}

/// The single span type of a sentence, if it has spans and they all agree.
pub fn single_entity_type(sentence: &LabeledSentence) -> Option<String> {
    let spans = bio_to_spans(&sentence.tags);
    let first = spans.first()?;
    spans.iter().all(|s| s.label == first.label).then(|| first.label.clone())
}

/// Indices of the K-shot sample, grouped by entity type in spec order.
///
/// Each type's eligible pool is shuffled with its own seeded stream and the
/// first K entries are taken, so samples for K and K+1 are nested.
pub fn sample_kshot_indices(train: &[LabeledSentence], spec: &FewShotSpec) -> Result<Vec<usize>> {
    spec.validate()?;
    let types: Vec<Option<String>> = train.iter().map(single_entity_type).collect();
    let mut out = Vec::with_capacity(spec.k * spec.entity_types.len());
    for label in &spec.entity_types {
        let mut pool: Vec<usize> =
            types.iter().enumerate().filter(|(_, t)| t.as_deref() == Some(label.as_str())).map(|(i, _)| i).collect();
        if pool.len() < spec.k {
            return Err(Error::InsufficientShots { label: label.clone(), needed: spec.k, found: pool.len() });
        }
        let mut component = String::from("kshot/");
        component.push_str(label);
        shuffle(&mut pool, &mut rng_from_seed(derive_seed(spec.seed, &component)));
        out.extend_from_slice(&pool[..spec.k]);
    }
    Ok(out)
}

pub fn sample_kshot(train: &[LabeledSentence], spec: &FewShotSpec) -> Result<Vec<LabeledSentence>> {
    Ok(sample_kshot_indices(train, spec)?.into_iter().map(|i| train[i].clone()).collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrialConfig {
    pub trial_id: usize,
    pub lr: f64,
    pub seed: u64,
    pub dropout: f64,
    pub batch_size: usize,
}

/// `n_trials` draws with replacement from the grid cross-product.
pub fn random_hp_trials(spec: &FewShotSpec) -> Result<Vec<TrialConfig>> {
    spec.validate()?;
    if spec.n_trials < 3 {
        return Err(Error::TooFewTrials(spec.n_trials));
    }
    let mut rng = rng_from_seed(derive_seed(spec.seed, "hp-trials"));
    Ok((0..spec.n_trials)
        .map(|trial_id| TrialConfig {
            trial_id,
            lr: spec.lr_grid[rng.random_range(0..spec.lr_grid.len())],
            seed: spec.seed_grid[rng.random_range(0..spec.seed_grid.len())],
            dropout: spec.dropout_grid[rng.random_range(0..spec.dropout_grid.len())],
            batch_size: spec.batch_size,
        })
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrialResult {
    pub trial_id: usize,
    pub lr: f64,
    pub seed: u64,
    pub dropout: f64,
    pub dev_f1: f64,
    pub test_f1: f64,
}

/// Mean test F1 of the three trials with the best dev F1. Ties keep the
/// earlier trial.
pub fn top3_mean(results: &[TrialResult]) -> Result<f64> {
    if results.len() < 3 {
        return Err(Error::TooFewTrials(results.len()));
    }
    let mut order: Vec<usize> = (0..results.len()).collect();
    order.sort_by(|&a, &b| results[b].dev_f1.total_cmp(&results[a].dev_f1));
    Ok(order[..3].iter().map(|&i| results[i].test_f1).sum::<f64>() / 3.0)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn result(i: usize, dev: f64, test: f64) -> TrialResult {
        TrialResult { trial_id: i, lr: 1e-3, seed: 10, dropout: 0.0, dev_f1: dev, test_f1: test }
    }

    #[test]
    fn top3_fixture() {
        let r: Vec<_> = [(0.5, 0.4), (0.6, 0.5), (0.7, 0.6), (0.8, 0.7)]
            .iter()
            .enumerate()
            .map(|(i, &(d, t))| result(i, d, t))
            .collect();
        assert!((top3_mean(&r).unwrap() - 0.6).abs() < 1e-12);
    }

    #[test]
    fn top3_ties_and_edges() {
        let r: Vec<_> = (0..5).map(|i| result(i, 0.5, i as f64)).collect();
        assert_eq!(top3_mean(&r).unwrap(), 1.0);
        assert_eq!(top3_mean(&r[..3]).unwrap(), 1.0);
        assert_eq!(top3_mean(&r[..2]).unwrap_err(), Error::TooFewTrials(2));
    }

    #[test]
    fn trials_come_from_the_grid() {
        let spec = FewShotSpec::new(4, 7);
        let trials = random_hp_trials(&spec).unwrap();
        assert_eq!(trials.len(), 20);
        for t in &trials {
            assert!(spec.lr_grid.contains(&t.lr));
            assert!(spec.seed_grid.contains(&t.seed));
            assert!(spec.dropout_grid.contains(&t.dropout));
            assert_eq!(t.batch_size, 4);
        }
        assert_eq!(trials, random_hp_trials(&spec).unwrap());
        let bad = FewShotSpec { n_trials: 2, ..spec };
        assert!(random_hp_trials(&bad).is_err());
    }

    #[test]
    fn lr_grid_endpoints() {
        let g = default_lr_grid();
        assert_eq!(g.len(), 90);
        assert_eq!(g[0], 1e-4);
        assert_eq!(g[89], 9e-3);
        assert_eq!(g[1], 2e-4);
    }
}
