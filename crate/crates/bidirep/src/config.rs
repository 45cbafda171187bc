//! Line-oriented `key = value` run configuration with dotted section keys.

use std::collections::BTreeMap;
use std::path::Path;
use std::str::FromStr;

use bidirep_core::fewshot::FewShotSpec;
use bidirep_core::fusion::{Pooling, Setting};
use bidirep_core::model::ModelConfig;
use bidirep_core::probe::ProbeConfig;
use bidirep_core::train::{Schedule, TrainConfig};
use bidirep_core::Direction;

use crate::error::{Error, IoContext, Result};
use crate::formats::sha256_hex;

#[derive(Debug, Clone, Default, PartialEq)]
pub struct RunConfig {
    values: BTreeMap<String, String>,
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| Error::Config(format!("line {}: expected `key = value`", i + 1)))?;
            cfg.set(k.trim(), v.trim())?;
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path).at(path)?)
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        if key.is_empty() || key.contains(char::is_whitespace) {
            return Err(Error::Config(format!("invalid key `{key}`")));
        }
        self.values.insert(key.to_owned(), value.to_owned());
        Ok(())
    }

    /// Applies a `key=value` override.
    pub fn apply_override(&mut self, kv: &str) -> Result<()> {
        let (k, v) = kv.split_once('=').ok_or_else(|| Error::Config(format!("override `{kv}` is not key=value")))?;
        self.set(k.trim(), v.trim())
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.values.get(key).map(String::as_str)
    }

    pub fn parsed<T: FromStr>(&self, key: &str) -> Result<Option<T>> {
        self.get(key)
            .map(|v| v.parse::<T>().map_err(|_| Error::Config(format!("cannot parse `{key} = {v}`"))))
            .transpose()
    }

    pub fn or<T: FromStr>(&self, key: &str, default: T) -> Result<T> {
        Ok(self.parsed(key)?.unwrap_or(default))
    }

    pub fn list(&self, key: &str) -> Option<Vec<String>> {
        self.get(key).map(|v| v.split(',').map(|s| s.trim().to_owned()).filter(|s| !s.is_empty()).collect())
    }

    /// SHA-256 over the sorted `key=value` lines.
    pub fn digest(&self) -> String {
        let canon: String = self.values.iter().map(|(k, v)| format!("{k}={v}\n")).collect();
        sha256_hex(canon.as_bytes())
    }

    /// Digest of the keys under the given prefixes only, so that artifacts
    /// are not invalidated by unrelated settings.
    pub fn digest_of(&self, prefixes: &[&str]) -> String {
        let canon: String = self
            .values
            .iter()
            .filter(|(k, _)| prefixes.iter().any(|p| k.starts_with(p)))
            .map(|(k, v)| format!("{k}={v}\n"))
            .collect();
        sha256_hex(canon.as_bytes())
    }

    pub fn seed(&self) -> Result<u64> {
        match self.parsed::<u64>("seed")? {
            Some(s) => Ok(s),
            None => match std::env::var("BIDIREP_SEED") {
                Ok(v) => v.trim().parse().map_err(|_| Error::Config(format!("BIDIREP_SEED `{v}` is not an integer"))),
                Err(_) => Ok(0),
            },
        }
    }

    pub fn model_config(&self, vocab_size: usize, direction: Direction) -> Result<ModelConfig> {
        let base = ModelConfig::desk(vocab_size, direction);
        let cfg = ModelConfig {
            d_model: self.or("model.d_model", base.d_model)?,
            n_layers: self.or("model.n_layers", base.n_layers)?,
            n_heads: self.or("model.n_heads", base.n_heads)?,
            d_ff: self.or("model.d_ff", base.d_ff)?,
            max_seq_len: self.or("model.max_seq_len", base.max_seq_len)?,
            dropout_rate: self.or("model.dropout", base.dropout_rate)?,
            ..base
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn lm_train_config(&self) -> Result<TrainConfig> {
        let base = TrainConfig::lm_desk(self.seed()?);
        let cfg = TrainConfig {
            batch_size: self.or("train.batch_size", base.batch_size)?,
            total_steps: self.or("train.total_steps", base.total_steps)?,
            base_lr: self.or("train.lr", base.base_lr)?,
            schedule: self.or::<Schedule>("train.schedule", base.schedule)?,
            warmup_steps: self.or("train.warmup_steps", base.warmup_steps)?,
            weight_decay: self.or("train.weight_decay", base.weight_decay)?,
            grad_clip_norm: self.or("train.grad_clip", base.grad_clip_norm)?,
            eval_every: self.or("train.eval_every", base.eval_every)?,
            seq_len: self.or("train.seq_len", base.seq_len)?,
            ..base
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn probe_config(&self) -> Result<ProbeConfig> {
        let base = ProbeConfig::full_data(self.seed()?);
        let train = TrainConfig {
            batch_size: self.or("probe.batch_size", base.train.batch_size)?,
            base_lr: self.or("probe.lr", base.train.base_lr)?,
            weight_decay: self.or("probe.weight_decay", base.train.weight_decay)?,
            ..base.train.clone()
        };
        Ok(ProbeConfig {
            train,
            epochs: self.or("probe.epochs", base.epochs)?,
            dropout: self.or("probe.dropout", base.dropout)?,
            label_set: self.list("probe.label_set"),
        })
    }

    pub fn fewshot_spec(&self) -> Result<FewShotSpec> {
        let base = FewShotSpec::new(self.or("fewshot.k", 4)?, self.or("fewshot.seed", self.seed()?)?);
        let parse_list = |key: &str| -> Result<Option<Vec<f64>>> {
            self.list(key)
                .map(|xs| xs.iter().map(|x| x.parse().map_err(|_| Error::Config(format!("bad number in {key}")))).collect())
                .transpose()
        };
        let seeds = self
            .list("fewshot.seed_grid")
            .map(|xs| xs.iter().map(|x| x.parse().map_err(|_| Error::Config("bad fewshot.seed_grid".into()))).collect())
            .transpose()?;
        let spec = FewShotSpec {
            entity_types: self.list("fewshot.entity_types").unwrap_or(base.entity_types.clone()),
            lr_grid: parse_list("fewshot.lr_grid")?.unwrap_or(base.lr_grid.clone()),
            seed_grid: seeds.unwrap_or(base.seed_grid.clone()),
            dropout_grid: parse_list("fewshot.dropout_grid")?.unwrap_or(base.dropout_grid.clone()),
            n_trials: self.or("fewshot.n_trials", base.n_trials)?,
            batch_size: self.or("fewshot.batch_size", base.batch_size)?,
            ..base
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn setting(&self) -> Result<Setting> {
        self.or("setting", Setting::Concat)
    }

    pub fn pooling(&self) -> Result<Pooling> {
        match self.get("pooling").unwrap_or("first") {
            "first" => Ok(Pooling::First),
            "mean" => Ok(Pooling::Mean),
            other => Err(Error::Config(format!("unknown pooling `{other}`"))),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parse_and_override() {
        let mut c = RunConfig::parse("# run\nseed = 7\nmodel.d_model = 64  # narrow\n\ntrain.schedule=linear\n").unwrap();
        assert_eq!(c.seed().unwrap(), 7);
        let m = c.model_config(300, Direction::Forward).unwrap();
        assert_eq!(m.d_model, 64);
        assert_eq!(c.lm_train_config().unwrap().schedule, Schedule::LinearToZero);
        c.apply_override("model.d_model=32").unwrap();
        assert_eq!(c.model_config(300, Direction::Forward).unwrap().d_model, 32);
    }

    #[test]
    fn malformed_lines_are_rejected() {
        assert!(RunConfig::parse("just words").is_err());
        let c = RunConfig::parse("model.d_model = wide").unwrap();
        assert!(c.model_config(300, Direction::Forward).is_err());
    }

    #[test]
    fn digest_ignores_order_and_comments() {
        let a = RunConfig::parse("a = 1\nb = 2").unwrap();
        let b = RunConfig::parse("b = 2 # two\na = 1").unwrap();
        assert_eq!(a.digest(), b.digest());
        let c = RunConfig::parse("a = 1\nb = 3").unwrap();
        assert_ne!(a.digest(), c.digest());
        assert_eq!(a.digest_of(&["a"]), c.digest_of(&["a"]));
    }

    #[test]
    fn fewshot_lists() {
        let c = RunConfig::parse("fewshot.k = 2\nfewshot.dropout_grid = 0, 0.5\nfewshot.entity_types = PER,LOC").unwrap();
        let s = c.fewshot_spec().unwrap();
        assert_eq!(s.k, 2);
        assert_eq!(s.dropout_grid, vec![0.0, 0.5]);
        assert_eq!(s.entity_types, vec!["PER", "LOC"]);
    }
}
