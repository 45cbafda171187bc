//! The pipeline commands. Each one reads its prerequisites from the run
//! directory, writes its artifacts there and records a run manifest.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use serde::Serialize;

use bidirep_core::corpus::{DocumentStore, LabeledSentence};
use bidirep_core::eval::MetricsReport;
use bidirep_core::fewshot::{random_hp_trials, sample_kshot_indices, top3_mean, TrialResult};
use bidirep_core::fusion::{Provenance, RepMatrix, Setting};
use bidirep_core::probe::{label_set_from, ProbeConfig};
use bidirep_core::rng::derive_seed;
use bidirep_core::synth::{gen_desk_corpus, gen_directional_dataset, gen_tagged_corpus, Dependence, TaggedSentence};
use bidirep_core::tokenizer::{train_bpe, Vocab};
use bidirep_core::train::{self as lm, LogEntry, ModelCheckpoint, TrainConfig, TrainError};
use bidirep_core::Direction;

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::experiment::{evaluate, fit_probe, majority_baseline, stack, tags_of, unstack, word_reps, Backbones, Metric};
use crate::formats::{
    decode_checkpoint, decode_probe, decode_reps, decode_vocab, encode_checkpoint, encode_probe, encode_reps, encode_vocab,
    sha256_hex,
};
use crate::io;

pub const SPLITS: [&str; 3] = ["train", "dev", "test"];

/// Keys that shape each artifact; their digest is stamped into it.
const LM_KEYS: &[&str] = &["seed", "corpus.", "tokenizer.", "model.", "train."];

pub struct Ctx {
    pub out: PathBuf,
    pub cfg: RunConfig,
}

#[derive(Serialize)]
struct Manifest<'a> {
    command: &'a str,
    config_digest: String,
    seed: u64,
    version: &'a str,
    artifacts: BTreeMap<String, String>,
}

impl Ctx {
    pub fn new(out: impl Into<PathBuf>, cfg: RunConfig) -> Self {
        Ctx { out: out.into(), cfg }
    }

    /// Configured path for `key`, else `default` inside the run directory.
    pub fn path(&self, key: &str, default: &str) -> PathBuf {
        self.cfg.get(key).map_or_else(|| self.out.join(default), PathBuf::from)
    }

    fn manifest(&self, command: &str, artifacts: &[&Path]) -> Result<()> {
        let mut listed = BTreeMap::new();
        for p in artifacts {
            let name = p.strip_prefix(&self.out).unwrap_or(p).to_string_lossy().into_owned();
            listed.insert(name, sha256_hex(&io::read(p)?));
        }
        let m = Manifest {
            command,
            config_digest: self.cfg.digest(),
            seed: self.cfg.seed()?,
            version: env!("CARGO_PKG_VERSION"),
            artifacts: listed,
        };
        let mut json = serde_json::to_vec_pretty(&m)?;
        json.push(b'\n');
        io::write(&self.out.join(format!("{command}.manifest.json")), &json)
    }

    fn vocab_path(&self) -> PathBuf {
        self.path("vocab", "vocab.bpe")
    }

    fn ckpt_path(&self, direction: Direction) -> PathBuf {
        self.path(&format!("{direction}_ckpt"), &format!("{direction}.ckpt"))
    }

    fn reps_path(&self, split: &str, setting: Setting) -> PathBuf {
        self.out.join("reps").join(format!("{split}.{}.reps", setting.as_str()))
    }

    fn probe_path(&self, setting: Setting) -> PathBuf {
        self.path("probe", &format!("probe.{}.bin", setting.as_str()))
    }

    pub fn load_vocab(&self) -> Result<Vocab> {
        decode_vocab(&io::read_text(&self.vocab_path())?)
    }

    pub fn load_checkpoint(&self, direction: Direction, vocab: &Vocab) -> Result<ModelCheckpoint> {
        let (ckpt, _) = decode_checkpoint(&io::read(&self.ckpt_path(direction))?)?;
        if ckpt.direction() != direction {
            return Err(bidirep_core::Error::DirectionMismatch { expected: direction, found: ckpt.direction() }.into());
        }
        if ckpt.vocab_hash != vocab.digest() {
            return Err(bidirep_core::Error::VocabularyNotShared.into());
        }
        Ok(ckpt)
    }

    /// Raw corpus texts: configured files, or the generated desk corpus.
    pub fn corpus_texts(&self) -> Result<Vec<String>> {
        match self.cfg.list("corpus.path") {
            Some(paths) if !paths.is_empty() => paths.iter().map(|p| io::read_text(Path::new(p))).collect(),
            _ => {
                let bytes = self.cfg.or("corpus.synthetic_bytes", 5_000_000usize)?;
                Ok(vec![gen_desk_corpus(bytes, self.cfg.or("corpus.seed", self.cfg.seed()?)?)])
            }
        }
    }

    pub fn load_split(&self, vocab: &Vocab, split: &str) -> Result<Vec<LabeledSentence>> {
        let key = format!("data.{split}");
        let path = self.cfg.get(&key).map(PathBuf::from).unwrap_or_else(|| self.out.join("data").join(format!("{split}.conll")));
        let col = match self.cfg.parsed("data.tag_column")? {
            Some(c) => c,
            None => io::task_column(&io::read_text(&path)?, &self.task()),
        };
        io::load_conll(&path, vocab, Some(col))
    }

    fn task(&self) -> String {
        self.cfg.get("task").unwrap_or("ner").to_owned()
    }
}

// ---------------------------------------------------------------------------

pub fn train_tokenizer(ctx: &Ctx) -> Result<Vocab> {
    let texts = ctx.corpus_texts()?;
    let docs: Vec<String> = texts.iter().flat_map(|t| bidirep_core::corpus::split_documents(t)).collect();
    let vocab = train_bpe(&docs, ctx.cfg.or("tokenizer.vocab_size", 1024usize)?)?;
    let path = ctx.vocab_path();
    io::write(&path, encode_vocab(&vocab).as_bytes())?;
    ctx.manifest("train-tokenizer", &[&path])?;
    Ok(vocab)
}

pub fn train_lm(ctx: &Ctx, direction: Direction, mut on_log: impl FnMut(&LogEntry)) -> Result<ModelCheckpoint> {
    let vocab = ctx.load_vocab()?;
    let store = DocumentStore::from_texts(&ctx.corpus_texts()?, derive_seed(ctx.cfg.seed()?, "corpus-order"))?;
    let model_cfg = ctx.cfg.model_config(vocab.size(), direction)?;
    let train_cfg = ctx.cfg.lm_train_config()?;
    if train_cfg.seq_len > model_cfg.max_seq_len {
        return Err(Error::Config(format!(
            "train.seq_len {} exceeds model.max_seq_len {}",
            train_cfg.seq_len, model_cfg.max_seq_len
        )));
    }
    let digest = ctx.cfg.digest_of(LM_KEYS);
    let mut log = Vec::new();
    let run = lm::train_lm(direction, &store, &vocab, &model_cfg, &train_cfg, |e| {
        log.extend_from_slice(&serde_json::to_vec(e).expect("log entry serializes"));
        log.push(b'\n');
        on_log(e);
    });
    let log_path = ctx.out.join(format!("{direction}.metrics.jsonl"));
    io::write(&log_path, &log)?;
    let run = match run {
        Ok(run) => run,
        Err(TrainError::Diverged { step, last_good }) => {
            let path = ctx.out.join(format!("{direction}.last_good.ckpt"));
            io::write(&path, &encode_checkpoint(&last_good, &digest))?;
            return Err(bidirep_core::Error::Divergence { step }.into());
        }
        Err(TrainError::Invalid(e)) => return Err(e.into()),
    };
    let path = ctx.ckpt_path(direction);
    io::write(&path, &encode_checkpoint(&run.checkpoint, &digest))?;
    ctx.manifest(&format!("train-lm.{direction}"), &[&path, &log_path])?;
    Ok(run.checkpoint)
}

/// Loads the models a setting needs. External forward states, when
/// configured for `split`, replace the forward model.
fn backbones_for(ctx: &Ctx, setting: Setting, vocab: &Vocab) -> Result<(Option<ModelCheckpoint>, Option<ModelCheckpoint>)> {
    let external = SPLITS.iter().any(|s| ctx.cfg.get(&format!("extract.external_forward.{s}")).is_some());
    let fwd = match setting {
        Setting::ForwardOnly | Setting::Concat if !external => Some(ctx.load_checkpoint(Direction::Forward, vocab)?),
        _ => None,
    };
    let bwd = match setting {
        Setting::BackwardOnly | Setting::Concat => Some(ctx.load_checkpoint(Direction::Backward, vocab)?),
        Setting::ForwardOnly => None,
    };
    Ok((fwd, bwd))
}

#[derive(Serialize, serde::Deserialize)]
struct RepsMeta {
    setting: String,
    vocab_hash: String,
    words_per_sentence: Vec<usize>,
}

/// Word-level representations for every configured split.
pub fn extract(ctx: &Ctx) -> Result<Vec<PathBuf>> {
    let vocab = ctx.load_vocab()?;
    let setting = ctx.cfg.setting()?;
    let pooling = ctx.cfg.pooling()?;
    let (fwd, bwd) = backbones_for(ctx, setting, &vocab)?;
    let mut written = Vec::new();
    for split in SPLITS {
        let sentences = match ctx.load_split(&vocab, split) {
            Err(Error::Missing(_)) if split != "train" => continue,
            r => r?,
        };
        let external = match ctx.cfg.get(&format!("extract.external_forward.{split}")) {
            Some(p) => {
                let m = decode_reps(&io::read(Path::new(p))?)?;
                let rows: Vec<usize> = sentences.iter().map(|s| s.encoding.ids.len()).collect();
                let reps = unstack(&m, &rows, Provenance::External, None)?;
                Some(reps.into_iter().map(|r| RepMatrix::external(r.values, None)).collect::<bidirep_core::Result<Vec<_>>>()?)
            }
            None => None,
        };
        let bb = Backbones { forward: fwd.as_ref(), backward: bwd.as_ref(), external_forward: external.as_deref() };
        let reps = word_reps(setting, &bb, &sentences, pooling)?;
        let path = ctx.reps_path(split, setting);
        io::write(&path, &encode_reps(&stack(&reps)))?;
        let meta = RepsMeta {
            setting: setting.as_str().to_owned(),
            vocab_hash: vocab.digest().to_hex(),
            words_per_sentence: sentences.iter().map(|s| s.len()).collect(),
        };
        let meta_path = path.with_extension("json");
        io::write(&meta_path, &serde_json::to_vec(&meta)?)?;
        written.push(path);
        written.push(meta_path);
    }
    let refs: Vec<&Path> = written.iter().map(PathBuf::as_path).collect();
    ctx.manifest(&format!("extract.{}", setting.as_str()), &refs)?;
    Ok(written)
}

/// Extracted representations and gold tags of one split.
pub fn load_reps(ctx: &Ctx, vocab: &Vocab, split: &str, setting: Setting) -> Result<(Vec<RepMatrix>, Vec<Vec<String>>)> {
    let sentences = ctx.load_split(vocab, split)?;
    let path = ctx.reps_path(split, setting);
    let meta: RepsMeta = serde_json::from_slice(&io::read(&path.with_extension("json"))?)?;
    if meta.vocab_hash != vocab.digest().to_hex() {
        return Err(bidirep_core::Error::VocabularyNotShared.into());
    }
    let lens: Vec<usize> = sentences.iter().map(|s| s.len()).collect();
    if meta.words_per_sentence != lens || meta.setting != setting.as_str() {
        return Err(Error::format(format!("{} was extracted from different data; rerun extract", path.display())));
    }
    let reps = unstack(&decode_reps(&io::read(&path)?)?, &lens, Provenance::Fused, Some(vocab.digest()))?;
    Ok((reps, tags_of(&sentences)))
}

#[derive(Serialize)]
struct ProbeHistory {
    dev_scores: Vec<(usize, f64)>,
    best_epoch: usize,
}

fn full_label_set(cfg: &ProbeConfig, tags: &[Vec<String>]) -> Vec<String> {
    cfg.label_set.clone().unwrap_or_else(|| label_set_from(tags.iter().flatten()))
}

pub fn train_probe(ctx: &Ctx) -> Result<PathBuf> {
    let vocab = ctx.load_vocab()?;
    let setting = ctx.cfg.setting()?;
    let (tr, tr_tags) = load_reps(ctx, &vocab, "train", setting)?;
    let (dv, dv_tags) = load_reps(ctx, &vocab, "dev", setting)?;
    let cfg = ctx.cfg.probe_config()?;
    let out = fit_probe((&tr, &tr_tags), (&dv, &dv_tags), &cfg, Metric::for_task(&ctx.task()))?;
    let path = ctx.probe_path(setting);
    io::write(&path, &encode_probe(&out.params, Some(setting.as_str()), Some(vocab.digest()), &ctx.cfg.digest()))?;
    let hist = ctx.out.join(format!("probe.{}.history.json", setting.as_str()));
    io::write(&hist, &serde_json::to_vec(&ProbeHistory { dev_scores: out.dev_scores, best_epoch: out.best_epoch })?)?;
    ctx.manifest(&format!("train-probe.{}", setting.as_str()), &[&path, &hist])?;
    Ok(path)
}

fn report_json(report: &MetricsReport) -> Result<Vec<u8>> {
    let mut json = serde_json::to_vec_pretty(report)?;
    json.push(b'\n');
    Ok(json)
}

/// Scores the trained probe on the test split and returns the report JSON.
pub fn eval(ctx: &Ctx) -> Result<(MetricsReport, Vec<u8>)> {
    let vocab = ctx.load_vocab()?;
    let setting = ctx.cfg.setting()?;
    let (pp, header) = decode_probe(&io::read(&ctx.probe_path(setting))?)?;
    if header.vocab_hash.as_deref().is_some_and(|h| h != vocab.digest().to_hex()) {
        return Err(bidirep_core::Error::VocabularyNotShared.into());
    }
    if header.setting.as_deref().is_some_and(|s| s != setting.as_str()) {
        return Err(Error::format(format!("probe was trained for setting {:?}", header.setting)));
    }
    let (te, te_tags) = load_reps(ctx, &vocab, "test", setting)?;
    let mut report = evaluate(&pp, &te, &te_tags)?;
    report.seeds = vec![ctx.cfg.seed()?];
    report.config_digest = ctx.cfg.digest();
    let json = report_json(&report)?;
    let path = ctx.out.join(format!("metrics.{}.json", setting.as_str()));
    io::write(&path, &json)?;
    ctx.manifest(&format!("eval.{}", setting.as_str()), &[&path])?;
    Ok((report, json))
}

/// Compares two CoNLL files tag by tag (last column of each).
pub fn eval_files(gold: &Path, pred: &Path) -> Result<(MetricsReport, Vec<u8>)> {
    let bytes_only = Vocab::from_merges(Vec::<(Vec<u8>, Vec<u8>)>::new())?;
    let g = io::load_conll(gold, &bytes_only, None)?;
    let p = io::load_conll(pred, &bytes_only, None)?;
    let (g, p) = (tags_of(&g), tags_of(&p));
    let mut report = bidirep_core::eval::span_prf_tags(&g, &p)?;
    report.accuracy = Some(bidirep_core::eval::corpus_accuracy(&g, &p)?);
    let json = report_json(&report)?;
    Ok((report, json))
}

#[derive(Debug, Clone, Serialize)]
pub struct FewShotSummary {
    pub k: usize,
    pub setting: String,
    pub n_trials: usize,
    pub top3_mean_test_f1: f64,
}

/// Random search over probe hyperparameters on a K-shot training sample.
pub fn fewshot(ctx: &Ctx, jobs: usize) -> Result<(FewShotSummary, Vec<TrialResult>)> {
    let vocab = ctx.load_vocab()?;
    let setting = ctx.cfg.setting()?;
    let spec = ctx.cfg.fewshot_spec()?;
    let train_sents = ctx.load_split(&vocab, "train")?;
    let (tr, tr_tags) = load_reps(ctx, &vocab, "train", setting)?;
    let (dv, dv_tags) = load_reps(ctx, &vocab, "dev", setting)?;
    let (te, te_tags) = load_reps(ctx, &vocab, "test", setting)?;
    let idx = sample_kshot_indices(&train_sents, &spec)?;
    let k_reps: Vec<RepMatrix> = idx.iter().map(|&i| tr[i].clone()).collect();
    let k_tags: Vec<Vec<String>> = idx.iter().map(|&i| tr_tags[i].clone()).collect();
    let base = ctx.cfg.probe_config()?;
    let labels = full_label_set(&base, &tr_tags);
    let epochs = ctx.cfg.or("fewshot.epochs", base.epochs)?;
    let trials = random_hp_trials(&spec)?;
    let metric = Metric::for_task(&ctx.task());

    let run_trial = |t: &bidirep_core::fewshot::TrialConfig| -> Result<TrialResult> {
        let cfg = ProbeConfig {
            train: TrainConfig { batch_size: t.batch_size, base_lr: t.lr, ..TrainConfig::probe(t.seed) },
            epochs,
            dropout: t.dropout,
            label_set: Some(labels.clone()),
        };
        let fit = fit_probe((&k_reps, &k_tags), (&dv, &dv_tags), &cfg, metric)?;
        let dev_f1 = fit.dev_scores.iter().find(|(e, _)| *e == fit.best_epoch).map_or(0.0, |x| x.1);
        let test_f1 = metric.score(&te_tags, &crate::experiment::predict_all(&fit.params, &te)?)?;
        Ok(TrialResult { trial_id: t.trial_id, lr: t.lr, seed: t.seed, dropout: t.dropout, dev_f1, test_f1 })
    };

    let slots: Mutex<Vec<Option<Result<TrialResult>>>> = Mutex::new((0..trials.len()).map(|_| None).collect());
    let next = AtomicUsize::new(0);
    std::thread::scope(|s| {
        for _ in 0..jobs.clamp(1, trials.len()) {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                let Some(t) = trials.get(i) else { break };
                let r = run_trial(t);
                slots.lock().expect("trial results lock")[i] = Some(r);
            });
        }
    });
    let results: Vec<TrialResult> = slots
        .into_inner()
        .expect("trial results lock")
        .into_iter()
        .map(|r| r.expect("every trial ran"))
        .collect::<Result<_>>()?;

    let mut ledger = Vec::new();
    for r in &results {
        ledger.extend_from_slice(&serde_json::to_vec(r)?);
        ledger.push(b'\n');
    }
    let stem = format!("fewshot.{}.k{}", setting.as_str(), spec.k);
    let ledger_path = ctx.out.join(format!("{stem}.trials.jsonl"));
    io::write(&ledger_path, &ledger)?;
    let summary =
        FewShotSummary { k: spec.k, setting: setting.as_str().to_owned(), n_trials: results.len(), top3_mean_test_f1: top3_mean(&results)? };
    let summary_path = ctx.out.join(format!("{stem}.json"));
    io::write(&summary_path, &serde_json::to_vec_pretty(&summary)?)?;
    ctx.manifest(&format!("fewshot.{}.k{}", setting.as_str(), spec.k), &[&ledger_path, &summary_path])?;
    Ok((summary, results))
}

#[derive(Debug, Clone, Serialize)]
pub struct SynthOutcome {
    pub dependence: String,
    pub majority_f1: f64,
    pub reports: BTreeMap<String, MetricsReport>,
}

fn labeled(vocab: &Vocab, sents: &[TaggedSentence]) -> Result<Vec<LabeledSentence>> {
    sents.iter().map(|s| Ok(LabeledSentence::new(s.words.clone(), s.ner.clone(), vocab)?)).collect()
}

/// Directional benchmark (default). `synth.mode = conll` writes the synthetic
/// NER/chunking corpus as CoNLL files under `data/`; `synth.mode = corpus`
/// writes the pretraining text to `corpus.txt`.
pub fn synth(ctx: &Ctx) -> Result<(Option<SynthOutcome>, Vec<u8>)> {
    let seed = ctx.cfg.or("synth.seed", ctx.cfg.seed()?)?;
    let n = ctx.cfg.or("synth.n_sentences", 3000usize)?;
    if ctx.cfg.get("synth.mode") == Some("corpus") {
        let path = ctx.out.join("corpus.txt");
        io::write(&path, ctx.corpus_texts()?.join("\n\n").as_bytes())?;
        ctx.manifest("synth.corpus", &[&path])?;
        return Ok((None, serde_json::to_vec_pretty(&[path.display().to_string()])?));
    }
    if ctx.cfg.get("synth.mode") == Some("conll") {
        let all = gen_tagged_corpus(n, seed);
        let n_train = n * 2 / 3;
        let n_dev = (n - n_train) / 2;
        let parts = [&all[..n_train], &all[n_train..n_train + n_dev], &all[n_train + n_dev..]];
        let mut written = Vec::new();
        for (split, part) in SPLITS.iter().zip(parts) {
            let path = ctx.out.join("data").join(format!("{split}.conll"));
            io::write(&path, io::to_conll(part).as_bytes())?;
            written.push(path);
        }
        let refs: Vec<&Path> = written.iter().map(PathBuf::as_path).collect();
        ctx.manifest("synth.conll", &refs)?;
        let listing: Vec<String> = written.iter().map(|p| p.display().to_string()).collect();
        return Ok((None, serde_json::to_vec_pretty(&listing)?));
    }

    let dependence: Dependence = ctx.cfg.get("synth.dependence").unwrap_or("next_token").parse()?;
    let settings: Vec<Setting> = match ctx.cfg.list("synth.settings") {
        Some(xs) => xs.iter().map(|s| s.parse()).collect::<bidirep_core::Result<_>>()?,
        None => vec![ctx.cfg.setting()?],
    };
    let vocab = ctx.load_vocab()?;
    let splits = gen_directional_dataset(n, seed, dependence);
    let (tr, dv, te) = (labeled(&vocab, &splits.train)?, labeled(&vocab, &splits.dev)?, labeled(&vocab, &splits.test)?);
    let (tr_tags, dv_tags, te_tags) = (tags_of(&tr), tags_of(&dv), tags_of(&te));
    let pooling = ctx.cfg.pooling()?;
    let probe_cfg = ctx.cfg.probe_config()?;
    let mut reports = BTreeMap::new();
    let mut written = Vec::new();
    let dep_name = ctx.cfg.get("synth.dependence").unwrap_or("next_token").to_owned();
    for setting in settings {
        let (fwd, bwd) = backbones_for(ctx, setting, &vocab)?;
        let bb = Backbones { forward: fwd.as_ref(), backward: bwd.as_ref(), external_forward: None };
        let (rtr, rdv, rte) =
            (word_reps(setting, &bb, &tr, pooling)?, word_reps(setting, &bb, &dv, pooling)?, word_reps(setting, &bb, &te, pooling)?);
        let fit = fit_probe((&rtr, &tr_tags), (&rdv, &dv_tags), &probe_cfg, Metric::SpanF1)?;
        let mut report = evaluate(&fit.params, &rte, &te_tags)?;
        report.seeds = vec![probe_cfg.train.seed];
        report.config_digest = ctx.cfg.digest();
        let path = ctx.out.join("synth").join(format!("{dep_name}.{}.metrics.json", setting.as_str()));
        io::write(&path, &report_json(&report)?)?;
        written.push(path);
        reports.insert(setting.as_str().to_owned(), report);
    }
    let outcome =
        SynthOutcome { dependence: dep_name, majority_f1: majority_baseline(&tr_tags, &te_tags)?.micro.f1, reports };
    let refs: Vec<&Path> = written.iter().map(PathBuf::as_path).collect();
    ctx.manifest(&format!("synth.{}", outcome.dependence), &refs)?;
    let mut json = serde_json::to_vec_pretty(&outcome)?;
    json.push(b'\n');
    Ok((Some(outcome), json))
}
