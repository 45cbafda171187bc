//! End-to-end runs of the command pipeline on a tiny configuration.

use std::collections::BTreeMap;
use std::path::Path;
use std::process::Command;

use bidirep::commands::{self, Ctx};
use bidirep::config::RunConfig;
use bidirep::Error;
use bidirep_core::Direction;

const TINY: &str = "
seed = 3
corpus.synthetic_bytes = 30000
tokenizer.vocab_size = 320
model.d_model = 16
model.n_layers = 1
model.n_heads = 2
model.d_ff = 32
model.max_seq_len = 64
train.total_steps = 6
train.batch_size = 4
train.seq_len = 32
synth.mode = conll
synth.n_sentences = 150
probe.epochs = 2
fewshot.k = 1
fewshot.n_trials = 3
fewshot.epochs = 2
";

fn ctx(dir: &Path) -> Ctx {
    Ctx::new(dir, RunConfig::parse(TINY).unwrap())
}

fn run_all(dir: &Path) {
    let c = ctx(dir);
    commands::synth(&c).unwrap();
    commands::train_tokenizer(&c).unwrap();
    commands::train_lm(&c, Direction::Forward, |_| {}).unwrap();
    commands::train_lm(&c, Direction::Backward, |_| {}).unwrap();
    commands::extract(&c).unwrap();
    commands::train_probe(&c).unwrap();
    commands::eval(&c).unwrap();
    commands::fewshot(&c, 2).unwrap();
}

fn snapshot(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.insert(p.strip_prefix(dir).unwrap().display().to_string(), std::fs::read(&p).unwrap());
            }
        }
    }
    out
}

#[test]
fn reruns_are_byte_identical() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    run_all(a.path());
    run_all(b.path());
    let (sa, sb) = (snapshot(a.path()), snapshot(b.path()));
    assert!(sa.contains_key("forward.ckpt") && sa.contains_key("metrics.concat.json"));
    assert!(sa.keys().all(|k| !k.ends_with(".tmp")));
    assert_eq!(sa.keys().collect::<Vec<_>>(), sb.keys().collect::<Vec<_>>());
    for (k, v) in &sa {
        assert!(v == &sb[k], "{k} differs between reruns");
    }
}

#[test]
fn missing_prerequisites_are_reported() {
    let d = tempfile::tempdir().unwrap();
    let c = ctx(d.path());
    assert!(matches!(commands::train_lm(&c, Direction::Forward, |_| {}), Err(Error::Missing(_))));
    assert!(matches!(commands::train_probe(&c), Err(Error::Missing(_))));
}

#[test]
fn backbones_from_different_vocabularies_are_refused() {
    let d = tempfile::tempdir().unwrap();
    let c = ctx(d.path());
    commands::synth(&c).unwrap();
    commands::train_tokenizer(&c).unwrap();
    commands::train_lm(&c, Direction::Forward, |_| {}).unwrap();
    let mut cfg = RunConfig::parse(TINY).unwrap();
    cfg.set("tokenizer.vocab_size", "300").unwrap();
    let other = Ctx::new(d.path(), cfg);
    commands::train_tokenizer(&other).unwrap();
    let err = commands::extract(&other).unwrap_err();
    assert!(err.to_string().contains("vocabulary not shared"), "{err}");
}

#[test]
fn external_forward_states_replace_the_forward_model() {
    let d = tempfile::tempdir().unwrap();
    let c = ctx(d.path());
    commands::synth(&c).unwrap();
    let vocab = commands::train_tokenizer(&c).unwrap();
    commands::train_lm(&c, Direction::Backward, |_| {}).unwrap();
    let mut cfg = RunConfig::parse(TINY).unwrap();
    for split in commands::SPLITS {
        let rows: usize = c.load_split(&vocab, split).unwrap().iter().map(|s| s.encoding.ids.len()).sum();
        let m = bidirep_core::tensor::Matrix::from_vec(rows, 3, (0..rows * 3).map(|i| (i % 7) as f32).collect());
        let p = d.path().join(format!("ext.{split}.reps"));
        std::fs::write(&p, bidirep::formats::encode_reps(&m)).unwrap();
        cfg.set(&format!("extract.external_forward.{split}"), p.to_str().unwrap()).unwrap();
    }
    let ext = Ctx::new(d.path(), cfg);
    commands::extract(&ext).unwrap();
    let (reps, _) = commands::load_reps(&ext, &vocab, "dev", bidirep_core::fusion::Setting::Concat).unwrap();
    assert_eq!(reps[0].dim(), 3 + 16);
}

#[test]
fn synthetic_directional_run_reports_each_setting() {
    let d = tempfile::tempdir().unwrap();
    let mut cfg = RunConfig::parse(TINY).unwrap();
    cfg.set("synth.mode", "directional").unwrap();
    cfg.set("synth.n_sentences", "90").unwrap();
    cfg.set("synth.settings", "forward_only,concat").unwrap();
    let c = Ctx::new(d.path(), cfg);
    commands::train_tokenizer(&c).unwrap();
    commands::train_lm(&c, Direction::Forward, |_| {}).unwrap();
    commands::train_lm(&c, Direction::Backward, |_| {}).unwrap();
    let (out, json) = commands::synth(&c).unwrap();
    let out = out.unwrap();
    assert_eq!(out.reports.len(), 2);
    assert!(out.majority_f1 == 0.0);
    assert!(std::str::from_utf8(&json).unwrap().contains("\"concat\""));
}

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_bidirep"))
}

#[test]
fn cli_fails_with_a_one_line_diagnostic() {
    let d = tempfile::tempdir().unwrap();
    let out = bin().args(["train-probe", "--out"]).arg(d.path()).output().unwrap();
    assert!(!out.status.success());
    let err = String::from_utf8(out.stderr).unwrap();
    assert_eq!(err.lines().count(), 1, "{err}");
    assert!(err.starts_with("error: missing prerequisite artifact"), "{err}");

    let out = bin().args(["eval", "--set", "nonsense"]).output().unwrap();
    assert!(!out.status.success());
}

#[test]
fn cli_scores_conll_files() {
    let d = tempfile::tempdir().unwrap();
    let gold = d.path().join("gold.conll");
    let pred = d.path().join("pred.conll");
    std::fs::write(&gold, "Jones B-PER\nsaid O\nin O\nLyon B-LOC\n\n").unwrap();
    std::fs::write(&pred, "Jones B-PER\nsaid O\nin B-ORG\nLyon O\n\n").unwrap();
    let out = bin().arg("eval").arg("--gold").arg(&gold).arg("--pred").arg(&pred).output().unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let v: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(v["micro"]["precision"], 0.5);
    assert_eq!(v["micro"]["recall"], 0.5);
    assert_eq!(v["accuracy"], 0.5);
}

#[test]
fn cli_overrides_and_config_file() {
    let d = tempfile::tempdir().unwrap();
    let cfg = d.path().join("run.cfg");
    std::fs::write(&cfg, TINY).unwrap();
    let out = bin()
        .arg("--out")
        .arg(d.path())
        .arg("--config")
        .arg(&cfg)
        .args(["--set", "tokenizer.vocab_size=290", "train-tokenizer"])
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(String::from_utf8(out.stdout).unwrap().starts_with("vocab size 290"));
    let manifest: serde_json::Value =
        serde_json::from_slice(&std::fs::read(d.path().join("train-tokenizer.manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["seed"], 3);
    assert!(manifest["artifacts"]["vocab.bpe"].as_str().unwrap().len() == 64);
}

#[test]
fn eval_of_gold_against_itself_is_perfect() {
    let d = tempfile::tempdir().unwrap();
    let gold = d.path().join("gold.conll");
    std::fs::write(&gold, "EU NNP B-NP B-ORG\nrejects VBZ B-VP O\nGerman JJ B-NP B-MISC\ncall NN I-NP O\n\n").unwrap();
    let (r, _) = commands::eval_files(&gold, &gold).unwrap();
    assert_eq!(r.micro.f1, 1.0);
    assert_eq!(r.accuracy, Some(1.0));
}

#[test]
fn corpus_mode_writes_the_pretraining_text() {
    let d = tempfile::tempdir().unwrap();
    let mut cfg = RunConfig::parse(TINY).unwrap();
    cfg.set("synth.mode", "corpus").unwrap();
    commands::synth(&Ctx::new(d.path(), cfg.clone())).unwrap();
    let text = std::fs::read_to_string(d.path().join("corpus.txt")).unwrap();
    assert!(text.len() >= 30000);
    // The written file can stand in for the generated corpus.
    cfg.set("corpus.path", d.path().join("corpus.txt").to_str().unwrap()).unwrap();
    assert_eq!(Ctx::new(d.path(), cfg).corpus_texts().unwrap(), vec![text]);
}
