//! Acceptance suite. Runs every criterion at its pinned tolerance and prints
//! one PASS/FAIL line per criterion; exits nonzero if any fails.

#[path = "../../core/tests/support/mod.rs"]
mod support;

use std::collections::BTreeMap;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::time::Instant;

use bidirep::commands::{self, Ctx};
use bidirep::config::RunConfig;
use bidirep::formats::{decode_checkpoint, decode_reps, decode_vocab, encode_checkpoint, encode_reps, encode_vocab};
use bidirep_core::corpus::LabeledSentence;
use bidirep_core::eval::{aggregate_seeds, bio_to_spans, span_prf, span_prf_tags, MetricsReport, Span};
use bidirep_core::fewshot::{top3_mean, TrialResult};
use bidirep_core::rng::rng_from_seed;
use bidirep_core::synth::gen_tagged_corpus;
use bidirep_core::tokenizer::Vocab;
use bidirep_core::Direction;

type Outcome = Result<String, String>;

fn ensure(ok: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(msg())
    }
}

fn c1_gradients() -> Outcome {
    let mut errors = support::model_grad_errors(0.0);
    errors.extend(support::model_grad_errors(0.2));
    errors.extend(support::probe_grad_errors());
    let (name, worst) = errors.iter().cloned().fold((String::new(), 0.0), |a, b| if b.1 > a.1 { b } else { a });
    ensure(worst < support::GRAD_TOL, || format!("{name}: relative error {worst:.2e}"))?;
    Ok(format!("{} tensors, max relative error {worst:.2e} ({name})", errors.len()))
}

fn c2_causality() -> Outcome {
    let bad = support::causality_violations(100, 2024);
    ensure(bad.is_empty(), || format!("{} violations, first: {}", bad.len(), bad[0]))?;
    Ok("100 inputs, every position perturbed".into())
}

fn c5_span_oracle() -> Outcome {
    let mut rng = rng_from_seed(5);
    for _ in 0..200 {
        let tags = support::random_tags(&mut rng, 14);
        let ours: std::collections::BTreeSet<_> =
            bio_to_spans(&tags).into_iter().map(|s| (s.label, s.start, s.end)).collect();
        ensure(ours == support::brute_spans(&tags), || format!("span mismatch on {tags:?}"))?;
    }
    for _ in 0..200 {
        let gold: Vec<Vec<String>> = (0..4).map(|_| support::random_tags(&mut rng, 10)).collect();
        let pred: Vec<Vec<String>> = gold
            .iter()
            .map(|g| {
                let mut p = support::random_tags(&mut rng, 10);
                p.resize(g.len(), "O".into());
                p
            })
            .collect();
        let m = span_prf_tags(&gold, &pred).map_err(|e| e.to_string())?.micro;
        let (p, r, f) = support::brute_prf(&gold, &pred);
        ensure((m.precision, m.recall, m.f1) == (p, r, f), || format!("score mismatch on {gold:?} / {pred:?}"))?;
    }
    let worked = span_prf(&[vec![Span::new("PER", 0, 1)]], &[vec![Span::new("PER", 0, 1), Span::new("ORG", 3, 4)]])
        .map_err(|e| e.to_string())?;
    let gap = (worked.micro.f1 - 2.0 / 3.0).abs();
    ensure(gap <= 1e-12, || format!("worked example F1 {}", worked.micro.f1))?;
    Ok(format!("200 sequences + 200 corpora exact; worked example off by {gap:.1e}"))
}

fn c6_fewshot() -> Outcome {
    let bytes_only = Vocab::from_merges(Vec::<(Vec<u8>, Vec<u8>)>::new()).map_err(|e| e.to_string())?;
    let pool: Vec<LabeledSentence> = gen_tagged_corpus(1500, 3)
        .into_iter()
        .map(|s| LabeledSentence::new(s.words, s.ner, &bytes_only))
        .collect::<Result<_, _>>()
        .map_err(|e| e.to_string())?;
    for seed in [0, 1, 42] {
        let bad = support::kshot_violations(&pool, seed);
        ensure(bad.is_empty(), || bad.join("; "))?;
    }
    let trials: Vec<TrialResult> = [(0.5, 0.4), (0.6, 0.5), (0.7, 0.6), (0.8, 0.7)]
        .iter()
        .enumerate()
        .map(|(i, &(dev_f1, test_f1))| TrialResult { trial_id: i, lr: 1e-3, seed: 10, dropout: 0.0, dev_f1, test_f1 })
        .collect();
    let m = top3_mean(&trials).map_err(|e| e.to_string())?;
    ensure((m - 0.6).abs() < 1e-12, || format!("top3_mean {m}"))?;
    Ok(format!("K in {{1,4,16}} x 3 seeds; top3_mean {m:.12}"))
}

fn c8_lm_sanity() -> Outcome {
    let (loss, bound) = support::repeated_pattern_loss();
    ensure(loss < bound, || format!("repeated pattern loss {loss:.4} >= {bound:.4}"))?;
    let (f, b) = support::palindrome_losses();
    let rel = (f - b).abs() / f.max(b);
    ensure(rel < 0.05, || format!("palindrome forward {f:.4} backward {b:.4}"))?;
    Ok(format!("pattern loss {loss:.4} < {bound:.4}; palindrome rel gap {rel:.4}"))
}

// ------------------------------------------------------------- determinism

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
synth.n_sentences = 150
probe.epochs = 2
fewshot.k = 1
fewshot.n_trials = 3
fewshot.epochs = 2
";

fn tree(dir: &Path) -> BTreeMap<String, Vec<u8>> {
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

fn tiny_pipeline(dir: &Path) -> bidirep::Result<()> {
    let mut cfg = RunConfig::parse(TINY)?;
    cfg.set("synth.mode", "conll")?;
    let c = Ctx::new(dir, cfg.clone());
    commands::synth(&c)?;
    commands::train_tokenizer(&c)?;
    commands::train_lm(&c, Direction::Forward, |_| {})?;
    commands::train_lm(&c, Direction::Backward, |_| {})?;
    commands::extract(&c)?;
    commands::train_probe(&c)?;
    commands::eval(&c)?;
    commands::fewshot(&c, 2)?;
    cfg.set("synth.mode", "directional")?;
    cfg.set("synth.settings", "forward_only,backward_only,concat")?;
    commands::synth(&Ctx::new(dir, cfg))?;
    Ok(())
}

fn c7_determinism() -> Outcome {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    tiny_pipeline(a.path()).map_err(|e| e.to_string())?;
    tiny_pipeline(b.path()).map_err(|e| e.to_string())?;
    let (ta, tb) = (tree(a.path()), tree(b.path()));
    ensure(ta.keys().eq(tb.keys()), || "runs wrote different file sets".into())?;
    for (k, v) in &ta {
        ensure(v == &tb[k], || format!("{k} differs between reruns"))?;
    }
    // Decode then encode reproduces every persisted artifact bit for bit.
    let mut checked = 0;
    for (k, bytes) in &ta {
        let again = if k.ends_with(".ckpt") {
            let (ck, meta) = decode_checkpoint(bytes).map_err(|e| e.to_string())?;
            encode_checkpoint(&ck, &meta.config_digest)
        } else if k.ends_with(".bpe") {
            let text = std::str::from_utf8(bytes).map_err(|e| e.to_string())?;
            encode_vocab(&decode_vocab(text).map_err(|e| e.to_string())?).into_bytes()
        } else if k.ends_with(".reps") {
            encode_reps(&decode_reps(bytes).map_err(|e| e.to_string())?)
        } else {
            continue;
        };
        ensure(&again == bytes, || format!("{k} does not round-trip"))?;
        checked += 1;
    }
    Ok(format!("{} artifacts identical across reruns; {checked} round-trips exact", ta.len()))
}

// ------------------------------------------------------------- directional

/// Desk recipe for the two pretrained LMs.
const DESK: &str = "
seed = 1
corpus.synthetic_bytes = 5000000
tokenizer.vocab_size = 1024
model.d_model = 128
model.n_layers = 4
model.n_heads = 4
model.d_ff = 512
model.max_seq_len = 64
train.batch_size = 16
train.seq_len = 64
train.total_steps = 1500
train.lr = 0.002
train.warmup_steps = 40
probe.epochs = 20
";

struct Desk {
    dir: tempfile::TempDir,
    cfg: RunConfig,
}

fn pretrain() -> bidirep::Result<Desk> {
    let dir = tempfile::tempdir().unwrap();
    let cfg = RunConfig::parse(DESK)?;
    let c = Ctx::new(dir.path(), cfg.clone());
    commands::train_tokenizer(&c)?;
    for d in [Direction::Forward, Direction::Backward] {
        commands::train_lm(&c, d, |_| {})?;
    }
    Ok(Desk { dir, cfg })
}

fn f1(r: &MetricsReport) -> f64 {
    r.micro.f1
}

fn c3_directional(desk: &Desk) -> Outcome {
    let mut lines = Vec::new();
    let mut failed = Vec::new();
    for (dep, blind) in [("next_token", "forward_only"), ("prev_token", "backward_only")] {
        let mut cfg = desk.cfg.clone();
        let set = |cfg: &mut RunConfig, k: &str, v: &str| cfg.set(k, v).map_err(|e| e.to_string());
        set(&mut cfg, "synth.mode", "directional")?;
        set(&mut cfg, "synth.dependence", dep)?;
        set(&mut cfg, "synth.n_sentences", "3000")?;
        set(&mut cfg, "synth.seed", "7")?;
        set(&mut cfg, "synth.settings", &format!("{blind},concat"))?;
        let (out, _) = commands::synth(&Ctx::new(desk.dir.path(), cfg)).map_err(|e| e.to_string())?;
        let out = out.expect("directional mode reports");
        let (b, c) = (f1(&out.reports[blind]), f1(&out.reports["concat"]));
        let base = out.majority_f1;
        lines.push(format!("{dep}: majority {base:.3} {blind} {b:.3} concat {c:.3}"));
        if b > base + 0.05 {
            failed.push(format!("{dep}: {blind} {b:.3} exceeds majority + 0.05"));
        }
        if c < 0.95 {
            failed.push(format!("{dep}: concat {c:.3} < 0.95"));
        }
        if c - b < 0.30 {
            failed.push(format!("{dep}: concat leads {blind} by {:.3} < 0.30", c - b));
        }
    }
    let summary = lines.join("; ");
    if failed.is_empty() {
        Ok(summary)
    } else {
        Err(format!("{} [{summary}]", failed.join("; ")))
    }
}

fn c4_figure_consistency(desk: &Desk) -> Outcome {
    let mut cfg = desk.cfg.clone();
    cfg.set("synth.mode", "conll").map_err(|e| e.to_string())?;
    cfg.set("synth.n_sentences", "1500").map_err(|e| e.to_string())?;
    cfg.set("synth.seed", "11").map_err(|e| e.to_string())?;
    cfg.set("probe.epochs", "10").map_err(|e| e.to_string())?;
    commands::synth(&Ctx::new(desk.dir.path(), cfg.clone())).map_err(|e| e.to_string())?;
    let mut lines = Vec::new();
    let mut failed = Vec::new();
    for task in ["ner", "chunk"] {
        let mut mean = BTreeMap::new();
        for setting in ["forward_only", "concat"] {
            let mut reports = Vec::new();
            for seed in [1u64, 2, 3] {
                let mut c = cfg.clone();
                c.set("task", task).map_err(|e| e.to_string())?;
                c.set("setting", setting).map_err(|e| e.to_string())?;
                c.set("seed", &seed.to_string()).map_err(|e| e.to_string())?;
                let ctx = Ctx::new(desk.dir.path().join(task), c);
                // Checkpoints and vocab come from the shared run directory.
                let mut shared = ctx.cfg.clone();
                for (k, f) in [("vocab", "vocab.bpe"), ("forward_ckpt", "forward.ckpt"), ("backward_ckpt", "backward.ckpt")] {
                    shared.set(k, desk.dir.path().join(f).to_str().unwrap()).map_err(|e| e.to_string())?;
                }
                for split in commands::SPLITS {
                    let p = desk.dir.path().join("data").join(format!("{split}.conll"));
                    shared.set(&format!("data.{split}"), p.to_str().unwrap()).map_err(|e| e.to_string())?;
                }
                let ctx = Ctx::new(ctx.out.clone(), shared);
                if seed == 1 {
                    commands::extract(&ctx).map_err(|e| e.to_string())?;
                }
                commands::train_probe(&ctx).map_err(|e| e.to_string())?;
                reports.push(commands::eval(&ctx).map_err(|e| e.to_string())?.0);
            }
            mean.insert(setting, f1(&aggregate_seeds(&reports).map_err(|e| e.to_string())?));
        }
        let (f, c) = (mean["forward_only"], mean["concat"]);
        lines.push(format!("{task}: forward_only {f:.3} concat {c:.3}"));
        if c < f {
            failed.push(format!("{task}: concat {c:.3} < forward_only {f:.3}"));
        }
    }
    let summary = lines.join("; ");
    if failed.is_empty() {
        Ok(format!("3-seed means, {summary}"))
    } else {
        Err(format!("{} [{summary}]", failed.join("; ")))
    }
}

fn run(results: &mut Vec<bool>, id: &str, f: impl FnOnce() -> Outcome) {
    let t = Instant::now();
    let outcome = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
        let msg = p.downcast_ref::<String>().cloned().or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()));
        Err(format!("panicked: {}", msg.unwrap_or_default()))
    });
    let secs = t.elapsed().as_secs_f64();
    match &outcome {
        Ok(detail) => println!("criterion {id}: PASS ({secs:.1}s) {detail}"),
        Err(detail) => println!("criterion {id}: FAIL ({secs:.1}s) {detail}"),
    }
    results.push(outcome.is_ok());
}

fn main() {
    let mut results = Vec::new();
    run(&mut results, "1 gradient correctness", c1_gradients);
    run(&mut results, "2 causality", c2_causality);
    run(&mut results, "5 evaluation oracle", c5_span_oracle);
    run(&mut results, "6 few-shot protocol", c6_fewshot);
    run(&mut results, "7 determinism and persistence", c7_determinism);
    run(&mut results, "8 LM training sanity", c8_lm_sanity);

    let t = Instant::now();
    match pretrain() {
        Ok(desk) => {
            println!("(desk LMs pretrained in {:.1}s)", t.elapsed().as_secs_f64());
            run(&mut results, "3 directional mechanism", || c3_directional(&desk));
            run(&mut results, "4 concat >= forward on tagged data", || c4_figure_consistency(&desk));
        }
        Err(e) => {
            for id in ["3 directional mechanism", "4 concat >= forward on tagged data"] {
                println!("criterion {id}: FAIL pretraining failed: {e}");
                results.push(false);
            }
        }
    }
    let passed = results.iter().filter(|&&ok| ok).count();
    println!("acceptance: {passed}/{} criteria passed", results.len());
    if passed != results.len() {
        std::process::exit(1);
    }
}
