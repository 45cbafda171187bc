use std::io::Write as _;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use bidirep::commands::{self, Ctx};
use bidirep::config::RunConfig;
use bidirep::Result;
use bidirep_core::Direction;

#[derive(Parser)]
#[command(name = "bidirep", version, about = "Forward/backward LM representations and linear probes")]
struct Cli {
    /// Run directory for artifacts and manifests.
    #[arg(long, global = true, default_value = "run")]
    out: PathBuf,
    /// `key = value` config file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Config override, repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Train the shared byte-level BPE vocabulary.
    TrainTokenizer,
    /// Pretrain one causal LM.
    TrainLm {
        #[arg(long, value_parser = parse_direction)]
        direction: Direction,
    },
    /// Write word-level representations for every data split.
    Extract,
    /// Fit a probe on train, selecting the epoch on dev.
    TrainProbe,
    /// Score the probe on test, or compare two CoNLL files.
    Eval {
        #[arg(long, requires = "pred")]
        gold: Option<PathBuf>,
        #[arg(long, requires = "gold")]
        pred: Option<PathBuf>,
    },
    /// K-shot random hyperparameter search.
    Fewshot {
        #[arg(long, default_value_t = 1)]
        jobs: usize,
    },
    /// Synthetic data: the directional benchmark, or CoNLL files.
    Synth,
}

fn parse_direction(s: &str) -> std::result::Result<Direction, String> {
    match s {
        "forward" => Ok(Direction::Forward),
        "backward" => Ok(Direction::Backward),
        _ => Err(format!("expected forward or backward, got `{s}`")),
    }
}

fn run(cli: Cli) -> Result<()> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    for kv in &cli.overrides {
        cfg.apply_override(kv)?;
    }
    let ctx = Ctx::new(cli.out, cfg);
    let mut stdout = std::io::stdout().lock();
    let print = |out: &mut std::io::StdoutLock<'_>, bytes: &[u8]| {
        // A closed pipe is not worth failing the run over.
        let _ = out.write_all(bytes);
    };
    match cli.cmd {
        Cmd::TrainTokenizer => {
            let v = commands::train_tokenizer(&ctx)?;
            print(&mut stdout, format!("vocab size {} hash {}\n", v.size(), v.digest().to_hex()).as_bytes());
        }
        Cmd::TrainLm { direction } => {
            let ck = commands::train_lm(&ctx, direction, |e| eprintln!("step {} loss {:.4} lr {:.3e}", e.step, e.loss, e.lr))?;
            print(&mut stdout, format!("{direction} model trained for {} steps\n", ck.step).as_bytes());
        }
        Cmd::Extract => {
            for p in commands::extract(&ctx)? {
                print(&mut stdout, format!("{}\n", p.display()).as_bytes());
            }
        }
        Cmd::TrainProbe => {
            let p = commands::train_probe(&ctx)?;
            print(&mut stdout, format!("{}\n", p.display()).as_bytes());
        }
        Cmd::Eval { gold: Some(g), pred: Some(p) } => print(&mut stdout, &commands::eval_files(&g, &p)?.1),
        Cmd::Eval { .. } => print(&mut stdout, &commands::eval(&ctx)?.1),
        Cmd::Fewshot { jobs } => {
            let (s, _) = commands::fewshot(&ctx, jobs)?;
            print(&mut stdout, format!("{}\n", serde_json::to_string(&s)?).as_bytes());
        }
        Cmd::Synth => print(&mut stdout, &commands::synth(&ctx)?.1),
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
