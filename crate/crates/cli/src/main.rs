//! `seld`: synthesize scenes, extract features, train, evaluate, and score.

mod commands;
mod config;
mod logging;

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Result;
use clap::{Parser, Subcommand};
use seld_core::metrics::Averaging;

#[derive(Parser)]
#[command(name = "seld", version, about = "Sound event localization and detection")]
struct Cli {
    /// TOML config file, or a JSON run manifest.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides both the run seed and the data seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Single-threaded data preparation.
    #[arg(long, global = true)]
    deterministic: bool,
    #[arg(long, short, global = true)]
    verbose: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate synthetic FoA scenes (WAV + CSV).
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        n_scenes: Option<usize>,
        /// Scene length in seconds.
        #[arg(long)]
        duration: Option<f64>,
    },
    /// Extract [7, T, 64] feature tensors from FoA WAV files.
    Featurize {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a model on a directory of scenes.
    Train {
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        max_steps: Option<u64>,
        #[arg(long)]
        batch_size: Option<usize>,
        /// Continue from a checkpoint directory.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Predict scenes with a checkpoint and score them.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        threshold: Option<f64>,
    },
    /// Score a prediction CSV against a reference CSV.
    Score {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long = "ref", value_name = "REF")]
        reference: PathBuf,
        #[arg(long, value_parser = parse_averaging)]
        averaging: Option<Averaging>,
        #[arg(long)]
        threshold_deg: Option<f64>,
    },
}

fn parse_averaging(s: &str) -> Result<Averaging, String> {
    match s {
        "micro" => Ok(Averaging::Micro),
        "macro" => Ok(Averaging::Macro),
        _ => Err(format!("expected micro or macro, got {s}")),
    }
}

fn run(cli: Cli) -> Result<()> {
    let mut cfg = config::load(cli.config.as_deref())?;
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
        cfg.data.seed = seed;
    }
    cfg.deterministic |= cli.deterministic;
    if cfg.deterministic {
        // example order never depends on the pool; one thread also pins timing
        let _ = rayon::ThreadPoolBuilder::new().num_threads(1).build_global();
    }
    match cli.command {
        Command::Synth { out, n_scenes, duration } => {
            if let Some(n) = n_scenes {
                cfg.data.n_scenes = n;
            }
            if let Some(d) = duration {
                cfg.data.synth.duration = d;
            }
            commands::synth(&cfg, &out)
        }
        Command::Featurize { input, out } => commands::featurize(&cfg, &input, &out),
        Command::Train { data, out, epochs, max_steps, batch_size, resume } => {
            if let Some(e) = epochs {
                cfg.training.epochs = e;
            }
            if max_steps.is_some() {
                cfg.training.max_steps = max_steps;
            }
            if let Some(b) = batch_size {
                cfg.training.batch_size = b;
            }
            let args = commands::TrainArgs {
                data: data.unwrap_or_else(|| cfg.paths.data_dir.clone()),
                out: out.unwrap_or_else(|| cfg.paths.out_dir.clone()),
                resume,
            };
            commands::train(&cfg, &args)
        }
        Command::Eval { checkpoint, data, out, threshold } => {
            let args = commands::EvalArgs {
                checkpoint,
                data: data.unwrap_or_else(|| cfg.paths.data_dir.clone()),
                out,
                threshold,
            };
            commands::eval(&cfg, &args)
        }
        Command::Score { pred, reference, averaging, threshold_deg } => {
            let mut metrics = cfg.training.metrics;
            if let Some(a) = averaging {
                metrics.averaging = a;
            }
            if let Some(t) = threshold_deg {
                metrics.threshold_deg = t;
            }
            commands::score(&metrics, &pred, &reference)
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    logging::init(cli.verbose);
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let chain: Vec<String> = e.chain().map(|c| c.to_string()).collect();
            eprintln!("{}", serde_json::json!({ "level": "error", "message": chain.join(": "), "causes": chain }));
            ExitCode::FAILURE
        }
    }
}
