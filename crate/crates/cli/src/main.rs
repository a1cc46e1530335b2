//! `moelab` command line: train / eval / budget / report.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use moelab::commands;
use moelab::config::{parse_config, RunConfig};

fn config_key_help() -> String {
    format!(
        "CONFIG FILE: `key = value` lines, `#` comments, unknown keys rejected.\n\
         Defaults:\n{}",
        RunConfig::default().to_config_string()
    )
}

#[derive(Parser)]
#[command(
    name = "moelab",
    about = "Desk-scale lab for sparse and multi-head mixture-of-experts language models",
    version,
    after_help = config_key_help()
)]
struct Cli {
    /// Config file of `key = value` lines (defaults used when omitted).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override the config's seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Override the config's output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model per the config; writes metrics.jsonl and checkpoints.
    Train {
        /// Resume from a checkpoint written by an earlier run.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Perplexity + telemetry files for a checkpoint over a corpus.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
    },
    /// Analytic parameter/FLOP report for the config.
    Budget {
        /// Also evaluate the six reference configurations
        /// (d=768, 6 MoE layers, h=4, N=8..256).
        #[arg(long)]
        table7: bool,
    },
    /// Expert-activation and assign-diversity report for a checkpoint.
    Report {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
        /// Activation threshold (default 1/(4N), always printed).
        #[arg(long)]
        threshold: Option<f64>,
        /// Normalize ratios per token instead of per routing event.
        #[arg(long)]
        per_token: bool,
        /// Where to write the telemetry files (defaults to --out).
        #[arg(long)]
        out_dir: Option<PathBuf>,
    },
}

fn load_config(cli: &Cli) -> anyhow::Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(path) => parse_config(path)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.model.seed = seed;
    }
    if let Some(out) = &cli.out {
        cfg.out_dir = out.clone();
    }
    cfg.validate()?;
    Ok(cfg)
}

fn run() -> anyhow::Result<()> {
    let cli = Cli::parse();
    match &cli.command {
        Command::Train { resume } => {
            let cfg = load_config(&cli)?;
            let summary = commands::cmd_train(&cfg, resume.as_deref())?;
            println!(
                "done: step {} val_ppl {} beta {} -> {}",
                summary.final_step,
                summary.final_val_ppl,
                summary.beta,
                summary.final_checkpoint.display()
            );
        }
        Command::Eval { checkpoint, corpus } => {
            let cfg = load_config(&cli)?;
            let summary = commands::cmd_eval(checkpoint, corpus, &cfg.out_dir)?;
            for f in &summary.files {
                println!("wrote {}", f.display());
            }
        }
        Command::Budget { table7 } => {
            let cfg = load_config(&cli)?;
            let files = commands::cmd_budget(&cfg, *table7, &cfg.out_dir)?;
            for f in &files {
                println!("wrote {}", f.display());
            }
        }
        Command::Report {
            checkpoint,
            corpus,
            threshold,
            per_token,
            out_dir,
        } => {
            let cfg = load_config(&cli)?;
            let dir = out_dir.clone().unwrap_or(cfg.out_dir);
            let summary = commands::cmd_report(checkpoint, corpus, &dir, *threshold, *per_token)?;
            for f in &summary.files {
                println!("wrote {}", f.display());
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run() {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
