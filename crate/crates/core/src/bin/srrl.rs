use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use selfref::harness::{self, RunConfig};

#[derive(Parser)]
#[command(
    name = "srrl",
    version,
    about = "Self-referencing agents: pretrain, finetune, distill and evaluate"
)]
struct Cli {
    /// Directory for run artifacts.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Bandit regret study over the five agents.
    Mab {
        #[arg(long, default_value_t = 10)]
        seeds: usize,
        #[arg(long, default_value_t = 1000)]
        horizon: usize,
    },
    /// Reward-free pretraining on the maze.
    Pretrain {
        #[arg(long)]
        config: PathBuf,
    },
    /// Finetuning on the config's task from a pretrain checkpoint.
    Finetune {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        from: PathBuf,
    },
    /// Distil a finetuned agent into a retrieval-free student.
    Distill {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        from: PathBuf,
    },
    /// Noise-free evaluation of any checkpoint.
    Eval {
        #[arg(long)]
        from: PathBuf,
    },
    /// IQM and optimality gap over finetune run summaries.
    Metrics {
        #[arg(long)]
        runs: PathBuf,
        /// JSON map from task name to expert score.
        #[arg(long)]
        experts: Option<PathBuf>,
    },
}

fn out_dir(cli: &Option<PathBuf>, cfg: Option<&RunConfig>, default: &str) -> PathBuf {
    cli.clone()
        .or_else(|| cfg.and_then(|c| c.out_dir.as_ref().map(PathBuf::from)))
        .unwrap_or_else(|| Path::new("runs").join(default))
}

fn run(cli: Cli) -> selfref::Result<serde_json::Value> {
    match cli.command {
        Command::Mab { seeds, horizon } => harness::run_mab(seeds, horizon, &out_dir(&cli.out, None, "mab")),
        Command::Pretrain { config } => {
            let cfg = RunConfig::load(&config)?;
            let out = out_dir(&cli.out, Some(&cfg), "pretrain");
            harness::run_pretrain(cfg, &out)
        }
        Command::Finetune { config, from } => {
            let cfg = RunConfig::load(&config)?;
            let out = out_dir(&cli.out, Some(&cfg), "finetune");
            harness::run_finetune(cfg, &from, &out)
        }
        Command::Distill { config, from } => {
            let cfg = RunConfig::load(&config)?;
            let out = out_dir(&cli.out, Some(&cfg), "distill");
            harness::run_distill(cfg, &from, &out)
        }
        Command::Eval { from } => harness::run_eval(&from, &out_dir(&cli.out, None, "eval")),
        Command::Metrics { runs, experts } => {
            harness::run_metrics(&runs, experts.as_deref(), &out_dir(&cli.out, None, "metrics"))
        }
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(summary) => {
            println!("{summary}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
