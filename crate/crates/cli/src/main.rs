use std::path::PathBuf;
use std::process::ExitCode;

use cbamnet::backbone::PlacementSet;
use cbamnet_cli::run::{self, Options};
use cbamnet_cli::{CliError, EXIT_INVALID};
use clap::{Parser, Subcommand};

/// Train, ablate and evaluate attention-augmented CNN classifiers.
#[derive(Debug, Parser)]
#[command(name = "cbamnet", version)]
struct Cli {
    /// Experiment config (TOML).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the config seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output root; each command creates one run directory inside it.
    #[arg(long, global = true, env = "CBAMNET_OUT_DIR", default_value = "runs")]
    out: PathBuf,
    /// Concurrent ablation cells.
    #[arg(long, global = true, default_value_t = 1)]
    workers: usize,
    /// Suppress progress output on stderr.
    #[arg(long, short, global = true)]
    quiet: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train one model and evaluate it on the test split.
    Train,
    /// Train one model per placement set and summarize mean AUC.
    AblatePlacement {
        /// Placement set such as "3,4" or "none"; repeatable.
        #[arg(long = "placement")]
        placements: Vec<PlacementSet>,
    },
    /// Run the five training strategies for each placement set.
    AblateStrategy {
        #[arg(long = "placement")]
        placements: Vec<PlacementSet>,
    },
    /// Evaluate a checkpoint: CSV, ROC curves and attention heatmaps.
    Report {
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Write a synthetic dataset in the manifest + image layout.
    SynthData,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { EXIT_INVALID as u8 } else { 0 });
        }
    };
    let Some(config) = cli.config else {
        eprintln!("error: --config is required");
        return ExitCode::from(EXIT_INVALID as u8);
    };
    let opts = Options {
        config,
        seed: cli.seed,
        out: cli.out,
        workers: cli.workers,
        quiet: cli.quiet,
    };
    let result: Result<PathBuf, CliError> = match &cli.command {
        Command::Train => run::cmd_train(&opts),
        Command::AblatePlacement { placements } => run::cmd_ablate_placement(&opts, placements),
        Command::AblateStrategy { placements } => run::cmd_ablate_strategy(&opts, placements),
        Command::Report { checkpoint } => run::cmd_report(&opts, checkpoint),
        Command::SynthData => run::cmd_synth_data(&opts),
    };
    match result {
        Ok(_) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
