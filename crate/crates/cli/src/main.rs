//! `moetune`: parameter counts, staged training runs, routing reports and
//! ablation sweeps on the toy model.
//!
//! Exit codes: 0 success, 1 other failure, 2 configuration error, 3 a
//! non-finite value during computation.

mod commands;
mod output;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use moetune::tuning::AblationAxis;

pub const VERSION: &str = env!("MOETUNE_VERSION");

#[derive(Parser)]
#[command(name = "moetune", version = VERSION, about = "Sparse MoE tuning experiments at desk scale")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Activated and total language-model parameters of a config.
    Params {
        /// Model config, or run config with a [model] table.
        config: PathBuf,
        /// Also write the counts as JSON to this file.
        #[arg(long)]
        json: Option<PathBuf>,
        /// Build the model and cross-check the count against its buffers.
        #[arg(long)]
        verify: bool,
    },
    /// Run the staged pipeline and write checkpoints, metrics and reports.
    Train {
        config: PathBuf,
        /// I, II, III or all.
        #[arg(long, default_value = "all")]
        stage: String,
        /// Overrides the seed in the config.
        #[arg(long)]
        seed: Option<u64>,
        /// Run directory; defaults to <output root>/<config>-seed<seed>.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Routing reports of a sparse checkpoint on the synthetic task.
    Analyze {
        checkpoint: PathBuf,
        /// Run config describing the dataset; defaults to the toy task.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Number of samples to trace; defaults to the evaluation set.
        #[arg(long)]
        samples: Option<usize>,
        /// Number of pathways to report.
        #[arg(long, default_value_t = 10)]
        pathways: usize,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Stage-III sweep over one axis from a shared stage-II model.
    Ablate {
        config: PathBuf,
        /// experts, topk, placement, capacity or subset.
        #[arg(long, value_parser = parse_axis)]
        axis: AblationAxis,
        /// Comma-separated values.
        #[arg(long, value_delimiter = ',', required = true)]
        values: Vec<String>,
        /// Values trained concurrently.
        #[arg(long, default_value_t = 1)]
        jobs: usize,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn parse_axis(s: &str) -> Result<AblationAxis, String> {
    s.parse().map_err(|e: moetune::Error| e.to_string())
}

/// Maps the first library error in the chain to a stable exit code.
fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if let Some(e) = cause.downcast_ref::<moetune::Error>() {
            if e.is_config() {
                return 2;
            }
            if e.is_numeric() {
                return 3;
            }
        }
    }
    1
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Params { config, json, verify } => commands::params::run(&config, json.as_deref(), verify),
        Command::Train {
            config,
            stage,
            seed,
            out,
        } => commands::train::run(&config, &stage, seed, out),
        Command::Analyze {
            checkpoint,
            config,
            samples,
            pathways,
            out,
        } => commands::analyze::run(&checkpoint, config.as_deref(), samples, pathways, out),
        Command::Ablate {
            config,
            axis,
            values,
            jobs,
            seed,
            out,
        } => commands::ablate::run(&config, axis, &values, jobs, seed, out),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(exit_code(&err))
        }
    }
}
