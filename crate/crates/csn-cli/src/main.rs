//! `csn`: train, evaluate, and export concept subspace networks.
//!
//! Exit codes: 0 on success, 2 for invalid configuration or input,
//! 3 for training divergence.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use commands::{cmd_eval, cmd_export, cmd_train, EvalArgs, ExportArgs, ExportKind};
use csn_core::CsnError;

#[derive(Parser)]
#[command(name = "csn", version, about = "Concept subspace network toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model from a run configuration; writes checkpoints, a
    /// training history CSV, a metrics JSON, and the effective config.
    Train {
        /// Path to a run configuration JSON (see presets/).
        #[arg(long)]
        config: PathBuf,
    },
    /// Evaluate a checkpoint on a dataset.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Path to a dataset spec JSON (the `dataset` object of a run config).
        #[arg(long)]
        dataset: PathBuf,
        /// Fairness report: y-concept and protected-concept indices.
        #[arg(long, num_args = 2, value_names = ["Y", "S"])]
        fair: Option<Vec<usize>>,
        /// Hierarchy report: fine and coarse concept indices.
        #[arg(long, num_args = 2, value_names = ["FINE", "COARSE"])]
        hier: Option<Vec<usize>>,
        /// Intervention ratio: source and target concept indices.
        #[arg(long, num_args = 2, value_names = ["SRC", "TGT"])]
        rho: Option<Vec<usize>>,
        /// Seed for probe splits and generated datasets.
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Also write the report JSON here.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Export model artifacts as CSV.
    Export {
        #[arg(long)]
        checkpoint: PathBuf,
        /// One of: latents, prototypes, decoded-prototypes, mst.
        #[arg(long)]
        what: ExportKind,
        /// Dataset spec JSON; required for the latents export.
        #[arg(long)]
        dataset: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Train { config } => cmd_train(config),
        Command::Eval {
            checkpoint,
            dataset,
            fair,
            hier,
            rho,
            seed,
            out,
        } => cmd_eval(&EvalArgs {
            checkpoint,
            dataset_spec: dataset,
            fair: fair.as_ref().map(|v| (v[0], v[1])),
            hier: hier.as_ref().map(|v| (v[0], v[1])),
            rho: rho.as_ref().map(|v| vec![(v[0], v[1])]).unwrap_or_default(),
            seed: *seed,
            out: out.clone(),
        }),
        Command::Export {
            checkpoint,
            what,
            dataset,
            seed,
            out,
        } => cmd_export(&ExportArgs {
            checkpoint,
            what: *what,
            dataset_spec: dataset.as_deref(),
            seed: *seed,
            out: out.clone(),
        }),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(CsnError::Diverged { .. }) => ExitCode::from(3),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
