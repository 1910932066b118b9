//! `tpconv` command-line tool: dataset generation, training, evaluation,
//! time-function ablation and plot-data export for time-parameterized
//! convolution models.

pub mod commands;
pub mod config;
pub mod hash;
pub mod manifest;
pub mod run;

use clap::{Parser, Subcommand};
use std::path::PathBuf;
use tpconv_core::error::Error;

#[derive(Parser)]
#[command(
    name = "tpconv",
    version,
    about = "Time-parameterized convolutions for irregular time series"
)]
pub struct Cli {
    /// Overrides the config seed wherever randomness is involved
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Worker threads for batch-level evaluation parallelism; results are
    /// bit-identical for any value and --threads 1 disables threading
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand)]
pub enum Command {
    /// Generate a synthetic dataset (NDJSON + metadata sidecar)
    Generate {
        /// TOML config; defaults reproduce the standard synthetic set
        #[arg(long)]
        config: Option<PathBuf>,
        /// Output NDJSON path
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a model and write checkpoint, metrics CSV and run manifest
    Train {
        /// interp, cls or step-cls
        #[arg(long)]
        task: String,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        /// Output run directory
        #[arg(long)]
        out: PathBuf,
        /// Interpolation sweep: fraction of observed points used as input
        #[arg(long)]
        observed_fraction: Option<f64>,
    },
    /// Evaluate a run directory (or a directory of seed-runs) and print
    /// metric JSON
    Eval {
        /// Run directory containing manifest.json + checkpoint.json, or a
        /// parent directory of several runs
        #[arg(long)]
        checkpoint: PathBuf,
        /// Evaluate on this dataset instead of the one recorded in the
        /// manifest
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Train one model per time-function set over several seeds and write a
    /// CSV plus a bar-plot-ready summary
    Ablate {
        /// interp, cls or step-cls
        #[arg(long)]
        task: String,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        /// Comma-separated sets, e.g. "lin,sin,cos,exp,sin+cos"
        #[arg(long)]
        functions: String,
        /// Output CSV path
        #[arg(long)]
        out: PathBuf,
        /// Runs per function set; run i uses seed base+i
        #[arg(long, default_value_t = 5)]
        seeds: usize,
    },
    /// Export reconstruction data for a few test samples as JSON
    ExportPlot {
        /// Run directory or parent of several interpolation runs
        #[arg(long)]
        run: PathBuf,
        /// Observed dataset the runs were trained on
        #[arg(long)]
        data: PathBuf,
        /// Ground-truth NDJSON written by `generate`
        #[arg(long)]
        truth: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 3)]
        samples: usize,
    },
}

/// Dispatches a parsed command; errors map to exit codes in `main`.
pub fn dispatch(cli: Cli) -> Result<(), Error> {
    let seed = cli.seed;
    let threads = cli.threads;
    match cli.command {
        Command::Generate { config, out } => commands::cmd_generate(config.as_deref(), &out, seed),
        Command::Train {
            task,
            data,
            config,
            out,
            observed_fraction,
        } => commands::cmd_train(
            &task,
            &data,
            config.as_deref(),
            &out,
            seed,
            threads,
            observed_fraction,
        ),
        Command::Eval { checkpoint, data } => {
            commands::cmd_eval(&checkpoint, data.as_deref(), threads.unwrap_or(1))
        }
        Command::Ablate {
            task,
            data,
            config,
            functions,
            out,
            seeds,
        } => commands::cmd_ablate(
            &task,
            &data,
            config.as_deref(),
            &functions,
            &out,
            seeds,
            seed,
            threads,
        ),
        Command::ExportPlot {
            run,
            data,
            truth,
            out,
            samples,
        } => commands::cmd_export_plot(&run, &data, &truth, &out, samples, seed.unwrap_or(0)),
    }
}

/// 0 success, 2 usage/validation, 3 numeric failure.
pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::Numerics(_) => 3,
        _ => 2,
    }
}
