//! `tsconv` command-line tool.
//!
//! Exit codes: 0 ok, 1 usage or configuration error, 2 data error,
//! 3 numeric failure.

mod commands;
mod inspect;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("usage: {0}")]
    Usage(String),
    #[error("data: {0}")]
    Data(String),
    #[error("numeric: {0}")]
    Numeric(String),
}

impl CliError {
    fn code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Data(_) => 2,
            CliError::Numeric(_) => 3,
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "tsconv", version, about = "Oriented object detection with task-wise sampling convolutions")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

/// Flags shared by every command.
#[derive(Debug, Args)]
struct Common {
    /// Flat key=value configuration file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Extra `key=value` overrides applied after the file.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train a model; writes config, metrics and checkpoints under --out.
    Train {
        #[command(flatten)]
        common: Common,
        /// Start from this checkpoint instead of a fresh initialization.
        #[arg(long)]
        init: Option<PathBuf>,
        #[arg(long, default_value = "run")]
        out: PathBuf,
    },
    /// Evaluate a checkpoint and print the per-class table.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Dataset directory; defaults to the configured data or synthetic scenes.
        #[arg(long)]
        data: Option<PathBuf>,
        /// Score threshold; defaults to the configured one.
        #[arg(long)]
        conf: Option<f64>,
        /// Also write the table to this file.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Dump heatmaps, assignments, sampling points or kernels for one image.
    Inspect {
        what: Inspect,
        #[command(flatten)]
        common: Common,
        /// Model checkpoint; a freshly initialized model is used when absent.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        image: PathBuf,
        /// DOTA-format annotations, required by `gaussian` and `assignment`.
        #[arg(long)]
        annotations: Option<PathBuf>,
        /// Training iteration used for the assignment schedule.
        #[arg(long, default_value_t = 0)]
        iter: usize,
        #[arg(long, default_value = "inspect")]
        out: PathBuf,
    },
    /// Write a synthetic dataset (PNG images, DOTA annotations, manifest).
    Synth {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value = "synth")]
        out: PathBuf,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Inspect {
    Gaussian,
    Assignment,
    LocPoints,
    ClsPoints,
    Dck,
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Train { common, init, out } => commands::train(&commands::load_config(&common)?, init.as_deref(), &out),
        Command::Eval { common, checkpoint, data, conf, out } => {
            let text = commands::eval(&commands::load_config(&common)?, &checkpoint, data.as_deref(), conf)?;
            print!("{text}");
            if let Some(path) = out {
                std::fs::write(&path, text).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
            }
            Ok(())
        }
        Command::Inspect { what, common, checkpoint, image, annotations, iter, out } => {
            let cfg = commands::load_config(&common)?;
            let req = inspect::Request { what, checkpoint, image, annotations, iter, out };
            inspect::run(&cfg, &req)
        }
        Command::Synth { common, out } => commands::synth(&commands::load_config(&common)?, &out),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("tsconv: {e}");
            ExitCode::from(e.code())
        }
    }
}
