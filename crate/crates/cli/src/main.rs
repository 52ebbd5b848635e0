//! `smc-mune`: simulate, fit, select, report and oracle commands.

mod commands;
mod manifest;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use smc_mune::MuneError;

#[derive(Debug, Parser)]
#[command(name = "smc-mune", version, about = "Bayesian motor unit number estimation by sequential Monte Carlo")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

/// Settings shared by every command that runs the filter.
#[derive(Debug, Clone, Args)]
struct RunArgs {
    /// Flat key-value config file; unknown keys are errors.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Particles per run (the selection protocol may escalate this).
    #[arg(long)]
    particles: Option<usize>,
    /// Lattice points per excitability axis.
    #[arg(long)]
    grid: Option<usize>,
    #[arg(long = "lambda-max")]
    lambda_max: Option<f64>,
    /// Worker threads; `SMC_MUNE_THREADS` takes precedence.
    #[arg(long)]
    threads: Option<usize>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Draw a synthetic system and write its stimulus-response CSV.
    Simulate {
        #[arg(long)]
        units: usize,
        #[arg(long)]
        output: PathBuf,
        /// Also write the generating parameters and latent firing as JSON.
        #[arg(long)]
        truth: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Run the filter for one unit count and write the particle population.
    Fit {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        units: usize,
        #[arg(long)]
        output: PathBuf,
        #[command(flatten)]
        run: RunArgs,
    },
    /// Run the stability protocol for every unit count up to `--u-max`.
    Select {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        output: PathBuf,
        #[arg(long = "u-max")]
        u_max: Option<usize>,
        #[arg(long = "mu-min")]
        mu_min: Option<f64>,
        #[command(flatten)]
        run: RunArgs,
    },
    /// Recalibrate and summarize a fit result; writes plot data next to the output.
    Report {
        /// Result JSON written by `fit`.
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        output: PathBuf,
        /// Lower bound on every twitch force; 0 disables recalibration.
        #[arg(long = "mu-min")]
        mu_min: Option<f64>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        threads: Option<usize>,
    },
    /// Print the exact log marginal likelihood of a small instance.
    Oracle {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        units: usize,
        #[arg(long)]
        grid: Option<usize>,
        #[arg(long = "lambda-max")]
        lambda_max: Option<f64>,
        #[arg(long)]
        config: Option<PathBuf>,
    },
}

fn exit_code(e: &MuneError) -> u8 {
    match e {
        MuneError::Numerical(_) | MuneError::Annihilated(_) => 3,
        MuneError::ResourceCap(_) => 4,
        _ => 2,
    }
}

fn report_error(kind: &str, message: &str) {
    let body = serde_json::json!({ "error": kind, "message": message });
    eprintln!("{body}");
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => e.exit(),
        Err(e) => {
            report_error("usage", e.to_string().trim_end());
            return ExitCode::from(2);
        }
    };
    match commands::run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            report_error(e.kind(), &e.to_string());
            ExitCode::from(exit_code(&e))
        }
    }
}
