//! `heckmi` — multilevel selection-model imputation for clustered data with
//! missing-not-at-random variables, plus the simulation harness that
//! measures it against complete-case analysis and MAR-based imputation.
//!
//! Exit codes: 0 success, 2 validation failure, 3 runtime computation
//! failure.

mod commands;
mod config;

use clap::{Parser, Subcommand};
use heckmi::error::Error;
use std::path::PathBuf;
use std::process::ExitCode;

#[derive(Parser)]
#[command(name = "heckmi", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Impute a CSV dataset according to the configured specs, writing
    /// imp_<k>.csv files and an imputation report.
    Impute {
        /// Input CSV (UTF-8, header row; missing cells empty or `NA`).
        #[arg(long)]
        data: PathBuf,
        /// JSON run configuration.
        #[arg(long)]
        config: PathBuf,
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
        /// Override the configured master seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Worker pool size (default: available parallelism).
        #[arg(long)]
        workers: Option<usize>,
        /// Override the number of imputations.
        #[arg(long)]
        m: Option<usize>,
        /// Validate everything and exit without computing.
        #[arg(long)]
        dry_run: bool,
    },
    /// Run the configured simulation scenarios and write metrics.json and
    /// metrics.csv.
    Simulate {
        /// JSON run configuration.
        #[arg(long)]
        config: PathBuf,
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
        /// Override every scenario's seed (scenario i runs at seed+i).
        #[arg(long)]
        seed: Option<u64>,
        /// Worker pool size (default: available parallelism).
        #[arg(long)]
        workers: Option<usize>,
        /// Override every scenario's replicate count.
        #[arg(long)]
        reps: Option<usize>,
        /// Override every scenario's number of imputations.
        #[arg(long)]
        m: Option<usize>,
        /// Also write tidy per-figure plot data.
        #[arg(long)]
        emit_plot_data: bool,
        /// Validate everything and exit without computing.
        #[arg(long)]
        dry_run: bool,
    },
    /// Score a directory of imp_<k>.csv files against a fully observed
    /// truth table.
    Evaluate {
        /// Truth CSV with the same columns as the imputations.
        #[arg(long)]
        truth: PathBuf,
        /// Directory holding imp_1.csv .. imp_m.csv.
        #[arg(long)]
        imputed_dir: PathBuf,
        /// Output directory (defaults to the imputed directory).
        #[arg(long)]
        out: Option<PathBuf>,
        /// Validate everything and exit without computing.
        #[arg(long)]
        dry_run: bool,
    },
}

/// Validation failures exit 2; runtime computation failures exit 3.
fn exit_code_for(err: &Error) -> u8 {
    match err {
        Error::Config(_) | Error::Data(_) | Error::Domain(_) => 2,
        Error::Pooling(_) | Error::Imputation(_) => 3,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Impute {
            data,
            config,
            out,
            seed,
            workers,
            m,
            dry_run,
        } => commands::impute(&data, &config, &out, seed, workers, m, dry_run),
        Command::Simulate {
            config,
            out,
            seed,
            workers,
            reps,
            m,
            emit_plot_data,
            dry_run,
        } => commands::simulate(&config, &out, seed, workers, reps, m, emit_plot_data, dry_run),
        Command::Evaluate {
            truth,
            imputed_dir,
            out,
            dry_run,
        } => commands::evaluate(&truth, &imputed_dir, out.as_deref(), dry_run),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code_for(&e))
        }
    }
}
