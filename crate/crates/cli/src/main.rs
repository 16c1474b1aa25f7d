use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use saconv::model::Arch;

mod commands;
mod manifest;

#[derive(Parser)]
#[command(name = "saconv", version, about = "Attention-augmented CNN for extreme precipitation days")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic data directory (grids, precipitation series, planted truth).
    Synth {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 1000)]
        days: usize,
        /// Dipole amplitude in background standard deviations.
        #[arg(long, default_value_t = 2.0)]
        signal: f64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Label days whose precipitation exceeds a percentile threshold.
    Label {
        #[arg(long)]
        precip: PathBuf,
        #[arg(long, default_value_t = 0.95)]
        percentile: f64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train one architecture and write checkpoint, log and manifest.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        arch: Option<Arch>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score a checkpoint on a data directory.
    Evaluate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_enum, default_value_t = commands::Split::Test)]
        split: commands::Split,
        #[arg(long)]
        out: PathBuf,
    },
    /// Repeated training across percentile thresholds, aggregated as mean and SEM.
    Sweep {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        arch: Option<Arch>,
        #[arg(long, default_value_t = 5)]
        runs: usize,
        /// `lo:hi` in steps of 0.01, or a comma-separated list.
        #[arg(long, default_value = "0.91:0.95")]
        percentiles: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Compare every parameter gradient against central finite differences.
    Gradcheck {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = saconv::gradcheck::DEFAULT_TOLERANCE)]
        tolerance: f64,
    },
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let result = match cli.command {
        Command::Synth { seed, days, signal, out } => commands::synth(seed, days, signal, &out),
        Command::Label { precip, percentile, out } => commands::label(&precip, percentile, &out),
        Command::Train {
            data,
            config,
            arch,
            seed,
            out,
        } => commands::train(&data, config.as_deref(), arch, seed, &out),
        Command::Evaluate {
            checkpoint,
            data,
            split,
            out,
        } => commands::evaluate(&checkpoint, &data, split, &out),
        Command::Sweep {
            data,
            config,
            arch,
            runs,
            percentiles,
            seed,
            out,
        } => commands::sweep(&data, config.as_deref(), arch, runs, &percentiles, seed, &out),
        Command::Gradcheck { config, seed, tolerance } => commands::gradcheck(config.as_deref(), seed, tolerance),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_io() { 2 } else { 1 })
        }
    }
}
