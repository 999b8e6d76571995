//! `ltdarts`: data preparation, search runs, evaluation, sweeps and probes.

mod cmd;
mod io;

use std::process::ExitCode;

use clap::{Parser, Subcommand};

/// Directory holding the CIFAR-10 binary batches, used when no explicit path
/// is given.
pub const DATA_DIR_ENV: &str = "LTDARTS_DATA_DIR";

#[derive(Parser)]
#[command(
    name = "ltdarts",
    version,
    about = "Architecture search with a bilateral-branch network on long-tailed data"
)]
struct Cli {
    /// Log progress to stderr (RUST_LOG overrides).
    #[arg(short, long, global = true)]
    verbose: bool,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Build a long-tailed subset and write its manifest.
    MakeLongtail(cmd::longtail::Args),
    /// Run one search.
    Train(cmd::train::Args),
    /// Accuracy of a checkpoint at one mixing ratio.
    Eval(cmd::eval::EvalArgs),
    /// Accuracy of a checkpoint across a grid of mixing ratios.
    SweepMu(cmd::eval::SweepArgs),
    /// Backbone and head gradients as a function of the mixing ratio.
    ProbeTheorem1(cmd::probe::Args),
    /// Six-method comparison across seeds.
    Matrix(cmd::matrix::Args),
    /// Finite-difference check of every operator and a supernet.
    Gradcheck(cmd::gradcheck::Args),
    /// Write the derived architecture of a checkpoint.
    ExportArch(cmd::eval::ExportArgs),
}

/// Invalid input that is the caller's fault; exits with status 2.
#[derive(Debug)]
pub struct UsageError(pub String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

fn exit_code(err: &anyhow::Error) -> u8 {
    let usage = err.chain().any(|e| {
        e.is::<UsageError>()
            || matches!(
                e.downcast_ref::<ltdarts::Error>(),
                Some(ltdarts::Error::Config(_))
            )
    });
    if usage {
        2
    } else {
        1
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = if cli.verbose {
        log::LevelFilter::Info
    } else {
        log::LevelFilter::Warn
    };
    env_logger::Builder::new()
        .filter_level(level)
        .parse_default_env()
        .init();

    let result = match cli.command {
        Command::MakeLongtail(a) => cmd::longtail::run(a),
        Command::Train(a) => cmd::train::run(a),
        Command::Eval(a) => cmd::eval::run_eval(a),
        Command::SweepMu(a) => cmd::eval::run_sweep(a),
        Command::ProbeTheorem1(a) => cmd::probe::run(a),
        Command::Matrix(a) => cmd::matrix::run(a),
        Command::Gradcheck(a) => cmd::gradcheck::run(a),
        Command::ExportArch(a) => cmd::eval::run_export(a),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
