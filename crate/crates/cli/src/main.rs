//! `pddkit`: pointwise distance distributions, earth mover's distances,
//! MDS maps, and a small set-transformer regressor, batch-style over CIF
//! corpora. Every run writes a manifest; exit codes are 0 (success),
//! 2 (input or validation error), 3 (numerical failure).

mod commands;
mod ingest;
mod run;

use std::process::ExitCode;

use clap::{Parser, Subcommand};

use run::CliError;

#[derive(Parser)]
#[command(name = "pddkit", version, about = "Crystal invariants and comparison toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Compute PDD invariants for CIF files.
    Pdd(commands::pdd::PddArgs),
    /// Compute AMD vectors (weighted PDD column means) for CIF files.
    Amd(commands::pdd::AmdArgs),
    /// Earth mover's distance between PDDs, pairwise or as a matrix.
    Dist(commands::dist::DistArgs),
    /// Project a distance matrix into 2 or 3 dimensions.
    Mds(commands::mds::MdsArgs),
    /// Train the set-transformer regressor on CIFs plus targets.
    Train(commands::train::TrainArgs),
    /// Predict with a trained checkpoint.
    Predict(commands::predict::PredictArgs),
    /// Measure PDD and EMD wall-clock scaling over motif sizes.
    Bench(commands::bench::BenchArgs),
    /// Generate a random CIF corpus.
    Gen(commands::gen::GenArgs),
}

/// PDDKIT_THREADS caps the rayon pool; unset means one thread per core.
fn configure_threads() -> Result<(), CliError> {
    match std::env::var("PDDKIT_THREADS") {
        Ok(raw) => {
            let n: usize = raw.parse().ok().filter(|&n| n > 0).ok_or_else(|| {
                CliError::Usage(format!("PDDKIT_THREADS must be a positive integer, got {raw:?}"))
            })?;
            rayon::ThreadPoolBuilder::new()
                .num_threads(n)
                .build_global()
                .map_err(|e| CliError::Usage(format!("cannot configure thread pool: {e}")))
        }
        Err(_) => Ok(()),
    }
}

fn dispatch() -> Result<(), CliError> {
    configure_threads()?;
    let cli = Cli::parse();
    match &cli.command {
        Command::Pdd(args) => commands::pdd::run(args),
        Command::Amd(args) => commands::pdd::run_amd(args),
        Command::Dist(args) => commands::dist::run(args),
        Command::Mds(args) => commands::mds::run(args),
        Command::Train(args) => commands::train::run(args),
        Command::Predict(args) => commands::predict::run(args),
        Command::Bench(args) => commands::bench::run(args),
        Command::Gen(args) => commands::gen::run(args),
    }
}

/// Rust ignores SIGPIPE by default, turning `pddkit ... | head` into a
/// panic on the first failed print. Restore the conventional disposition
/// so the process dies quietly when its reader goes away.
#[cfg(unix)]
fn reset_sigpipe() {
    unsafe {
        libc::signal(libc::SIGPIPE, libc::SIG_DFL);
    }
}

#[cfg(not(unix))]
fn reset_sigpipe() {}

fn main() -> ExitCode {
    reset_sigpipe();
    match dispatch() {
        Ok(()) => ExitCode::SUCCESS,
        Err(CliError::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
        Err(CliError::Numeric(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(3)
        }
    }
}
