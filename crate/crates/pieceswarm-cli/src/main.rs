//! `pieceswarm` orchestrates the library crate from TOML scenario files.
//!
//! Exit codes: 0 success; 2 configuration or usage error; 3 simulation or
//! I/O failure; 4 certificate search failure (`lyapunov` only).

mod commands;
mod config;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use commands::{
    cmd_analyze, cmd_lyapunov, cmd_simulate, cmd_sweep, cmd_watched, CmdError, CmdResult,
};
use config::{parse_scenario, Scenario};

#[derive(Parser)]
#[command(
    name = "pieceswarm",
    version,
    about = "Piece-swarm simulator and stability analyzer"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run replicated trajectories and write per-replication CSVs
    Simulate(RunArgs),
    /// Classify the configured swarm and write its margin table
    Analyze(RunArgs),
    /// Search for a negative-drift certificate at the configured point
    Lyapunov(RunArgs),
    /// Verdict plus empirical growth statistics across a parameter grid
    Sweep(RunArgs),
    /// Bookkeeping chain for the fast-download limit (Z histogram, trend)
    Watched(RunArgs),
}

#[derive(Args)]
struct RunArgs {
    /// Scenario TOML file
    #[arg(long, value_name = "PATH")]
    config: PathBuf,
    /// Directory for emitted CSVs
    #[arg(long, value_name = "DIR", default_value = "out")]
    out: PathBuf,
    /// Override the scenario's RNG seed
    #[arg(long)]
    seed: Option<u64>,
    /// Override the scenario's replication count
    #[arg(long)]
    replications: Option<u32>,
    /// Worker threads for replicated runs (default: all cores)
    #[arg(long)]
    threads: Option<usize>,
}

/// Restore default SIGPIPE handling so `pieceswarm ... | head` dies quietly
/// when the reader closes, instead of panicking on a failed print.
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
    let cli = Cli::parse();
    let (args, run): (&RunArgs, fn(&Scenario, &Path) -> CmdResult) = match &cli.command {
        Command::Simulate(a) => (a, cmd_simulate),
        Command::Analyze(a) => (a, cmd_analyze),
        Command::Lyapunov(a) => (a, cmd_lyapunov),
        Command::Sweep(a) => (a, cmd_sweep),
        Command::Watched(a) => (a, cmd_watched),
    };
    if let Some(threads) = args.threads {
        init_threads(threads);
    }

    let mut scenario = match parse_scenario(&args.config) {
        Ok(s) => s,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(2);
        }
    };
    if let Some(seed) = args.seed {
        scenario.seed = seed;
    }
    if let Some(reps) = args.replications {
        if reps == 0 {
            eprintln!("error: --replications must be at least 1");
            return ExitCode::from(2);
        }
        scenario.replications = reps;
    }

    match run(&scenario, &args.out) {
        Ok(()) => ExitCode::SUCCESS,
        Err(CmdError::Config(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
        Err(CmdError::Runtime(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(3)
        }
        Err(CmdError::Certificate(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(4)
        }
    }
}

#[cfg(feature = "parallel")]
fn init_threads(threads: usize) {
    if threads > 0 {
        // Failing means a pool already exists in this process; keep it.
        let _ = rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build_global();
    }
}

#[cfg(not(feature = "parallel"))]
fn init_threads(_threads: usize) {
    eprintln!("note: built without the parallel feature; --threads has no effect");
}
