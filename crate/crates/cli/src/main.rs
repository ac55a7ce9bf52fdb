//! `kramers` — batch frontend for spin-Hamiltonian levels, transition
//! screening, field–frequency maps, ZEFOZ searches, echo simulation and the
//! decay/parameter fits.
//!
//! Design constraints, enforced across every subcommand:
//! - outputs are a pure function of (input files, flags, seed) — no clocks,
//!   no ambient entropy, and `--threads` only changes wall time;
//! - every output file opens with a `#` header naming the tool version, the
//!   generating command, the seed, and a SHA-256 digest per input;
//! - failures exit with a class-specific code (2 usage, 3 I/O,
//!   4 validation, 5 compute) and one JSON error line on stderr.

mod commands;
mod fail;
mod meta;
mod sweep;
mod tables;

use clap::{Parser, Subcommand};

use fail::{Failure, EXIT_COMPUTE, EXIT_USAGE};

#[derive(Parser)]
#[command(
    name = "kramers",
    version,
    about = "Hyperfine levels, clock-transition search, spectra and echo dynamics for Kramers ions",
    arg_required_else_help = true
)]
struct Cli {
    /// Worker threads; 0 keeps the library default. Never changes results.
    #[arg(long, global = true, default_value_t = 0)]
    threads: usize,
    /// Seed for every stochastic step; recorded in all output headers.
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Energy levels over a field path (sorted, or adiabatically tracked)
    Levels(commands::LevelsArgs),
    /// Frequencies, strengths, gradients and curvatures at one field point
    Transitions(commands::TransitionsArgs),
    /// Field–frequency intensity map over a colinear sweep
    Map(commands::MapArgs),
    /// Search a field box for zero-first-order-Zeeman points of a transition
    Zefoz(commands::ZefozArgs),
    /// Integrate a pulsed-echo sequence over an inhomogeneous ensemble
    EchoSim(commands::EchoSimArgs),
    /// Fit a coherence time to an echo-decay table
    FitT2(commands::FitT2Args),
    /// Fit a population lifetime and classify the decaying level
    FitLifetime(commands::FitLifetimeArgs),
    /// Re-fit spin-Hamiltonian parameters against observed lines
    FitHam(commands::FitHamArgs),
}

fn main() {
    let cli = Cli::parse();

    if cli.threads > 0 {
        if let Err(err) = rayon::ThreadPoolBuilder::new()
            .num_threads(cli.threads)
            .build_global()
        {
            Failure {
                exit: EXIT_COMPUTE,
                kind: "thread-pool",
                message: err.to_string(),
            }
            .report_and_exit();
        }
    }

    let result = match &cli.command {
        Command::Levels(args) => commands::levels(args, cli.seed),
        Command::Transitions(args) => commands::transitions(args, cli.seed),
        Command::Map(args) => commands::map(args, cli.seed),
        Command::Zefoz(args) => commands::zefoz(args, cli.seed),
        Command::EchoSim(args) => commands::echo_sim(args, cli.seed),
        Command::FitT2(args) => commands::fit_t2(args, cli.seed),
        Command::FitLifetime(args) => commands::fit_lifetime_cmd(args, cli.seed),
        Command::FitHam(args) => commands::fit_ham(args, cli.seed),
    };
    if let Err(failure) = result {
        failure.report_and_exit();
    }
}

// Referenced from the exit-code table in `fail`; clap produces it.
const _: i32 = EXIT_USAGE;
