//! `nlgrad`: batch experiment runner for the nonlocal gradient calculus
//! library. Exit status 0 when every configured tolerance passes, 1 on a
//! runtime failure, 2 on a malformed configuration.

mod battery;
mod commands;
mod config;
mod output;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use commands::{dispatch, RunContext};
use config::CommandKind;

#[derive(Parser)]
#[command(
    name = "nlgrad",
    about = "Nonlocal gradient calculus: identity suites, energy minimization, Poincare constants, parameter sweeps"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the full identity residual battery
    Identities(RunArgs),
    /// Minimize a stored energy under a volumetric Dirichlet datum
    Minimize(RunArgs),
    /// Estimate the discrete Poincare constant over a parameter sweep
    Poincare(RunArgs),
    /// Cross the sweep axes and run the battery at every point
    Sweep(RunArgs),
}

#[derive(Args)]
struct RunArgs {
    /// Path to the JSON experiment configuration
    #[arg(long)]
    config: PathBuf,
    /// Output directory (overrides the config's `output_dir`)
    #[arg(long)]
    out: Option<PathBuf>,
    /// Worker thread count (overrides the config's `threads`)
    #[arg(long)]
    threads: Option<usize>,
    /// Random seed (overrides the config's `seed`)
    #[arg(long)]
    seed: Option<u64>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let (kind, args) = match &cli.command {
        Command::Identities(a) => (CommandKind::Identities, a),
        Command::Minimize(a) => (CommandKind::Minimize, a),
        Command::Poincare(a) => (CommandKind::Poincare, a),
        Command::Sweep(a) => (CommandKind::Sweep, a),
    };

    let text = match std::fs::read_to_string(&args.config) {
        Ok(t) => t,
        Err(e) => {
            eprintln!("config error: cannot read {}: {e}", args.config.display());
            return ExitCode::from(2);
        }
    };
    let mut config = match config::parse_and_validate(&text, kind) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("{e}");
            return ExitCode::from(2);
        }
    };
    if let Some(t) = args.threads {
        config.threads = Some(t);
    }
    if let Some(s) = args.seed {
        config.seed = s;
    }
    let out_dir = args
        .out
        .clone()
        .unwrap_or_else(|| PathBuf::from(&config.output_dir));
    let hash = output::config_hash(&text);

    let ctx = RunContext {
        config,
        out_dir,
        hash,
    };

    let run = || match dispatch(&ctx) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => {
            eprintln!("completed with tolerance failures (see summary output)");
            ExitCode::from(1)
        }
        Err(e) => {
            eprintln!("{e}");
            ExitCode::from(1)
        }
    };

    match ctx.config.threads {
        Some(t) => {
            let pool = match rayon::ThreadPoolBuilder::new().num_threads(t).build() {
                Ok(p) => p,
                Err(e) => {
                    eprintln!("stage `thread pool` failed: {e}");
                    return ExitCode::from(1);
                }
            };
            pool.install(run)
        }
        None => run(),
    }
}
