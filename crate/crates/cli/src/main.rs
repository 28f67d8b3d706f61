//! Experiment driver for pooled-measurement designs: sampled recovery
//! sweeps, deterministic recursion sweeps, potential analysis, and convex
//! baselines, all emitting CSV tables with JSON sidecars.

mod commands;
mod config;
mod output;

use clap::{Parser, Subcommand};

use commands::CliError;
use config::Overrides;

#[derive(Parser)]
#[command(
    name = "scamp",
    version,
    about = "Spatially coupled test designs and message-passing recovery"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Sample designs and summarize block densities; optionally export
    /// reconstructable instances.
    Design {
        #[command(flatten)]
        overrides: Overrides,
        /// Also write one instance descriptor per (delta, seed).
        #[arg(long)]
        export: bool,
        /// Write signal and observation payloads next to each descriptor.
        #[arg(long, requires = "export")]
        payload: bool,
    },
    /// Run a recovery loop over (delta, seed) and summarize the metrics.
    Simulate {
        #[command(flatten)]
        overrides: Overrides,
    },
    /// Sweep the deterministic recursions; no sampling involved.
    Se {
        #[command(flatten)]
        overrides: Overrides,
    },
    /// Sweep the scalar potential and tabulate its stationary points.
    Potential {
        #[command(flatten)]
        overrides: Overrides,
    },
    /// Run a convex baseline on raw counts at a capped item count.
    Baseline {
        #[command(flatten)]
        overrides: Overrides,
    },
}

fn main() {
    let cli = Cli::parse();
    let outcome = match &cli.command {
        Command::Design { overrides, export, payload } => {
            commands::design::run(overrides, *export, *payload)
        }
        Command::Simulate { overrides } => commands::simulate::run(overrides),
        Command::Se { overrides } => commands::se::run(overrides),
        Command::Potential { overrides } => commands::potential::run(overrides),
        Command::Baseline { overrides } => commands::baseline::run(overrides),
    };
    let code = match outcome {
        Ok(()) => 0,
        Err(CliError::Config(e)) => {
            eprintln!("configuration error: {e:#}");
            2
        }
        Err(CliError::Numeric(e)) => {
            eprintln!("numerical failure: {e:#}");
            3
        }
    };
    std::process::exit(code);
}
