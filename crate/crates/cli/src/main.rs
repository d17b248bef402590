mod commands;
mod error;
mod inputs;
mod manifest;

use std::process::ExitCode;

use clap::{Parser, Subcommand};

use crate::error::CliError;

/// Noise characterisation of surface-code syndrome extraction circuits with
/// averaged circuit eigenvalue sampling.
#[derive(Debug, Parser)]
#[command(name = "aces-lab", version, about)]
struct Cli {
    /// Worker threads; defaults to all available cores
    #[arg(long, global = true, env = "ACES_LAB_THREADS")]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a surface-code syndrome extraction circuit
    Circuit(commands::CircuitArgs),
    /// Optimise an experimental design against depolarising noise
    Optimise(commands::OptimiseArgs),
    /// Rebuild a design at another code distance
    Transfer(commands::TransferArgs),
    /// Simulate a design and estimate the gate noise
    Run(commands::RunArgs),
    /// Merit of a design across code distances, with quadratic fits
    Scaling(commands::ScalingArgs),
    /// Predicted performance of a design
    Merit(commands::MeritArgs),
    /// Repetition optima and merit curves of the single-layer toy model
    Toy(commands::ToyArgs),
}

fn run(cli: Cli) -> Result<(), CliError> {
    if let Some(t) = cli.threads {
        if t == 0 {
            return Err(CliError::usage("--threads must be at least 1"));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(t)
            .build_global()
            .map_err(|e| CliError::usage(e.to_string()))?;
    }
    match cli.command {
        Command::Circuit(a) => commands::circuit(a),
        Command::Optimise(a) => commands::optimise(a),
        Command::Transfer(a) => commands::transfer(a),
        Command::Run(a) => commands::run(a),
        Command::Scaling(a) => commands::scaling(a),
        Command::Merit(a) => commands::merit(a),
        Command::Toy(a) => commands::toy(a),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("aces-lab: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
