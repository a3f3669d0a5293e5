mod commands;
mod manifest;
mod settings;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use commands::{EvaluateArgs, ExportArgs, OptimizeArgs, SceneArgs, SimulateArgs};

#[derive(Parser)]
#[command(name = "coded-tof", version, about = "Coded time-of-flight simulation and microlens mask optimization")]
struct Cli {
    /// `key = value` file with defaults for the command's flags.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Worker threads. Results do not depend on this.
    #[arg(long, global = true, default_value_t = 1)]
    threads: usize,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Render a parametric layered scene into a light field.
    Scene(SceneArgs),
    /// Capture a scene through a mask and reconstruct depth.
    Simulate(SimulateArgs),
    /// Jointly train a mask patch and the depth refiner.
    Optimize(Box<OptimizeArgs>),
    /// Score a mask (and refiner) on scenes.
    Evaluate(EvaluateArgs),
    /// Convert depth maps to PLY and masks to PGM or TNS1.
    Export(ExportArgs),
}

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Run(coded_tof::Error),
}

impl From<coded_tof::Error> for CliError {
    fn from(e: coded_tof::Error) -> Self {
        CliError::Run(e)
    }
}

pub struct Context {
    pub config: Option<PathBuf>,
    pub threads: usize,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    if cli.threads == 0 {
        eprintln!("error: --threads must be at least 1");
        return ExitCode::from(1);
    }
    // only the global pool; training builds its own with the same size
    let _ = rayon::ThreadPoolBuilder::new().num_threads(cli.threads).build_global();
    let ctx = Context {
        config: cli.config,
        threads: cli.threads,
    };
    let result = match &cli.command {
        Command::Scene(a) => commands::scene(&ctx, a),
        Command::Simulate(a) => commands::simulate(&ctx, a),
        Command::Optimize(a) => commands::optimize(&ctx, a),
        Command::Evaluate(a) => commands::evaluate(&ctx, a),
        Command::Export(a) => commands::export(&ctx, a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(CliError::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
        Err(CliError::Run(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
