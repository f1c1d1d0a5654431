//! Command-line entry points tying generation, training, registration,
//! evaluation, sweeps and reporting into reproducible experiments.
//!
//! Exit codes: 0 success, 1 usage/config error, 2 I/O failure, 3 numerical
//! divergence.

mod commands;
mod config;
mod plot;

use std::process::ExitCode;

use clap::error::ErrorKind;
use clap::{Parser, Subcommand};

use atlasreg::Error;

#[derive(Parser)]
#[command(name = "atlasreg", version, about = "Atlas-based registration experiments")]
pub struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic benchmark dataset.
    Gen(commands::GenArgs),
    /// Train a registration model on a generated dataset.
    Train(commands::TrainArgs),
    /// Register one image onto the atlas with a trained checkpoint.
    Register(commands::RegisterArgs),
    /// Evaluate a checkpoint's registration error on a dataset split.
    Eval(commands::EvalArgs),
    /// Train one model per lambda grid cell and tabulate the errors.
    Sweep(commands::SweepArgs),
    /// Render loss-curve plots and summary tables for finished runs.
    Report(commands::ReportArgs),
}

fn exit_code_for(err: &Error) -> u8 {
    match err {
        Error::Diverged { .. } => 3,
        Error::Io { .. } => 2,
        _ => 1,
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // Help/version are successful exits; everything else is usage.
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                print!("{e}");
                return ExitCode::SUCCESS;
            }
            eprint!("{e}");
            return ExitCode::from(1);
        }
    };
    let result = match cli.command {
        Command::Gen(args) => commands::run_gen(args),
        Command::Train(args) => commands::run_train(args),
        Command::Register(args) => commands::run_register(args),
        Command::Eval(args) => commands::run_eval(args),
        Command::Sweep(args) => commands::run_sweep(args),
        Command::Report(args) => commands::run_report(args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code_for(&e))
        }
    }
}
