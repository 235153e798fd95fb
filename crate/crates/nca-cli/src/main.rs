//! `nca` command-line entry point.
//!
//! Exit codes: 0 success, 2 configuration error, 3 divergence, 4 IO error,
//! 5 check failure.

mod args;
mod commands;

use std::process::ExitCode;

use clap::Parser;

use nca_embed::checkpoint::CheckpointError;
use nca_embed::data::DataError;
use nca_embed::eval::EvalError;
use nca_embed::trainer::TrainError;
use nca_embed::BankError;

#[derive(Debug)]
pub enum CliError {
    Config(String),
    Divergence(String),
    Io(String),
    CheckFailed(String),
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_) => 2,
            CliError::Divergence(_) => 3,
            CliError::Io(_) => 4,
            CliError::CheckFailed(_) => 5,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Config(m) => write!(f, "config: {m}"),
            CliError::Divergence(m) => write!(f, "divergence: {m}"),
            CliError::Io(m) => write!(f, "io: {m}"),
            CliError::CheckFailed(m) => write!(f, "check failed: {m}"),
        }
    }
}

impl From<DataError> for CliError {
    fn from(e: DataError) -> Self {
        match e {
            DataError::InvalidSpec(_) | DataError::OverlappingClassSets { .. } => {
                CliError::Config(e.to_string())
            }
            _ => CliError::Io(e.to_string()),
        }
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::Diverged { .. } => CliError::Divergence(e.to_string()),
            _ => CliError::Config(e.to_string()),
        }
    }
}

impl From<CheckpointError> for CliError {
    fn from(e: CheckpointError) -> Self {
        CliError::Io(e.to_string())
    }
}

impl From<EvalError> for CliError {
    fn from(e: EvalError) -> Self {
        CliError::Config(e.to_string())
    }
}

impl From<BankError> for CliError {
    fn from(e: BankError) -> Self {
        CliError::Config(e.to_string())
    }
}

fn main() -> ExitCode {
    let cli = args::Cli::parse();
    let result = match cli.command {
        args::Command::Train(a) => commands::cmd_train(a),
        args::Command::Eval(a) => commands::cmd_eval(a),
        args::Command::Induction(a) => commands::cmd_induction(a),
        args::Command::Fewshot(a) => commands::cmd_fewshot(a),
        args::Command::Gradcheck(a) => commands::cmd_gradcheck(a),
        args::Command::Synth(a) => commands::cmd_synth(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
