//! `rcbf`: trainer, simulator, and calibration reporter for the robust CBF
//! safety filter.
//!
//! Exit codes: 0 success, 2 usage/config error, 3 numerical failure.

mod calibrate;
mod config;
mod run;
mod train;

use clap::Parser;

/// Command error carrying its exit code.
#[derive(Debug)]
pub enum AppError {
    /// Bad flags, unreadable/unparseable files, invalid configuration.
    Usage(String),
    /// Training divergence or any numerical failure mid-computation.
    Numeric(String),
}

impl AppError {
    pub fn usage(msg: impl Into<String>) -> Self {
        AppError::Usage(msg.into())
    }
    pub fn numeric(msg: impl Into<String>) -> Self {
        AppError::Numeric(msg.into())
    }
    fn exit_code(&self) -> u8 {
        match self {
            AppError::Usage(_) => 2,
            AppError::Numeric(_) => 3,
        }
    }
    fn message(&self) -> &str {
        match self {
            AppError::Usage(m) | AppError::Numeric(m) => m,
        }
    }
}

#[derive(Parser)]
#[command(
    name = "rcbf",
    about = "Robust control-barrier-function safety filter: train, simulate, calibrate",
    version
)]
enum Cli {
    /// Fit disturbance-model hyperparameters and write a model bundle
    Train(train::TrainArgs),
    /// Run a Monte-Carlo campaign in one filter mode
    Run(run::RunArgs),
    /// Report empirical confidence-set coverage from trial records
    Calibrate(calibrate::CalibrateArgs),
}

fn main() -> std::process::ExitCode {
    env_logger::init();
    let cli = Cli::parse();
    let result = match &cli {
        Cli::Train(args) => train::cmd_train(args),
        Cli::Run(args) => run::cmd_run(args),
        Cli::Calibrate(args) => calibrate::cmd_calibrate(args),
    };
    match result {
        Ok(()) => std::process::ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e.message());
            std::process::ExitCode::from(e.exit_code())
        }
    }
}
