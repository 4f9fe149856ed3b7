//! Experiment runner behind the `online-ce` binary: configuration, multi-run
//! execution, artifact writing and the one-off diagnostics.

pub mod config;
pub mod diagnostics;
pub mod experiment;

use std::path::PathBuf;

use online_ce::algorithms::AlgorithmError;
use online_ce::analysis::AnalysisError;
use online_ce::estimation::EstimationError;
use online_ce::policy::PolicyError;
use online_ce::simulate::SimulationError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{path}: {message}")]
    Config { path: String, message: String },
    #[error("invalid configuration file: {0}")]
    Parse(String),
    #[error("{}: {source}", path.display())]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{0}")]
    Output(String),
    #[error("run {run} failed: {source}")]
    Run { run: usize, source: AlgorithmError },
    #[error(transparent)]
    Algorithm(#[from] AlgorithmError),
    #[error(transparent)]
    Analysis(#[from] AnalysisError),
    #[error(transparent)]
    Estimation(#[from] EstimationError),
    #[error(transparent)]
    Simulation(#[from] SimulationError),
    #[error(transparent)]
    Policy(#[from] PolicyError),
}

impl CliError {
    /// Process exit code: 2 for usage errors, 1 for runtime failures.
    pub fn exit_code(&self) -> i32 {
        match self {
            Self::Config { .. } | Self::Parse(_) => 2,
            _ => 1,
        }
    }
}
