//! Diagnostics: Fisher information and persistence of excitation, a
//! Lojasiewicz-constant probe, and regret-rate fits.

mod fisher;
mod probe;
mod rate;

use thiserror::Error;

use crate::dynamics::DynamicsError;
use crate::estimation::EstimationError;
use crate::simulate::SimulationError;

pub use fisher::{fisher_information, sorted_eigenvalues, FisherConfig, FisherEstimate};
pub use probe::{
    gradient_oracle_check, lojasiewicz_probe, prediction_error_gaps, ring_grid, GradientOracleCheck, ProbeCandidate,
    ProbeConfig, ProbeReport, DEFAULT_ANGLES, DEFAULT_RADII,
};
pub use rate::{fit_rate, RateFit, RateModel, MIN_POINTS};

#[derive(Debug, Error)]
pub enum AnalysisError {
    #[error("need at least {min} samples, got {0}", min = MIN_POINTS)]
    TooFewSamples(usize),
    #[error("abscissa {0} is not positive")]
    NonPositiveAbscissa(f64),
    #[error("all abscissae are equal")]
    DegenerateAbscissa,
    #[error("probe exponent must be positive, got {0}")]
    InvalidExponent(f64),
    #[error("a probe candidate coincides with the true parameter")]
    CandidateAtOptimum,
    #[error("ring grids are defined for one or two dimensions, got {0}")]
    GridDimension(usize),
    #[error(transparent)]
    Simulation(#[from] SimulationError),
    #[error(transparent)]
    Estimation(#[from] EstimationError),
    #[error(transparent)]
    Dynamics(#[from] DynamicsError),
}
