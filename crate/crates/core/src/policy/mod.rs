//! Playable controllers and the MLP trainer used for approximate certainty
//! equivalence.

mod adam;
mod mlp;
mod train;

use std::sync::Arc;

use rand::Rng;
use thiserror::Error;

use crate::dynamics::{toy_drift, DynParams, DynamicsError};

pub use adam::{Adam, AdamConfig};
pub use mlp::{parameter_count, Activations, BackwardScratch, MlpParams, MlpSidecar, CARTPOLE_LAYERS};
pub use train::{pathwise_objective_gradient, train_mlp_ce, TrainOutcome, TrainerConfig, TrainingTape};

#[derive(Debug, Error)]
pub enum PolicyError {
    #[error("layer sizes {0:?} must have at least two positive entries")]
    Topology(Vec<usize>),
    #[error("expected {expected} parameters, got {got}")]
    ParameterCount { expected: usize, got: usize },
    #[error("input has dimension {got}, expected {expected}")]
    Dimension { expected: usize, got: usize },
    #[error("energy budget must be positive and finite, got {0}")]
    InvalidBudget(f64),
    #[error("parameter blob: {0}")]
    Blob(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Dynamics(#[from] DynamicsError),
}

/// A controller that can be rolled out.
#[derive(Debug, Clone)]
pub enum PolicySpec {
    /// Feedback-linearizing certainty-equivalent controller for the toy plant.
    ToyCe {
        phi_hat: DynParams,
        gain: f64,
    },
    /// Open-loop uniform noise rescaled to a fixed total energy per episode.
    EnergyBudgetNoise {
        budget: f64,
        input_dim: usize,
    },
    Mlp(Arc<MlpParams>),
}

impl PolicySpec {
    pub fn tag(&self) -> &'static str {
        match self {
            Self::ToyCe { .. } => "toy-ce",
            Self::EnergyBudgetNoise { .. } => "energy-noise",
            Self::Mlp(_) => "mlp",
        }
    }

    pub fn is_deterministic(&self) -> bool {
        !matches!(self, Self::EnergyBudgetNoise { .. })
    }

    pub fn input_dim(&self) -> usize {
        match self {
            Self::ToyCe { .. } => 2,
            Self::EnergyBudgetNoise { input_dim, .. } => *input_dim,
            Self::Mlp(p) => p.output_dim(),
        }
    }

    /// Prepares the controller for one episode. Stochastic policies consume
    /// their randomness here, before any process noise is drawn.
    pub fn actor<R: Rng + ?Sized>(&self, horizon: usize, rng: &mut R) -> Result<Actor<'_>, PolicyError> {
        Ok(match self {
            Self::ToyCe { phi_hat, gain } => Actor::ToyCe {
                phi_hat: phi_hat.as_slice(),
                gain: *gain,
            },
            Self::EnergyBudgetNoise { budget, input_dim } => Actor::Schedule {
                inputs: energy_budget_noise(horizon, *input_dim, *budget, rng)?,
                input_dim: *input_dim,
            },
            Self::Mlp(params) => Actor::Mlp {
                params,
                acts: Activations::default(),
            },
        })
    }
}

/// Per-episode instance of a [`PolicySpec`].
#[derive(Debug)]
pub enum Actor<'a> {
    ToyCe { phi_hat: &'a [f64], gain: f64 },
    Schedule { inputs: Vec<f64>, input_dim: usize },
    Mlp { params: &'a MlpParams, acts: Activations },
}

impl Actor<'_> {
    /// Writes `u_t` for zero-based step `t` at state `x`.
    pub fn act(&mut self, t: usize, x: &[f64], u: &mut [f64]) -> Result<(), PolicyError> {
        match self {
            Self::ToyCe { phi_hat, gain } => {
                let v = toy_ce_policy(*gain, phi_hat, x)?;
                u.copy_from_slice(&v);
            }
            Self::Schedule { inputs, input_dim } => {
                u.copy_from_slice(&inputs[t * *input_dim..(t + 1) * *input_dim]);
            }
            Self::Mlp { params, acts } => {
                if x.len() != params.input_dim() {
                    return Err(PolicyError::Dimension {
                        expected: params.input_dim(),
                        got: x.len(),
                    });
                }
                params.forward_batch(x, 1, acts);
                u.copy_from_slice(acts.output());
            }
        }
        Ok(())
    }
}

/// `u = −(x + drift(x, φ̂))`, which zeroes the mean next state when φ̂ is exact.
pub fn toy_ce_policy(gain: f64, phi_hat: &[f64], x: &[f64]) -> Result<[f64; 2], PolicyError> {
    for v in [x.len(), phi_hat.len()] {
        if v != 2 {
            return Err(PolicyError::Dimension { expected: 2, got: v });
        }
    }
    let g = toy_drift(gain, x, phi_hat);
    Ok([-(x[0] + g[0]), -(x[1] + g[1])])
}

/// Draws `horizon × input_dim` values uniformly from `[−1, 1]` and rescales
/// them so that their squares sum to `budget`.
pub fn energy_budget_noise<R: Rng + ?Sized>(
    horizon: usize,
    input_dim: usize,
    budget: f64,
    rng: &mut R,
) -> Result<Vec<f64>, PolicyError> {
    if !(budget > 0.0) || !budget.is_finite() {
        return Err(PolicyError::InvalidBudget(budget));
    }
    let n = horizon * input_dim;
    let mut u = vec![0.0; n];
    if n == 0 {
        return Ok(u);
    }
    loop {
        for v in &mut u {
            *v = rng.random_range(-1.0..=1.0);
        }
        let energy: f64 = u.iter().map(|v| v * v).sum();
        if energy > 0.0 {
            let scale = (budget / energy).sqrt();
            u.iter_mut().for_each(|v| *v *= scale);
            return Ok(u);
        }
    }
}
