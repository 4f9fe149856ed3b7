//! Pathwise policy gradients through the model and the Adam training loop.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::{Activations, Adam, AdamConfig, BackwardScratch, MlpParams, PolicyError};
use crate::dynamics::Linearize;
use crate::simulate::CostFunction;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainerConfig {
    pub adam: AdamConfig,
    /// Adam steps per call.
    pub steps: usize,
    /// Model rollouts averaged per step.
    pub batch: usize,
    pub horizon: usize,
    /// A batch cost above this (or non-finite) aborts the round.
    pub divergence_threshold: f64,
}

impl Default for TrainerConfig {
    fn default() -> Self {
        Self {
            adam: AdamConfig::default(),
            steps: 200,
            batch: 16,
            horizon: 20,
            divergence_threshold: 1e6,
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub params: MlpParams,
    pub diverged: bool,
    pub steps_taken: usize,
    /// Batch objective at the last completed step.
    pub last_cost: f64,
}

/// Buffers for one batched model rollout and its reverse pass.
#[derive(Debug, Default)]
pub struct TrainingTape {
    states: Vec<f64>,
    inputs: Vec<f64>,
    wrt_state: Vec<f64>,
    wrt_input: Vec<f64>,
    acts: Vec<Activations>,
    adjoint: Vec<f64>,
    next_adjoint: Vec<f64>,
    grad_input: Vec<f64>,
    grad_u: Vec<f64>,
    scratch: BackwardScratch,
}

/// Mean total cost of `batch` model rollouts of the MLP policy and its exact
/// gradient in the network parameters, for fixed process noise.
///
/// `noise` holds standard-normal draws laid out `[rollout][step][coordinate]`;
/// they are scaled by the system's noise standard deviations. Returns
/// `f64::INFINITY` (and leaves `grad` unspecified) if a state stops being finite.
#[allow(clippy::too_many_arguments)]
pub fn pathwise_objective_gradient<S: Linearize + ?Sized>(
    system: &S,
    params: &MlpParams,
    phi: &[f64],
    cost: &CostFunction,
    horizon: usize,
    noise: &[f64],
    tape: &mut TrainingTape,
    grad: &mut [f64],
) -> Result<f64, PolicyError> {
    let dx = system.state_dim();
    let du = system.input_dim();
    let batch = noise.len() / (horizon * dx).max(1);
    if params.input_dim() != dx || params.output_dim() != du {
        return Err(PolicyError::Dimension {
            expected: dx,
            got: params.input_dim(),
        });
    }
    if noise.len() != batch * horizon * dx || grad.len() != params.len() {
        return Err(PolicyError::Dimension {
            expected: batch * horizon * dx,
            got: noise.len(),
        });
    }
    let (q, r) = cost.weights();
    let std = system.noise_std();
    let x1 = system.initial_state();

    tape.states.resize((horizon + 1) * batch * dx, 0.0);
    tape.inputs.resize(horizon * batch * du, 0.0);
    tape.wrt_state.resize(horizon * batch * dx * dx, 0.0);
    tape.wrt_input.resize(horizon * batch * dx * du, 0.0);
    tape.acts.resize_with(horizon, Activations::default);
    for row in tape.states[..batch * dx].chunks_exact_mut(dx) {
        row.copy_from_slice(x1);
    }

    let mut total = 0.0;
    let mut next = vec![0.0; dx];
    for t in 0..horizon {
        let (past, future) = tape.states.split_at_mut((t + 1) * batch * dx);
        let xs = &past[t * batch * dx..];
        let xs_next = &mut future[..batch * dx];
        params.forward_batch(xs, batch, &mut tape.acts[t]);
        let us = &mut tape.inputs[t * batch * du..(t + 1) * batch * du];
        us.copy_from_slice(tape.acts[t].output());
        for b in 0..batch {
            let x = &xs[b * dx..(b + 1) * dx];
            let u = &us[b * du..(b + 1) * du];
            total += cost.stage(x, u);
            let lin = (t * batch + b) * dx;
            system.linearize_into(
                x,
                u,
                phi,
                &mut tape.wrt_state[lin * dx..(lin + dx) * dx],
                &mut tape.wrt_input[lin * du..(lin + dx) * du],
            )?;
            system.mean_step(x, u, phi, &mut next)?;
            let w = &noise[(b * horizon + t) * dx..(b * horizon + t + 1) * dx];
            for i in 0..dx {
                xs_next[b * dx + i] = next[i] + std[i] * w[i];
            }
        }
        if !total.is_finite() || xs_next.iter().any(|v| !v.is_finite()) {
            return Ok(f64::INFINITY);
        }
    }

    grad.fill(0.0);
    tape.adjoint.clear();
    tape.adjoint.resize(batch * dx, 0.0);
    tape.next_adjoint.resize(batch * dx, 0.0);
    tape.grad_input.resize(batch * dx, 0.0);
    tape.grad_u.resize(batch * du, 0.0);
    for t in (0..horizon).rev() {
        let xs = &tape.states[t * batch * dx..(t + 1) * batch * dx];
        let us = &tape.inputs[t * batch * du..(t + 1) * batch * du];
        for b in 0..batch {
            let lam = &tape.adjoint[b * dx..(b + 1) * dx];
            let lin = (t * batch + b) * dx;
            let a = &tape.wrt_state[lin * dx..(lin + dx) * dx];
            let bm = &tape.wrt_input[lin * du..(lin + dx) * du];
            for k in 0..du {
                let mut g = 2.0 * r * us[b * du + k];
                for i in 0..dx {
                    g += bm[i * du + k] * lam[i];
                }
                tape.grad_u[b * du + k] = g;
            }
            for j in 0..dx {
                let mut g = 2.0 * q * xs[b * dx + j];
                for i in 0..dx {
                    g += a[i * dx + j] * lam[i];
                }
                tape.next_adjoint[b * dx + j] = g;
            }
        }
        params.backward_batch(
            &tape.acts[t],
            &tape.grad_u,
            grad,
            &mut tape.grad_input,
            &mut tape.scratch,
        );
        for (n, g) in tape.next_adjoint.iter_mut().zip(&tape.grad_input) {
            *n += g;
        }
        std::mem::swap(&mut tape.adjoint, &mut tape.next_adjoint);
    }
    let inv = 1.0 / batch as f64;
    grad.iter_mut().for_each(|g| *g *= inv);
    Ok(total * inv)
}

/// Runs Adam on the model-simulated cost starting from `init`.
///
/// Each step draws fresh process noise from `rng`. If the batch cost exceeds
/// the divergence threshold, the best parameters seen so far are returned and
/// the outcome is flagged.
pub fn train_mlp_ce<S: Linearize + ?Sized, R: Rng + ?Sized>(
    system: &S,
    init: &MlpParams,
    phi: &[f64],
    cost: &CostFunction,
    config: &TrainerConfig,
    rng: &mut R,
) -> Result<TrainOutcome, PolicyError> {
    let mut params = init.clone();
    let mut best = init.clone();
    let mut best_cost = f64::INFINITY;
    let mut adam = Adam::new(config.adam, params.len());
    let mut grad = vec![0.0; params.len()];
    let mut noise = vec![0.0; config.batch * config.horizon * system.state_dim()];
    let mut tape = TrainingTape::default();
    let mut last_cost = f64::NAN;
    for step in 0..config.steps {
        for w in &mut noise {
            *w = rng.sample(StandardNormal);
        }
        let c = pathwise_objective_gradient(system, &params, phi, cost, config.horizon, &noise, &mut tape, &mut grad)?;
        if !(c <= config.divergence_threshold) || grad.iter().any(|g| !g.is_finite()) {
            return Ok(TrainOutcome {
                params: best,
                diverged: true,
                steps_taken: step,
                last_cost,
            });
        }
        if c < best_cost {
            best_cost = c;
            best.as_mut_slice().copy_from_slice(params.as_slice());
        }
        last_cost = c;
        adam.update(params.as_mut_slice(), &grad);
    }
    Ok(TrainOutcome {
        params,
        diverged: false,
        steps_taken: config.steps,
        last_cost,
    })
}
