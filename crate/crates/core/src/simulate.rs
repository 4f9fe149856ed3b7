//! Episodic rollouts and Monte-Carlo cost estimation.

use std::io::Write;

use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dynamics::{DynamicsError, System};
use crate::policy::{Activations, PolicyError, PolicySpec};
use crate::seed::{StreamKey, StreamRng};

/// Fraction of excluded (non-finite) rollouts above which an estimate fails.
pub const MAX_EXCLUDED_FRACTION: f64 = 0.01;
const LOCKSTEP_CHUNK: usize = 256;

#[derive(Debug, Error)]
pub enum SimulationError {
    #[error("horizon must be at least 1")]
    EmptyHorizon,
    #[error("state became non-finite at step {step}")]
    Truncated { step: usize, partial: Box<Trajectory> },
    #[error("at least two rollouts are needed, got {0}")]
    TooFewRollouts(usize),
    #[error("{excluded} of {total} rollouts diverged")]
    TooManyExcluded { excluded: usize, total: usize },
    #[error(transparent)]
    Dynamics(#[from] DynamicsError),
    #[error(transparent)]
    Policy(#[from] PolicyError),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum CostFunction {
    /// `q·‖x‖² + r·‖u‖²`
    Quadratic { state_weight: f64, input_weight: f64 },
}

impl CostFunction {
    pub fn toy() -> Self {
        Self::Quadratic {
            state_weight: 1.0,
            input_weight: 0.0,
        }
    }

    pub fn cartpole() -> Self {
        Self::Quadratic {
            state_weight: 1.0,
            input_weight: 0.1,
        }
    }

    pub fn weights(&self) -> (f64, f64) {
        match *self {
            Self::Quadratic {
                state_weight,
                input_weight,
            } => (state_weight, input_weight),
        }
    }

    #[inline]
    pub fn stage(&self, x: &[f64], u: &[f64]) -> f64 {
        let (q, r) = self.weights();
        let xx: f64 = x.iter().map(|v| v * v).sum();
        let uu: f64 = u.iter().map(|v| v * v).sum();
        q * xx + r * uu
    }
}

/// One episode: states `x_1..x_{T+1}`, inputs and stage costs for `t = 1..T`.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub state_dim: usize,
    pub input_dim: usize,
    /// Row-major `(T + 1) × d_x`.
    pub states: Vec<f64>,
    /// Row-major `T × d_u`.
    pub inputs: Vec<f64>,
    pub costs: Vec<f64>,
    pub total_cost: f64,
}

impl Trajectory {
    pub fn horizon(&self) -> usize {
        self.costs.len()
    }

    /// Zero-based state `x_{t+1}`.
    pub fn state(&self, t: usize) -> &[f64] {
        &self.states[t * self.state_dim..(t + 1) * self.state_dim]
    }

    pub fn input(&self, t: usize) -> &[f64] {
        &self.inputs[t * self.input_dim..(t + 1) * self.input_dim]
    }

    /// Regression triples `(x_t, u_t, x_{t+1})`.
    pub fn transitions(&self) -> impl Iterator<Item = (&[f64], &[f64], &[f64])> + '_ {
        (0..self.horizon()).map(move |t| (self.state(t), self.input(t), self.state(t + 1)))
    }
}

/// Simulates one episode of `policy` on `system` under parameters `phi`.
pub fn rollout<S: System + ?Sized>(
    system: &S,
    policy: &PolicySpec,
    phi: &[f64],
    cost: &CostFunction,
    horizon: usize,
    rng: &mut StreamRng,
) -> Result<Trajectory, SimulationError> {
    if horizon == 0 {
        return Err(SimulationError::EmptyHorizon);
    }
    let dx = system.state_dim();
    let du = system.input_dim();
    let std = system.noise_std();
    let mut actor = policy.actor(horizon, rng)?;
    let mut traj = Trajectory {
        state_dim: dx,
        input_dim: du,
        states: Vec::with_capacity((horizon + 1) * dx),
        inputs: vec![0.0; horizon * du],
        costs: Vec::with_capacity(horizon),
        total_cost: 0.0,
    };
    traj.states.extend_from_slice(system.initial_state());
    let mut next = vec![0.0; dx];
    for t in 0..horizon {
        let x = &traj.states[t * dx..(t + 1) * dx];
        let u = &mut traj.inputs[t * du..(t + 1) * du];
        actor.act(t, x, u)?;
        traj.costs.push(cost.stage(x, u));
        system.mean_step(x, u, phi, &mut next)?;
        for i in 0..dx {
            let w: f64 = rng.sample(StandardNormal);
            next[i] += std[i] * w;
        }
        traj.states.extend_from_slice(&next);
        if next.iter().any(|v| !v.is_finite()) {
            traj.inputs.truncate((t + 1) * du);
            traj.total_cost = traj.costs.iter().sum();
            return Err(SimulationError::Truncated {
                step: t + 1,
                partial: Box::new(traj),
            });
        }
    }
    traj.total_cost = traj.costs.iter().sum();
    Ok(traj)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct McEstimate {
    pub mean: f64,
    pub stderr: f64,
    pub n_used: usize,
    pub n_excluded: usize,
}

impl McEstimate {
    /// Summarizes per-rollout values; non-finite entries count as excluded.
    pub fn from_samples(samples: &[f64]) -> Result<Self, SimulationError> {
        let used: Vec<f64> = samples.iter().copied().filter(|v| v.is_finite()).collect();
        let excluded = samples.len() - used.len();
        if excluded as f64 > MAX_EXCLUDED_FRACTION * samples.len() as f64 {
            return Err(SimulationError::TooManyExcluded {
                excluded,
                total: samples.len(),
            });
        }
        if used.len() < 2 {
            return Err(SimulationError::TooFewRollouts(used.len()));
        }
        // Shifting by the first sample makes a constant sample exactly zero-variance.
        let n = used.len() as f64;
        let shift = used[0];
        let mean_dev = used.iter().map(|v| v - shift).sum::<f64>() / n;
        let var = used.iter().map(|v| (v - shift - mean_dev).powi(2)).sum::<f64>() / (n - 1.0);
        let mean = shift + mean_dev;
        Ok(Self {
            mean,
            stderr: (var / n).sqrt(),
            n_used: used.len(),
            n_excluded: excluded,
        })
    }
}

/// Total costs of rollouts `0..n`, rollout `k` seeded by `key.child(k)`.
/// Diverged rollouts are reported as NaN. Each value equals the
/// `total_cost` of [`rollout`] with the same stream.
pub fn monte_carlo_totals<S: System + ?Sized>(
    system: &S,
    policy: &PolicySpec,
    phi: &[f64],
    cost: &CostFunction,
    horizon: usize,
    n: usize,
    key: StreamKey,
) -> Result<Vec<f64>, SimulationError> {
    if horizon == 0 {
        return Err(SimulationError::EmptyHorizon);
    }
    system.check_dims(system.initial_state(), &vec![0.0; system.input_dim()], phi)?;
    let chunks: Vec<(usize, usize)> = (0..n)
        .step_by(LOCKSTEP_CHUNK)
        .map(|s| (s, (s + LOCKSTEP_CHUNK).min(n)))
        .collect();
    let parts = chunks
        .par_iter()
        .map(|&(lo, hi)| lockstep_totals(system, policy, phi, cost, horizon, key, lo..hi))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(parts.concat())
}

pub fn monte_carlo_cost<S: System + ?Sized>(
    system: &S,
    policy: &PolicySpec,
    phi: &[f64],
    cost: &CostFunction,
    horizon: usize,
    n: usize,
    key: StreamKey,
) -> Result<McEstimate, SimulationError> {
    if n < 2 {
        return Err(SimulationError::TooFewRollouts(n));
    }
    McEstimate::from_samples(&monte_carlo_totals(system, policy, phi, cost, horizon, n, key)?)
}

/// Advances a block of rollouts in lockstep so that network policies can
/// be evaluated as one matrix product per step.
fn lockstep_totals<S: System + ?Sized>(
    system: &S,
    policy: &PolicySpec,
    phi: &[f64],
    cost: &CostFunction,
    horizon: usize,
    key: StreamKey,
    range: std::ops::Range<usize>,
) -> Result<Vec<f64>, SimulationError> {
    let dx = system.state_dim();
    let du = system.input_dim();
    let std = system.noise_std();
    let batch = range.len();
    let mut rngs: Vec<StreamRng> = range.map(|k| key.child(k as u64).rng()).collect();
    let mut actors = Vec::with_capacity(batch);
    for rng in &mut rngs {
        actors.push(policy.actor(horizon, rng)?);
    }
    let mut states: Vec<f64> = system.initial_state().repeat(batch);
    let mut inputs = vec![0.0; batch * du];
    let mut totals = vec![0.0; batch];
    let mut alive = vec![true; batch];
    let mut acts = Activations::default();
    let mut next = vec![0.0; dx];
    for t in 0..horizon {
        if let PolicySpec::Mlp(params) = policy {
            params.forward_batch(&states, batch, &mut acts);
            inputs.copy_from_slice(acts.output());
        } else {
            for (b, actor) in actors.iter_mut().enumerate() {
                actor.act(t, &states[b * dx..(b + 1) * dx], &mut inputs[b * du..(b + 1) * du])?;
            }
        }
        for b in 0..batch {
            if !alive[b] {
                continue;
            }
            let x = &mut states[b * dx..(b + 1) * dx];
            let u = &inputs[b * du..(b + 1) * du];
            totals[b] += cost.stage(x, u);
            system.mean_step(x, u, phi, &mut next)?;
            for i in 0..dx {
                let w: f64 = rngs[b].sample(StandardNormal);
                x[i] = next[i] + std[i] * w;
            }
            if x.iter().any(|v| !v.is_finite()) {
                alive[b] = false;
                totals[b] = f64::NAN;
                x.fill(0.0);
            }
        }
    }
    Ok(totals)
}

/// Formats a float with 17 significant digits.
pub fn format_float(v: f64) -> String {
    format!("{v:.16e}")
}

/// Writes trajectories as CSV with one row per time index `t = 1..T+1`;
/// the final row carries `x_{T+1}` with empty input and cost fields.
pub fn write_trajectories_csv<W: Write>(writer: W, rows: &[(usize, usize, &Trajectory)]) -> Result<(), csv::Error> {
    let mut w = csv::Writer::from_writer(writer);
    let Some((_, _, first)) = rows.first() else {
        w.flush()?;
        return Ok(());
    };
    let mut header = vec!["run".to_owned(), "episode".to_owned(), "t".to_owned()];
    header.extend((0..first.state_dim).map(|i| format!("x{i}")));
    header.extend((0..first.input_dim).map(|i| format!("u{i}")));
    header.push("cost".to_owned());
    w.write_record(&header)?;
    for &(run, episode, traj) in rows {
        for t in 0..=traj.horizon() {
            let mut record = vec![run.to_string(), episode.to_string(), (t + 1).to_string()];
            record.extend(traj.state(t).iter().map(|&v| format_float(v)));
            if t < traj.horizon() {
                record.extend(traj.input(t).iter().map(|&v| format_float(v)));
                record.push(format_float(traj.costs[t]));
            } else {
                record.extend(std::iter::repeat_n(String::new(), traj.input_dim + 1));
            }
            w.write_record(&record)?;
        }
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dynamics::{CartpoleSystem, DynParams, ToySystem};
    use crate::policy::{toy_ce_policy, MlpParams};
    use std::sync::Arc;

    fn toy_ce(phi: [f64; 2]) -> PolicySpec {
        PolicySpec::ToyCe {
            phi_hat: DynParams::new(phi.to_vec(), 10.0).unwrap(),
            gain: 5.0,
        }
    }

    #[test]
    fn noiseless_exact_cancellation_costs_nothing() {
        let sys = ToySystem::default().with_noise_scale(0.0);
        let phi = ToySystem::PHI_STAR;
        let traj = rollout(
            &sys,
            &toy_ce(phi),
            &phi,
            &CostFunction::toy(),
            10,
            &mut StreamKey::new(1).rng(),
        )
        .unwrap();
        assert!(traj.states.iter().all(|&v| v == 0.0));
        assert_eq!(traj.total_cost, 0.0);
        assert_eq!(traj.states.len(), 11 * 2);
        assert_eq!(traj.inputs.len(), 10 * 2);
    }

    #[test]
    fn closed_loop_state_is_the_noise_sequence() {
        let sys = ToySystem::default();
        let phi = ToySystem::PHI_STAR;
        let traj = rollout(
            &sys,
            &toy_ce(phi),
            &phi,
            &CostFunction::toy(),
            10,
            &mut StreamKey::new(2).rng(),
        )
        .unwrap();
        let mut rng = StreamKey::new(2).rng();
        let mut mean = [0.0; 2];
        for (t, (x, u, x_next)) in traj.transitions().enumerate() {
            sys.mean_step(x, u, &phi, &mut mean).unwrap();
            assert_eq!(mean, [0.0, 0.0], "step {t}");
            let w: [f64; 2] = [rng.sample(StandardNormal), rng.sample(StandardNormal)];
            assert_eq!(x_next, &w);
        }
    }

    #[test]
    fn rollout_is_reproducible_and_sums_exactly() {
        let sys = ToySystem::default();
        let policy = toy_ce([0.1, 0.4]);
        let run = |seed| {
            rollout(
                &sys,
                &policy,
                &[0.25, 0.25],
                &CostFunction::toy(),
                10,
                &mut StreamKey::new(seed).rng(),
            )
            .unwrap()
        };
        let a = run(3);
        assert_eq!(a, run(3));
        assert_ne!(a, run(4));
        assert_eq!(a.total_cost, a.costs.iter().sum::<f64>());
        assert!(a.costs.iter().all(|&c| c >= 0.0));
    }

    #[test]
    fn lockstep_totals_match_individual_rollouts() {
        let key = StreamKey::new(5);
        let cart = CartpoleSystem::default();
        let mut rng = StreamKey::new(6).rng();
        let mlp = PolicySpec::Mlp(Arc::new(MlpParams::he_uniform(&[4, 8, 1], &mut rng).unwrap()));
        let noise = PolicySpec::EnergyBudgetNoise {
            budget: 2.0,
            input_dim: 1,
        };
        for policy in [&mlp, &noise] {
            let totals = monte_carlo_totals(
                &cart,
                policy,
                &CartpoleSystem::PHI_STAR,
                &CostFunction::cartpole(),
                20,
                300,
                key,
            )
            .unwrap();
            for k in [0usize, 1, 255, 256, 299] {
                let traj = rollout(
                    &cart,
                    policy,
                    &CartpoleSystem::PHI_STAR,
                    &CostFunction::cartpole(),
                    20,
                    &mut key.child(k as u64).rng(),
                )
                .unwrap();
                assert!(
                    (traj.total_cost - totals[k]).abs() <= 1e-12 * traj.total_cost,
                    "rollout {k}"
                );
            }
        }
    }

    #[test]
    fn deterministic_cost_has_zero_stderr() {
        let sys = ToySystem::default().with_noise_scale(0.0);
        let est = monte_carlo_cost(
            &sys,
            &toy_ce([0.0, 0.0]),
            &[0.25, 0.25],
            &CostFunction::toy(),
            10,
            50,
            StreamKey::new(7),
        )
        .unwrap();
        assert_eq!(est.stderr, 0.0);
        assert!(est.mean > 0.0);
    }

    #[test]
    fn stderr_shrinks_like_inverse_root_n() {
        let sys = ToySystem::default();
        let policy = toy_ce([0.25, 0.25]);
        let est = |n, seed| {
            monte_carlo_cost(
                &sys,
                &policy,
                &[0.25, 0.25],
                &CostFunction::toy(),
                10,
                n,
                StreamKey::new(seed),
            )
            .unwrap()
        };
        let ratio = est(20_000, 8).stderr / est(40_000, 9).stderr;
        assert!((ratio / 2f64.sqrt() - 1.0).abs() < 0.2, "ratio {ratio}");
    }

    #[test]
    fn divergent_rollouts_are_truncated_and_counted() {
        let sys = CartpoleSystem::default();
        let blowup = MlpParams::from_flat(&[4, 1], vec![0.0, 0.0, 1e300, 1e300, 0.0]).unwrap();
        let policy = PolicySpec::Mlp(Arc::new(blowup));
        let phi = CartpoleSystem::PHI_STAR;
        let err = rollout(
            &sys,
            &policy,
            &phi,
            &CostFunction::cartpole(),
            20,
            &mut StreamKey::new(10).rng(),
        )
        .unwrap_err();
        let SimulationError::Truncated { step, partial } = err else {
            panic!("expected truncation");
        };
        assert_eq!(partial.states.len(), (step + 1) * 4);
        assert!(matches!(
            monte_carlo_cost(
                &sys,
                &policy,
                &phi,
                &CostFunction::cartpole(),
                20,
                10,
                StreamKey::new(11)
            ),
            Err(SimulationError::TooManyExcluded { .. })
        ));
        let mut samples = vec![1.0; 200];
        samples[3] = f64::NAN;
        let est = McEstimate::from_samples(&samples).unwrap();
        assert_eq!((est.n_used, est.n_excluded), (199, 1));
    }

    #[test]
    fn trajectory_csv_layout() {
        let sys = ToySystem::default();
        let traj = rollout(
            &sys,
            &toy_ce([0.25, 0.25]),
            &[0.25, 0.25],
            &CostFunction::toy(),
            3,
            &mut StreamKey::new(12).rng(),
        )
        .unwrap();
        let mut buf = Vec::new();
        write_trajectories_csv(&mut buf, &[(0, 7, &traj)]).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "run,episode,t,x0,x1,u0,u1,cost");
        assert_eq!(lines.len(), 1 + 4);
        assert!(lines[4].ends_with(",,,"));
        let u: f64 = lines[1].split(',').nth(5).unwrap().parse().unwrap();
        assert_eq!(u, toy_ce_policy(5.0, &[0.25, 0.25], &[0.0, 0.0]).unwrap()[0]);
    }
}
