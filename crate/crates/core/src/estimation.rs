//! Prediction loss, its gradient, constrained nonlinear least squares and
//! the confidence-ball projection.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dynamics::{l2_norm, DynParams, DynamicsError, System};
use crate::simulate::Trajectory;

#[derive(Debug, Error)]
pub enum EstimationError {
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("dataset has state/input dimensions ({got_x}, {got_u}), system expects ({want_x}, {want_u})")]
    Dimension {
        got_x: usize,
        got_u: usize,
        want_x: usize,
        want_u: usize,
    },
    #[error("every least-squares start produced a non-finite objective")]
    AllStartsFailed,
    #[error(transparent)]
    Dynamics(#[from] DynamicsError),
}

/// Regression triples `(x_t, u_t, x_{t+1})` pooled over episodes.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Dataset {
    state_dim: usize,
    input_dim: usize,
    states: Vec<f64>,
    inputs: Vec<f64>,
    next_states: Vec<f64>,
    episodes: usize,
}

impl Dataset {
    pub fn new(state_dim: usize, input_dim: usize) -> Self {
        Self {
            state_dim,
            input_dim,
            ..Self::default()
        }
    }

    pub fn from_trajectory(traj: &Trajectory) -> Self {
        let mut d = Self::new(traj.state_dim, traj.input_dim);
        d.push_trajectory(traj);
        d
    }

    pub fn push_trajectory(&mut self, traj: &Trajectory) {
        debug_assert_eq!(traj.state_dim, self.state_dim);
        debug_assert_eq!(traj.input_dim, self.input_dim);
        for (x, u, y) in traj.transitions() {
            self.push(x, u, y);
        }
        self.episodes += 1;
    }

    pub fn push(&mut self, x: &[f64], u: &[f64], next: &[f64]) {
        self.states.extend_from_slice(x);
        self.inputs.extend_from_slice(u);
        self.next_states.extend_from_slice(next);
    }

    pub fn len(&self) -> usize {
        self.states.len() / self.state_dim.max(1)
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }

    pub fn episodes(&self) -> usize {
        self.episodes
    }

    pub fn triples(&self) -> impl Iterator<Item = (&[f64], &[f64], &[f64])> + '_ {
        let (dx, du) = (self.state_dim, self.input_dim);
        (0..self.len()).map(move |k| {
            (
                &self.states[k * dx..(k + 1) * dx],
                &self.inputs[k * du..(k + 1) * du],
                &self.next_states[k * dx..(k + 1) * dx],
            )
        })
    }

    fn check<S: System + ?Sized>(&self, system: &S) -> Result<(), EstimationError> {
        if self.is_empty() {
            return Err(EstimationError::EmptyDataset);
        }
        if self.state_dim != system.state_dim() || self.input_dim != system.input_dim() {
            return Err(EstimationError::Dimension {
                got_x: self.state_dim,
                got_u: self.input_dim,
                want_x: system.state_dim(),
                want_u: system.input_dim(),
            });
        }
        Ok(())
    }
}

/// Mean squared one-step prediction residual over the triples.
pub fn empirical_loss<S: System + ?Sized>(system: &S, data: &Dataset, phi: &[f64]) -> Result<f64, EstimationError> {
    data.check(system)?;
    let mut pred = vec![0.0; system.state_dim()];
    let mut total = 0.0;
    for (x, u, y) in data.triples() {
        system.mean_step(x, u, phi, &mut pred)?;
        total += pred.iter().zip(y).map(|(p, y)| (p - y) * (p - y)).sum::<f64>();
    }
    Ok(total / data.len() as f64)
}

/// Loss and its gradient `(2/n)·Σ D_φfᵀ(f − x')`, written into `grad`.
pub fn loss_and_gradient<S: System + ?Sized>(
    system: &S,
    data: &Dataset,
    phi: &[f64],
    grad: &mut [f64],
) -> Result<f64, EstimationError> {
    data.check(system)?;
    let dx = system.state_dim();
    let dp = system.param_dim();
    if grad.len() != dp {
        return Err(DynamicsError::Dimension {
            what: "gradient",
            got: grad.len(),
            expected: dp,
        }
        .into());
    }
    let mut pred = vec![0.0; dx];
    let mut jac = vec![0.0; dx * dp];
    let mut total = 0.0;
    grad.fill(0.0);
    for (x, u, y) in data.triples() {
        system.mean_step(x, u, phi, &mut pred)?;
        system.jac_phi(x, u, phi, &mut jac)?;
        for i in 0..dx {
            let r = pred[i] - y[i];
            total += r * r;
            for j in 0..dp {
                grad[j] += jac[i * dp + j] * r;
            }
        }
    }
    let n = data.len() as f64;
    grad.iter_mut().for_each(|g| *g *= 2.0 / n);
    Ok(total / n)
}

pub fn loss_gradient<S: System + ?Sized>(system: &S, data: &Dataset, phi: &[f64]) -> Result<Vec<f64>, EstimationError> {
    let mut grad = vec![0.0; system.param_dim()];
    loss_and_gradient(system, data, phi, &mut grad)?;
    Ok(grad)
}

/// Euclidean ball `B(center, radius)` of admissible estimates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConfidenceBall {
    pub center: DynParams,
    pub radius: f64,
}

impl ConfidenceBall {
    pub fn new(center: DynParams, radius: f64) -> Self {
        Self { center, radius }
    }

    pub fn contains(&self, phi: &[f64], tol: f64) -> bool {
        self.center.dist_sq(phi).sqrt() <= self.radius + tol
    }

    /// Nearest point of the ball.
    pub fn project(&self, psi: &[f64]) -> DynParams {
        DynParams::enclosing(
            project_onto_ball(self.center.as_slice(), self.radius, psi),
            self.center.bound(),
        )
    }

    /// Projection followed by the system's admissibility clamp; if clamping
    /// leaves the ball, the point is pulled back toward the (admissible)
    /// centre until it is inside again.
    pub fn project_admissible<S: System + ?Sized>(&self, system: &S, psi: &[f64]) -> DynParams {
        let values = restore_admissible(system, self.center.as_slice(), self.radius, psi);
        DynParams::enclosing(values, self.center.bound())
    }
}

/// `ψ` if `‖ψ − c‖ ≤ r`, otherwise `c + r·(ψ − c)/‖ψ − c‖`.
pub fn project_onto_ball(center: &[f64], radius: f64, psi: &[f64]) -> Vec<f64> {
    let diff: Vec<f64> = psi.iter().zip(center).map(|(p, c)| p - c).collect();
    let dist = l2_norm(&diff);
    if dist <= radius {
        return psi.to_vec();
    }
    center.iter().zip(&diff).map(|(c, d)| c + radius * d / dist).collect()
}

pub fn project_ball(psi: &[f64], ball: &ConfidenceBall) -> DynParams {
    ball.project(psi)
}

fn restore_admissible<S: System + ?Sized>(system: &S, center: &[f64], radius: f64, psi: &[f64]) -> Vec<f64> {
    let mut y = project_onto_ball(center, radius, psi);
    if !system.clamp_params(&mut y) {
        return y;
    }
    let mut anchor = center.to_vec();
    system.clamp_params(&mut anchor);
    let e: Vec<f64> = anchor.iter().zip(center).map(|(a, c)| a - c).collect();
    let d: Vec<f64> = y.iter().zip(&anchor).map(|(y, a)| y - a).collect();
    let dd: f64 = d.iter().map(|v| v * v).sum();
    let ee: f64 = e.iter().map(|v| v * v).sum();
    let ed: f64 = e.iter().zip(&d).map(|(a, b)| a * b).sum();
    if dd == 0.0 || ee + 2.0 * ed + dd <= radius * radius {
        return y;
    }
    // Largest λ with ‖anchor + λ·d − center‖ = radius.
    let disc = (ed * ed - dd * (ee - radius * radius)).max(0.0);
    let lambda = ((-ed + disc.sqrt()) / dd).clamp(0.0, 1.0);
    anchor.iter().zip(&d).map(|(a, d)| a + lambda * d).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NlsConfig {
    /// Random starts drawn uniformly from the norm ball, in addition to the origin.
    pub random_starts: usize,
    pub max_iterations: usize,
    /// Stop once a step moves the iterate less than this.
    pub step_tolerance: f64,
}

impl Default for NlsConfig {
    fn default() -> Self {
        Self {
            random_starts: 8,
            max_iterations: 5000,
            step_tolerance: 1e-10,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NlsFit {
    pub phi: DynParams,
    /// Mean squared residual at `phi`.
    pub loss: f64,
    pub iterations: usize,
    pub converged: bool,
}

/// Minimizes the pooled squared prediction error over `‖φ‖ ≤ bound` by
/// projected gradient descent with backtracking from several starts, and
/// keeps the best result.
pub fn fit_least_squares<S: System + ?Sized, R: Rng + ?Sized>(
    system: &S,
    data: &Dataset,
    bound: f64,
    config: &NlsConfig,
    rng: &mut R,
) -> Result<NlsFit, EstimationError> {
    data.check(system)?;
    if !(bound > 0.0) || !bound.is_finite() {
        return Err(DynamicsError::InvalidBound(bound).into());
    }
    let dp = system.param_dim();
    let origin = vec![0.0; dp];
    let mut starts = vec![origin.clone()];
    for _ in 0..config.random_starts {
        starts.push(uniform_in_ball(dp, bound, rng));
    }
    let mut best: Option<NlsFit> = None;
    for start in starts {
        let start = restore_admissible(system, &origin, bound, &start);
        let Some(fit) = projected_descent(system, data, &origin, bound, start, config)? else {
            continue;
        };
        if best.as_ref().is_none_or(|b| fit.loss < b.loss) {
            best = Some(fit);
        }
    }
    best.ok_or(EstimationError::AllStartsFailed)
}

fn uniform_in_ball<R: Rng + ?Sized>(dim: usize, radius: f64, rng: &mut R) -> Vec<f64> {
    loop {
        let dir: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
        let norm = l2_norm(&dir);
        if norm > 0.0 {
            let r = radius * rng.random::<f64>().powf(1.0 / dim as f64);
            return dir.into_iter().map(|v| v * r / norm).collect();
        }
    }
}

fn projected_descent<S: System + ?Sized>(
    system: &S,
    data: &Dataset,
    origin: &[f64],
    bound: f64,
    mut phi: Vec<f64>,
    config: &NlsConfig,
) -> Result<Option<NlsFit>, EstimationError> {
    let dp = phi.len();
    let mut grad = vec![0.0; dp];
    let mut loss = loss_and_gradient(system, data, &phi, &mut grad)?;
    if !loss.is_finite() {
        return Ok(None);
    }
    let mut step: f64 = 1.0;
    let mut converged = false;
    let mut iterations = 0;
    while iterations < config.max_iterations {
        iterations += 1;
        if grad.iter().any(|g| !g.is_finite()) {
            break;
        }
        step = (2.0 * step).min(1e6);
        let accepted = loop {
            let trial: Vec<f64> = phi.iter().zip(&grad).map(|(p, g)| p - step * g).collect();
            let cand = restore_admissible(system, origin, bound, &trial);
            let delta: Vec<f64> = cand.iter().zip(&phi).map(|(c, p)| c - p).collect();
            let moved = l2_norm(&delta);
            if moved < config.step_tolerance {
                break None;
            }
            let cand_loss = empirical_loss(system, data, &cand)?;
            let model = loss + grad.iter().zip(&delta).map(|(g, d)| g * d).sum::<f64>() + moved * moved / (2.0 * step);
            if cand_loss.is_finite() && cand_loss <= model {
                break Some(cand);
            }
            step *= 0.5;
        };
        let Some(cand) = accepted else {
            converged = true;
            break;
        };
        phi = cand;
        loss = loss_and_gradient(system, data, &phi, &mut grad)?;
    }
    Ok(Some(NlsFit {
        phi: DynParams::enclosing(phi, bound),
        loss,
        iterations,
        converged,
    }))
}
