use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::AnalysisError;
use crate::dynamics::{l2_norm, System};
use crate::estimation::{empirical_loss, loss_gradient, Dataset};
use crate::policy::PolicySpec;
use crate::seed::StreamKey;
use crate::simulate::{rollout, CostFunction};

const CHUNK: usize = 1000;

/// Ring radii and angle count of the default two-dimensional probe grid.
pub const DEFAULT_RADII: [f64; 4] = [0.05, 0.1, 0.2, 0.4];
pub const DEFAULT_ANGLES: usize = 16;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProbeConfig {
    pub rollouts: usize,
    pub alpha: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeCandidate {
    pub phi: Vec<f64>,
    pub distance: f64,
    /// `Err(φ) − Err(φ*)` on common rollouts.
    pub excess_error: f64,
    pub excess_stderr: f64,
    /// `‖φ − φ*‖ / excess^α`; absent for flagged candidates.
    pub ratio: Option<f64>,
    /// The excess is within two standard errors of zero (or below it).
    pub flagged: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeReport {
    pub alpha: f64,
    /// Largest ratio over unflagged candidates.
    pub constant: f64,
    pub flagged: usize,
    pub candidates: Vec<ProbeCandidate>,
}

/// Points on concentric circles around `center` (two dimensions), or at
/// `center ± r` in one dimension.
pub fn ring_grid(center: &[f64], radii: &[f64], angles: usize) -> Result<Vec<Vec<f64>>, AnalysisError> {
    match center.len() {
        1 => Ok(radii
            .iter()
            .flat_map(|r| [vec![center[0] - r], vec![center[0] + r]])
            .collect()),
        2 => Ok(radii
            .iter()
            .flat_map(|&r| {
                (0..angles).map(move |k| {
                    let a = std::f64::consts::TAU * k as f64 / angles as f64;
                    vec![center[0] + r * a.cos(), center[1] + r * a.sin()]
                })
            })
            .collect()),
        d => Err(AnalysisError::GridDimension(d)),
    }
}

/// Mean and standard error of `l_D(φ) − l_D(φ*)` for each candidate over
/// common trajectories generated by `policy` under `phi_star`.
pub fn prediction_error_gaps<S: System + ?Sized>(
    system: &S,
    policy: &PolicySpec,
    phi_star: &[f64],
    candidates: &[Vec<f64>],
    horizon: usize,
    rollouts: usize,
    key: StreamKey,
) -> Result<Vec<(f64, f64)>, AnalysisError> {
    if rollouts < 2 {
        return Err(AnalysisError::TooFewSamples(rollouts));
    }
    let no_cost = CostFunction::Quadratic {
        state_weight: 0.0,
        input_weight: 0.0,
    };
    let chunks: Vec<usize> = (0..rollouts).step_by(CHUNK).collect();
    let partial = chunks
        .par_iter()
        .map(|&lo| -> Result<Vec<(f64, f64)>, AnalysisError> {
            let mut acc = vec![(0.0, 0.0); candidates.len()];
            for k in lo..(lo + CHUNK).min(rollouts) {
                let traj = rollout(
                    system,
                    policy,
                    phi_star,
                    &no_cost,
                    horizon,
                    &mut key.child(k as u64).rng(),
                )?;
                let data = Dataset::from_trajectory(&traj);
                let base = empirical_loss(system, &data, phi_star)?;
                for (a, c) in acc.iter_mut().zip(candidates) {
                    let gap = empirical_loss(system, &data, c)? - base;
                    a.0 += gap;
                    a.1 += gap * gap;
                }
            }
            Ok(acc)
        })
        .collect::<Result<Vec<_>, _>>()?;
    let n = rollouts as f64;
    Ok((0..candidates.len())
        .map(|c| {
            let (s, ss) = partial.iter().fold((0.0, 0.0), |(s, ss), p| (s + p[c].0, ss + p[c].1));
            let mean = s / n;
            let var = ((ss - n * mean * mean) / (n - 1.0)).max(0.0);
            (mean, (var / n).sqrt())
        })
        .collect())
}

/// Empirical surrogate for the constant in `‖φ − φ*‖ ≤ C·(Err(φ) − Err(φ*))^α`
/// over a finite grid of candidates.
pub fn lojasiewicz_probe<S: System + ?Sized>(
    system: &S,
    policy: &PolicySpec,
    phi_star: &[f64],
    grid: &[Vec<f64>],
    horizon: usize,
    config: &ProbeConfig,
    key: StreamKey,
) -> Result<ProbeReport, AnalysisError> {
    if !(config.alpha > 0.0) {
        return Err(AnalysisError::InvalidExponent(config.alpha));
    }
    let gaps = prediction_error_gaps(system, policy, phi_star, grid, horizon, config.rollouts, key)?;
    let mut candidates = Vec::with_capacity(grid.len());
    for (phi, (gap, se)) in grid.iter().zip(gaps) {
        let diff: Vec<f64> = phi.iter().zip(phi_star).map(|(a, b)| a - b).collect();
        let distance = l2_norm(&diff);
        if distance == 0.0 {
            return Err(AnalysisError::CandidateAtOptimum);
        }
        let flagged = gap <= 2.0 * se;
        candidates.push(ProbeCandidate {
            phi: phi.clone(),
            distance,
            excess_error: gap,
            excess_stderr: se,
            ratio: (!flagged).then(|| distance / gap.powf(config.alpha)),
            flagged,
        });
    }
    let constant = candidates.iter().filter_map(|c| c.ratio).fold(f64::NAN, f64::max);
    Ok(ProbeReport {
        alpha: config.alpha,
        constant,
        flagged: candidates.iter().filter(|c| c.flagged).count(),
        candidates,
    })
}

/// Per-coordinate comparison of the mean stochastic gradient with a central
/// difference of the mean loss.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradientOracleCheck {
    pub mean_gradient: Vec<f64>,
    pub gradient_stderr: Vec<f64>,
    pub finite_difference: Vec<f64>,
    pub finite_difference_stderr: Vec<f64>,
}

/// Mean of `∇l_D(φ)` and of the central difference of `l_D` at `φ`, over
/// trajectories generated by `policy` under `phi_true`. Both are computed
/// per trajectory, so they share random numbers.
pub fn gradient_oracle_check<S: System + ?Sized>(
    system: &S,
    policy: &PolicySpec,
    phi_true: &[f64],
    phi: &[f64],
    horizon: usize,
    rollouts: usize,
    step: f64,
    key: StreamKey,
) -> Result<GradientOracleCheck, AnalysisError> {
    if rollouts < 2 {
        return Err(AnalysisError::TooFewSamples(rollouts));
    }
    let dp = phi.len();
    let no_cost = CostFunction::Quadratic {
        state_weight: 0.0,
        input_weight: 0.0,
    };
    let chunks: Vec<usize> = (0..rollouts).step_by(CHUNK).collect();
    let partial = chunks
        .par_iter()
        .map(|&lo| -> Result<Vec<f64>, AnalysisError> {
            // [Σg, Σg², Σfd, Σfd²] per coordinate
            let mut acc = vec![0.0; 4 * dp];
            let mut probe = phi.to_vec();
            for k in lo..(lo + CHUNK).min(rollouts) {
                let traj = rollout(
                    system,
                    policy,
                    phi_true,
                    &no_cost,
                    horizon,
                    &mut key.child(k as u64).rng(),
                )?;
                let data = Dataset::from_trajectory(&traj);
                let g = loss_gradient(system, &data, phi)?;
                for j in 0..dp {
                    probe[j] = phi[j] + step;
                    let plus = empirical_loss(system, &data, &probe)?;
                    probe[j] = phi[j] - step;
                    let minus = empirical_loss(system, &data, &probe)?;
                    probe[j] = phi[j];
                    let fd = (plus - minus) / (2.0 * step);
                    acc[4 * j] += g[j];
                    acc[4 * j + 1] += g[j] * g[j];
                    acc[4 * j + 2] += fd;
                    acc[4 * j + 3] += fd * fd;
                }
            }
            Ok(acc)
        })
        .collect::<Result<Vec<_>, _>>()?;
    let mut total = vec![0.0; 4 * dp];
    for p in &partial {
        total.iter_mut().zip(p).for_each(|(a, b)| *a += b);
    }
    let n = rollouts as f64;
    let summarize = |s: f64, ss: f64| {
        let mean = s / n;
        (mean, (((ss - n * mean * mean) / (n - 1.0)).max(0.0) / n).sqrt())
    };
    let mut out = GradientOracleCheck {
        mean_gradient: Vec::with_capacity(dp),
        gradient_stderr: Vec::with_capacity(dp),
        finite_difference: Vec::with_capacity(dp),
        finite_difference_stderr: Vec::with_capacity(dp),
    };
    for j in 0..dp {
        let (g, gs) = summarize(total[4 * j], total[4 * j + 1]);
        let (f, fs) = summarize(total[4 * j + 2], total[4 * j + 3]);
        out.mean_gradient.push(g);
        out.gradient_stderr.push(gs);
        out.finite_difference.push(f);
        out.finite_difference_stderr.push(fs);
    }
    Ok(out)
}
