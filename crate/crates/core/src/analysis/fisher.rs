use nalgebra::{DMatrix, SymmetricEigen};
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::AnalysisError;
use crate::dynamics::System;
use crate::policy::PolicySpec;
use crate::seed::{purpose, StreamKey};
use crate::simulate::{rollout, CostFunction};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FisherConfig {
    pub rollouts: usize,
    /// Zero disables the bootstrap interval.
    pub bootstrap_resamples: usize,
    pub confidence: f64,
}

impl Default for FisherConfig {
    fn default() -> Self {
        Self {
            rollouts: 10_000,
            bootstrap_resamples: 1000,
            confidence: 0.95,
        }
    }
}

/// Monte-Carlo estimate of `E[(1/T)·Σ_t D_φfᵀ D_φf]` along closed-loop rollouts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FisherEstimate {
    pub dim: usize,
    /// Symmetrized, row-major `d_φ × d_φ`.
    pub matrix: Vec<f64>,
    /// Standard error of each entry across rollouts.
    pub entry_stderr: Vec<f64>,
    /// Ascending.
    pub eigenvalues: Vec<f64>,
    pub min_eigenvalue: f64,
    /// Percentile bootstrap interval for the minimum eigenvalue.
    pub min_eigenvalue_ci: Option<(f64, f64)>,
    pub rollouts: usize,
}

pub fn fisher_information<S: System + ?Sized>(
    system: &S,
    policy: &PolicySpec,
    phi: &[f64],
    horizon: usize,
    config: &FisherConfig,
    key: StreamKey,
) -> Result<FisherEstimate, AnalysisError> {
    if config.rollouts < 2 {
        return Err(AnalysisError::TooFewSamples(config.rollouts));
    }
    let dp = system.param_dim();
    let per_rollout = (0..config.rollouts)
        .into_par_iter()
        .map(|k| rollout_gram(system, policy, phi, horizon, key.child(k as u64)))
        .collect::<Result<Vec<_>, _>>()?;

    let n = per_rollout.len() as f64;
    let mut mean = vec![0.0; dp * dp];
    for m in &per_rollout {
        mean.iter_mut().zip(m).for_each(|(a, b)| *a += b);
    }
    mean.iter_mut().for_each(|v| *v /= n);
    let mut entry_stderr = vec![0.0; dp * dp];
    for m in &per_rollout {
        for ((s, v), mu) in entry_stderr.iter_mut().zip(m).zip(&mean) {
            *s += (v - mu) * (v - mu);
        }
    }
    entry_stderr.iter_mut().for_each(|s| *s = (*s / (n - 1.0) / n).sqrt());

    let matrix = symmetrize(&mean, dp);
    let eigenvalues = sorted_eigenvalues(&matrix, dp);
    let min_eigenvalue = eigenvalues[0];

    let min_eigenvalue_ci = (config.bootstrap_resamples > 0).then(|| {
        let mut rng = key.child(purpose::BOOTSTRAP).rng();
        let mut mins: Vec<f64> = (0..config.bootstrap_resamples)
            .map(|_| {
                let mut acc = vec![0.0; dp * dp];
                for _ in 0..per_rollout.len() {
                    let m = &per_rollout[rng.random_range(0..per_rollout.len())];
                    acc.iter_mut().zip(m).for_each(|(a, b)| *a += b);
                }
                acc.iter_mut().for_each(|v| *v /= n);
                sorted_eigenvalues(&symmetrize(&acc, dp), dp)[0]
            })
            .collect();
        mins.sort_by(f64::total_cmp);
        let tail = (1.0 - config.confidence) / 2.0;
        (quantile(&mins, tail), quantile(&mins, 1.0 - tail))
    });

    Ok(FisherEstimate {
        dim: dp,
        matrix,
        entry_stderr,
        eigenvalues,
        min_eigenvalue,
        min_eigenvalue_ci,
        rollouts: config.rollouts,
    })
}

fn rollout_gram<S: System + ?Sized>(
    system: &S,
    policy: &PolicySpec,
    phi: &[f64],
    horizon: usize,
    key: StreamKey,
) -> Result<Vec<f64>, AnalysisError> {
    let dx = system.state_dim();
    let dp = system.param_dim();
    let no_cost = CostFunction::Quadratic {
        state_weight: 0.0,
        input_weight: 0.0,
    };
    let traj = rollout(system, policy, phi, &no_cost, horizon, &mut key.rng())?;
    let mut jac = vec![0.0; dx * dp];
    let mut gram = vec![0.0; dp * dp];
    for t in 0..horizon {
        system.jac_phi(traj.state(t), traj.input(t), phi, &mut jac)?;
        for a in 0..dp {
            for b in 0..dp {
                gram[a * dp + b] += (0..dx).map(|i| jac[i * dp + a] * jac[i * dp + b]).sum::<f64>();
            }
        }
    }
    gram.iter_mut().for_each(|v| *v /= horizon as f64);
    Ok(gram)
}

fn symmetrize(m: &[f64], d: usize) -> Vec<f64> {
    let mut out = vec![0.0; d * d];
    for i in 0..d {
        for j in 0..d {
            out[i * d + j] = 0.5 * (m[i * d + j] + m[j * d + i]);
        }
    }
    out
}

/// Eigenvalues of a symmetric row-major matrix, ascending.
pub fn sorted_eigenvalues(m: &[f64], d: usize) -> Vec<f64> {
    let eig = SymmetricEigen::new(DMatrix::from_row_slice(d, d, m));
    let mut values: Vec<f64> = eig.eigenvalues.iter().copied().collect();
    values.sort_by(f64::total_cmp);
    values
}

/// Linear-interpolation quantile of sorted data.
fn quantile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (pos - lo as f64) * (sorted[hi] - sorted[lo])
}
