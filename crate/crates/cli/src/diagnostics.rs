//! One-off analyses on a configured benchmark: Fisher information at the
//! reference controller, the Lojasiewicz probe and a single least-squares
//! fit. Each writes a JSON report keyed by the configuration hash.

use std::fs;
use std::path::{Path, PathBuf};

use online_ce::algorithms::{exploration_episodes, reference_policy, run_key};
use online_ce::analysis::{
    fisher_information, lojasiewicz_probe, ring_grid, FisherConfig, FisherEstimate, ProbeConfig, ProbeReport,
};
use online_ce::dynamics::System;
use online_ce::estimation::{fit_least_squares, Dataset};
use online_ce::seed::{purpose, StreamKey};
use online_ce::simulate::rollout;
use serde::{Deserialize, Serialize};

use crate::config::{Algorithm, ExperimentConfig};
use crate::experiment::{write_json, FisherReport, FISHER_FILE};
use crate::CliError;

pub const PROBE_FILE: &str = "probe.json";
pub const FIT_FILE: &str = "fit.json";

fn prepare_dir(dir: &Path) -> Result<(), CliError> {
    fs::create_dir_all(dir).map_err(|source| CliError::Io {
        path: dir.to_owned(),
        source,
    })
}

/// Fisher information at the true parameters under the reference controller.
pub fn fisher(
    config: &ExperimentConfig,
    fisher: &FisherConfig,
    out: &Path,
) -> Result<(FisherEstimate, PathBuf), CliError> {
    let problem = config.problem()?;
    let experiment = StreamKey::new(config.seed);
    let (policy, _) = reference_policy(&problem, experiment)?;
    let estimate = fisher_information(
        &problem.system,
        &policy,
        &problem.phi_star,
        problem.horizon,
        fisher,
        experiment.child(purpose::FISHER),
    )?;
    let report = FisherReport {
        config_hash: config.hash(),
        system: config.system.clone(),
        policy: policy.tag().to_owned(),
        phi: problem.phi_star.to_vec(),
        estimate: estimate.clone(),
    };
    prepare_dir(out)?;
    let path = out.join(FISHER_FILE);
    write_json(&path, &report)?;
    Ok((estimate, path))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeFile {
    pub config_hash: String,
    pub system: String,
    pub policy: String,
    pub rollouts: usize,
    pub radii: Vec<f64>,
    pub angles: usize,
    pub report: ProbeReport,
}

/// Probe on rings around the true parameters; the system must have one or
/// two parameters.
pub fn probe(
    config: &ExperimentConfig,
    probe: &ProbeConfig,
    radii: &[f64],
    angles: usize,
    out: &Path,
) -> Result<(ProbeReport, PathBuf), CliError> {
    let problem = config.problem()?;
    let experiment = StreamKey::new(config.seed);
    let grid = ring_grid(&problem.phi_star, radii, angles)?;
    let (policy, _) = reference_policy(&problem, experiment)?;
    let report = lojasiewicz_probe(
        &problem.system,
        &policy,
        &problem.phi_star,
        &grid,
        problem.horizon,
        probe,
        experiment.child(purpose::PROBE),
    )?;
    let file = ProbeFile {
        config_hash: config.hash(),
        system: config.system.clone(),
        policy: policy.tag().to_owned(),
        rollouts: probe.rollouts,
        radii: radii.to_vec(),
        angles,
        report: report.clone(),
    };
    prepare_dir(out)?;
    let path = out.join(PROBE_FILE);
    write_json(&path, &file)?;
    Ok((report, path))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitFile {
    pub config_hash: String,
    pub system: String,
    pub episodes: usize,
    pub phi_hat: Vec<f64>,
    pub phi_star: Vec<f64>,
    pub phi_err_sq: f64,
    pub loss: f64,
    pub iterations: usize,
    pub converged: bool,
}

/// Least-squares fit on the exploration episodes of run 0. By default this
/// is the same data, and so the same estimate, as run 0 of the experiment.
pub fn fit(config: &ExperimentConfig, episodes: Option<usize>, out: &Path) -> Result<(FitFile, PathBuf), CliError> {
    let problem = config.problem()?;
    let episodes = episodes.unwrap_or(match config.algorithm {
        Algorithm::ContinuousRefinement => config.phase1_episodes,
        Algorithm::ExploreThenCommit => exploration_episodes(config.episodes),
    });
    if episodes == 0 {
        return Err(CliError::Config {
            path: "episodes".into(),
            message: "the fit needs at least one exploration episode".into(),
        });
    }
    let key = run_key(StreamKey::new(config.seed), 0);
    let mut data = Dataset::new(problem.system.state_dim(), problem.system.input_dim());
    for e in 0..episodes {
        let mut rng = key.child(purpose::EPISODE).child(e as u64).rng();
        let traj = rollout(
            &problem.system,
            &problem.exploration,
            &problem.phi_star,
            &problem.cost,
            problem.horizon,
            &mut rng,
        )?;
        data.push_trajectory(&traj);
    }
    let mut rng = key.child(purpose::LEAST_SQUARES).rng();
    let fit = fit_least_squares(&problem.system, &data, problem.bound(), &config.nls, &mut rng)?;
    let file = FitFile {
        config_hash: config.hash(),
        system: config.system.clone(),
        episodes,
        phi_err_sq: fit.phi.dist_sq(&problem.phi_star),
        phi_hat: fit.phi.to_vec(),
        phi_star: problem.phi_star.to_vec(),
        loss: fit.loss,
        iterations: fit.iterations,
        converged: fit.converged,
    };
    prepare_dir(out)?;
    let path = out.join(FIT_FILE);
    write_json(&path, &file)?;
    Ok((file, path))
}
