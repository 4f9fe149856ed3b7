//! Continuous refinement, explore-then-commit, certainty-equivalent policy
//! synthesis and regret accounting.

mod run;
mod trace;

use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::analysis::AnalysisError;
use crate::dynamics::{CartpoleSystem, DynParams, DynamicsError, System, SystemKind, ToySystem};
use crate::estimation::{EstimationError, NlsConfig};
use crate::policy::{train_mlp_ce, MlpParams, PolicyError, PolicySpec, TrainOutcome, TrainerConfig, CARTPOLE_LAYERS};
use crate::seed::{purpose, StreamKey};
use crate::simulate::{monte_carlo_totals, CostFunction, McEstimate, SimulationError};

pub use run::{continuous_refinement, episode_excess_cost, exploration_episodes, explore_then_commit, run_key};
pub use trace::{
    aggregate, write_aggregate_csv, write_trace_csv, AggregateRow, EpisodeRecord, EpisodeSummary, Phase, RegretTrace,
};

#[derive(Debug, Error)]
pub enum AlgorithmError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Simulation(#[from] SimulationError),
    #[error(transparent)]
    Estimation(#[from] EstimationError),
    #[error(transparent)]
    Policy(#[from] PolicyError),
    #[error(transparent)]
    Analysis(#[from] AnalysisError),
    #[error(transparent)]
    Dynamics(#[from] DynamicsError),
}

/// How the certainty-equivalent controller is obtained from an estimate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum Synthesis {
    /// Closed-form cancellation of the estimated drift.
    FeedbackLinearization,
    /// Adam on the model-simulated cost, warm-started from the previous round.
    MlpAdam {
        layers: Vec<usize>,
        trainer: TrainerConfig,
        /// Adam steps for the reference controller trained under the true parameters.
        best_in_class_steps: usize,
    },
}

/// A benchmark: plant, truth, cost, horizon, exploration policy and the
/// synthesis rule.
#[derive(Debug, Clone)]
pub struct Problem {
    pub system: SystemKind,
    pub phi_star: DynParams,
    pub cost: CostFunction,
    pub horizon: usize,
    pub exploration: PolicySpec,
    pub synthesis: Synthesis,
}

impl Problem {
    pub const TOY_BOUND: f64 = 10.0;
    pub const CARTPOLE_BOUND: f64 = 5.0;

    /// Toy plant, `T = 10`, exploration with the controller for `φ̂ = 0`.
    pub fn toy() -> Self {
        let zero = DynParams::new(vec![0.0, 0.0], Self::TOY_BOUND).expect("origin is inside the bound");
        Self {
            system: SystemKind::Toy(ToySystem::default()),
            phi_star: DynParams::new(ToySystem::PHI_STAR.to_vec(), Self::TOY_BOUND).expect("truth is inside the bound"),
            cost: CostFunction::toy(),
            horizon: 10,
            exploration: PolicySpec::ToyCe {
                phi_hat: zero,
                gain: ToySystem::GAIN,
            },
            synthesis: Synthesis::FeedbackLinearization,
        }
    }

    /// Cart-pole, `T = 20`, exploration with an energy budget of `0.1·T`.
    pub fn cartpole() -> Self {
        let horizon = 20;
        Self {
            system: SystemKind::Cartpole(CartpoleSystem::default()),
            phi_star: DynParams::new(CartpoleSystem::PHI_STAR.to_vec(), Self::CARTPOLE_BOUND)
                .expect("truth is inside the bound"),
            cost: CostFunction::cartpole(),
            horizon,
            exploration: PolicySpec::EnergyBudgetNoise {
                budget: 0.1 * horizon as f64,
                input_dim: 1,
            },
            synthesis: Synthesis::MlpAdam {
                layers: CARTPOLE_LAYERS.to_vec(),
                trainer: TrainerConfig {
                    horizon,
                    ..TrainerConfig::default()
                },
                best_in_class_steps: 2000,
            },
        }
    }

    pub fn from_id(id: &str) -> Result<Self, AlgorithmError> {
        match id {
            "toy" => Ok(Self::toy()),
            "cartpole" => Ok(Self::cartpole()),
            other => Err(AlgorithmError::Config(format!("unknown system {other:?}"))),
        }
    }

    pub fn bound(&self) -> f64 {
        self.phi_star.bound()
    }

    /// Same benchmark with another horizon. The cart-pole exploration budget
    /// scales with it.
    pub fn with_horizon(mut self, horizon: usize) -> Self {
        self.horizon = horizon;
        if let PolicySpec::EnergyBudgetNoise { budget, .. } = &mut self.exploration {
            *budget = 0.1 * horizon as f64;
        }
        if let Synthesis::MlpAdam { trainer, .. } = &mut self.synthesis {
            trainer.horizon = horizon;
        }
        self
    }

    /// Initial network for the first synthesis round of a run.
    pub fn initial_network(&self, key: StreamKey) -> Result<Option<MlpParams>, AlgorithmError> {
        match &self.synthesis {
            Synthesis::FeedbackLinearization => Ok(None),
            Synthesis::MlpAdam { layers, .. } => Ok(Some(MlpParams::he_uniform(layers, &mut key.rng())?)),
        }
    }
}

/// A synthesized controller plus training diagnostics when applicable.
#[derive(Debug, Clone)]
pub struct Synthesized {
    pub policy: PolicySpec,
    pub training: Option<TrainOutcome>,
}

/// `π*(φ̂)`: exact for the toy class, approximate (warm-started Adam) for
/// network policies.
pub fn certainty_equivalent<R: Rng + ?Sized>(
    problem: &Problem,
    phi_hat: &DynParams,
    warm_start: Option<&MlpParams>,
    rng: &mut R,
) -> Result<Synthesized, AlgorithmError> {
    match &problem.synthesis {
        Synthesis::FeedbackLinearization => {
            let SystemKind::Toy(toy) = &problem.system else {
                return Err(AlgorithmError::Config(
                    "feedback linearization needs the toy plant".into(),
                ));
            };
            Ok(Synthesized {
                policy: PolicySpec::ToyCe {
                    phi_hat: phi_hat.clone(),
                    gain: toy.gain(),
                },
                training: None,
            })
        }
        Synthesis::MlpAdam { trainer, .. } => {
            let init =
                warm_start.ok_or_else(|| AlgorithmError::Config("network synthesis needs a warm start".into()))?;
            let outcome = train_mlp_ce(&problem.system, init, phi_hat, &problem.cost, trainer, rng)?;
            Ok(Synthesized {
                policy: PolicySpec::Mlp(Arc::new(outcome.params.clone())),
                training: Some(outcome),
            })
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MuSetting {
    /// Minimum eigenvalue of the Monte-Carlo Fisher matrix at the first
    /// estimate and its certainty-equivalent controller.
    Auto,
    Fixed(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum StepSchedule {
    /// `η_i = 8 / (μ·(i + 1))`
    InverseMu { mu: MuSetting },
    /// `η_i = a / (a + i)`
    Harmonic { a: f64 },
}

impl StepSchedule {
    /// Step size at zero-based phase-two index `i`; `mu` is the resolved value.
    pub fn step(&self, i: usize, mu: f64) -> f64 {
        match *self {
            Self::InverseMu { .. } => 8.0 / (mu * (i + 1) as f64),
            Self::Harmonic { a } => a / (a + i as f64),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RefinementConfig {
    pub episodes: usize,
    pub phase1_episodes: usize,
    pub radius: f64,
    pub schedule: StepSchedule,
    pub nls: NlsConfig,
    /// Rollouts for the automatic μ estimate.
    pub fisher_rollouts: usize,
}

impl RefinementConfig {
    pub fn toy() -> Self {
        Self {
            episodes: 3000,
            phase1_episodes: 100,
            radius: 0.2,
            schedule: StepSchedule::InverseMu { mu: MuSetting::Auto },
            nls: NlsConfig::default(),
            fisher_rollouts: 1000,
        }
    }

    pub fn cartpole() -> Self {
        Self {
            episodes: 300,
            phase1_episodes: 1,
            radius: 1.0,
            schedule: StepSchedule::Harmonic { a: 100.0 },
            nls: NlsConfig::default(),
            fisher_rollouts: 1000,
        }
    }

    pub fn validate(&self) -> Result<(), AlgorithmError> {
        let fail = |m: &str| Err(AlgorithmError::Config(m.to_owned()));
        if self.episodes == 0 {
            return fail("episodes must be positive");
        }
        if self.phase1_episodes > self.episodes {
            return fail("phase-one episodes exceed the total");
        }
        if !(self.radius > 0.0) || !self.radius.is_finite() {
            return fail("radius must be positive");
        }
        match self.schedule {
            StepSchedule::InverseMu {
                mu: MuSetting::Fixed(mu),
            } if !(mu > 0.0) || !mu.is_finite() => fail("mu must be positive"),
            StepSchedule::InverseMu { mu: MuSetting::Auto } if self.fisher_rollouts < 2 => {
                fail("automatic mu needs at least two rollouts")
            }
            StepSchedule::Harmonic { a } if !(a > 0.0) || !a.is_finite() => fail("harmonic constant must be positive"),
            _ => Ok(()),
        }
    }
}

/// Monte-Carlo evaluation of played policies under the true parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalConfig {
    pub rollouts: usize,
    /// Evaluate episode 1, every `stride`-th episode, the first episode of
    /// each phase and the last; other episodes carry the latest value.
    pub stride: usize,
}

impl EvalConfig {
    pub fn toy() -> Self {
        Self {
            rollouts: 1000,
            stride: 1,
        }
    }

    pub fn cartpole() -> Self {
        Self {
            rollouts: 10_000,
            stride: 10,
        }
    }
}

/// The reference controller and its cost `J*`, shared by every run of an
/// experiment. All evaluations reuse the same rollout streams, so excess
/// costs are common-random-number differences.
#[derive(Debug, Clone)]
pub struct Baseline {
    pub policy: PolicySpec,
    pub j_star: McEstimate,
    pub eval: EvalConfig,
    pub eval_key: StreamKey,
    pub training: Option<TrainOutcome>,
}

/// The controller regret is measured against: the exact certainty-equivalent
/// controller for the toy, a network trained under the true parameters
/// otherwise.
pub fn reference_policy(
    problem: &Problem,
    experiment: StreamKey,
) -> Result<(PolicySpec, Option<TrainOutcome>), AlgorithmError> {
    match &problem.synthesis {
        Synthesis::FeedbackLinearization => {
            let s = certainty_equivalent(problem, &problem.phi_star, None, &mut experiment.rng())?;
            Ok((s.policy, None))
        }
        Synthesis::MlpAdam {
            trainer,
            best_in_class_steps,
            ..
        } => {
            let init = problem
                .initial_network(experiment.child(purpose::INIT))?
                .expect("network synthesis has an initial network");
            let config = TrainerConfig {
                steps: *best_in_class_steps,
                ..*trainer
            };
            let mut rng = experiment.child(purpose::TRAINING).rng();
            let outcome = train_mlp_ce(
                &problem.system,
                &init,
                &problem.phi_star,
                &problem.cost,
                &config,
                &mut rng,
            )?;
            Ok((PolicySpec::Mlp(Arc::new(outcome.params.clone())), Some(outcome)))
        }
    }
}

pub fn prepare_baseline(
    problem: &Problem,
    eval: EvalConfig,
    experiment: StreamKey,
) -> Result<Baseline, AlgorithmError> {
    if eval.rollouts < 2 || eval.stride == 0 {
        return Err(AlgorithmError::Config(
            "evaluation needs at least two rollouts and a positive stride".into(),
        ));
    }
    let (policy, training) = reference_policy(problem, experiment)?;
    let eval_key = experiment.child(purpose::EVALUATION);
    let totals = monte_carlo_totals(
        &problem.system,
        &policy,
        &problem.phi_star,
        &problem.cost,
        problem.horizon,
        eval.rollouts,
        eval_key,
    )?;
    Ok(Baseline {
        policy,
        j_star: McEstimate::from_samples(&totals)?,
        eval,
        eval_key,
        training,
    })
}

pub(crate) fn check_problem(problem: &Problem) -> Result<(), AlgorithmError> {
    if problem.horizon == 0 {
        return Err(AlgorithmError::Config("horizon must be positive".into()));
    }
    if problem.phi_star.len() != problem.system.param_dim() {
        return Err(AlgorithmError::Config("true parameter has the wrong dimension".into()));
    }
    Ok(())
}
