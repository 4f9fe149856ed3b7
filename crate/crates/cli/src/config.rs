//! Experiment configuration: the TOML file schema, defaults per system and
//! validation.
//!
//! Every field is optional in the file. Missing fields take the benchmark's
//! published settings, so `system = "toy"` alone describes the full toy
//! experiment.

use std::path::{Path, PathBuf};

use online_ce::algorithms::{EvalConfig, MuSetting, Problem, RefinementConfig, StepSchedule, Synthesis};
use online_ce::analysis::FisherConfig;
use online_ce::estimation::NlsConfig;
use online_ce::policy::{AdamConfig, TrainerConfig};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::CliError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Algorithm {
    ContinuousRefinement,
    ExploreThenCommit,
}

#[derive(Debug, Deserialize)]
#[serde(untagged)]
enum RawMu {
    Number(f64),
    Word(String),
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawSchedule {
    kind: Option<String>,
    mu: Option<RawMu>,
    a: Option<f64>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawEvaluation {
    rollouts: Option<usize>,
    stride: Option<usize>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawEstimation {
    random_starts: Option<usize>,
    max_iterations: Option<usize>,
    step_tolerance: Option<f64>,
    fisher_rollouts: Option<usize>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawTraining {
    steps: Option<usize>,
    batch: Option<usize>,
    learning_rate: Option<f64>,
    best_in_class_steps: Option<usize>,
    divergence_threshold: Option<f64>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawDiagnostics {
    fisher: Option<bool>,
    rollouts: Option<usize>,
    bootstrap_resamples: Option<usize>,
    confidence: Option<f64>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawConfig {
    system: Option<String>,
    algorithm: Option<Algorithm>,
    runs: Option<usize>,
    seed: Option<u64>,
    output: Option<PathBuf>,
    horizon: Option<usize>,
    episodes: Option<usize>,
    phase1_episodes: Option<usize>,
    radius: Option<f64>,
    #[serde(default)]
    schedule: RawSchedule,
    #[serde(default)]
    evaluation: RawEvaluation,
    #[serde(default)]
    estimation: RawEstimation,
    #[serde(default)]
    training: RawTraining,
    #[serde(default)]
    diagnostics: RawDiagnostics,
}

/// Network synthesis settings, present for network-policy systems only.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingSettings {
    pub steps: usize,
    pub batch: usize,
    pub learning_rate: f64,
    pub best_in_class_steps: usize,
    pub divergence_threshold: f64,
}

/// A fully resolved experiment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub system: String,
    pub algorithm: Algorithm,
    pub runs: usize,
    pub seed: u64,
    pub horizon: usize,
    pub episodes: usize,
    /// Unused by explore-then-commit, which explores for `⌈√N⌉` episodes.
    pub phase1_episodes: usize,
    pub radius: f64,
    pub schedule: StepSchedule,
    pub evaluation: EvalConfig,
    pub nls: NlsConfig,
    pub fisher_rollouts: usize,
    pub training: Option<TrainingSettings>,
    /// Fisher report at the reference controller, when requested.
    pub fisher_report: Option<FisherConfig>,
    pub output: PathBuf,
}

pub const DEFAULT_RUNS: usize = 30;
pub const DEFAULT_SEED: u64 = 2025;

fn invalid(path: &str, message: impl Into<String>) -> CliError {
    CliError::Config {
        path: path.to_owned(),
        message: message.into(),
    }
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::Io {
            path: path.to_owned(),
            source: e,
        })?;
        Self::parse(&text)
    }

    pub fn parse(text: &str) -> Result<Self, CliError> {
        let raw: RawConfig = toml::from_str(text).map_err(|e| CliError::Parse(e.to_string()))?;
        let config = Self::resolve(raw)?;
        config.validate()?;
        Ok(config)
    }

    /// The published settings for a benchmark.
    pub fn defaults(system: &str) -> Result<Self, CliError> {
        let raw = RawConfig {
            system: Some(system.to_owned()),
            ..RawConfig::default()
        };
        Self::resolve(raw)
    }

    fn resolve(raw: RawConfig) -> Result<Self, CliError> {
        let system = raw
            .system
            .ok_or_else(|| invalid("system", "missing; expected \"toy\" or \"cartpole\""))?;
        let (problem, alg, eval) = match system.as_str() {
            "toy" => (Problem::toy(), RefinementConfig::toy(), EvalConfig::toy()),
            "cartpole" => (
                Problem::cartpole(),
                RefinementConfig::cartpole(),
                EvalConfig::cartpole(),
            ),
            other => return Err(invalid("system", format!("unknown system {other:?}"))),
        };

        let (has_mu, has_a) = (raw.schedule.mu.is_some(), raw.schedule.a.is_some());
        let schedule = match raw.schedule.kind.as_deref() {
            None => match alg.schedule {
                StepSchedule::InverseMu { mu } => StepSchedule::InverseMu {
                    mu: resolve_mu(raw.schedule.mu, mu)?,
                },
                StepSchedule::Harmonic { a } => StepSchedule::Harmonic {
                    a: raw.schedule.a.unwrap_or(a),
                },
            },
            Some("inverse-mu") => StepSchedule::InverseMu {
                mu: resolve_mu(raw.schedule.mu, MuSetting::Auto)?,
            },
            Some("harmonic") => StepSchedule::Harmonic {
                a: raw.schedule.a.unwrap_or(100.0),
            },
            Some(other) => {
                return Err(invalid(
                    "schedule.kind",
                    format!("unknown schedule {other:?}; expected \"inverse-mu\" or \"harmonic\""),
                ))
            }
        };
        match schedule {
            StepSchedule::Harmonic { .. } if has_mu => {
                return Err(invalid("schedule.mu", "only applies to the inverse-mu schedule"))
            }
            StepSchedule::InverseMu { .. } if has_a => {
                return Err(invalid("schedule.a", "only applies to the harmonic schedule"))
            }
            _ => {}
        }

        let training = match &problem.synthesis {
            Synthesis::FeedbackLinearization => {
                let t = &raw.training;
                if t.steps.is_some()
                    || t.batch.is_some()
                    || t.learning_rate.is_some()
                    || t.best_in_class_steps.is_some()
                    || t.divergence_threshold.is_some()
                {
                    return Err(invalid(
                        "training",
                        format!("system {system:?} has a closed-form controller"),
                    ));
                }
                None
            }
            Synthesis::MlpAdam {
                trainer,
                best_in_class_steps,
                ..
            } => Some(TrainingSettings {
                steps: raw.training.steps.unwrap_or(trainer.steps),
                batch: raw.training.batch.unwrap_or(trainer.batch),
                learning_rate: raw.training.learning_rate.unwrap_or(trainer.adam.learning_rate),
                best_in_class_steps: raw.training.best_in_class_steps.unwrap_or(*best_in_class_steps),
                divergence_threshold: raw
                    .training
                    .divergence_threshold
                    .unwrap_or(trainer.divergence_threshold),
            }),
        };

        let d = &raw.diagnostics;
        let fisher_defaults = FisherConfig::default();
        let fisher_report = if d.fisher.unwrap_or(false) {
            Some(FisherConfig {
                rollouts: d.rollouts.unwrap_or(fisher_defaults.rollouts),
                bootstrap_resamples: d.bootstrap_resamples.unwrap_or(fisher_defaults.bootstrap_resamples),
                confidence: d.confidence.unwrap_or(fisher_defaults.confidence),
            })
        } else {
            if d.rollouts.is_some() || d.bootstrap_resamples.is_some() || d.confidence.is_some() {
                return Err(invalid(
                    "diagnostics.fisher",
                    "set to true to use the other diagnostics fields",
                ));
            }
            None
        };

        let output = raw.output.unwrap_or_else(|| PathBuf::from("runs").join(&system));
        Ok(Self {
            algorithm: raw.algorithm.unwrap_or(Algorithm::ContinuousRefinement),
            runs: raw.runs.unwrap_or(DEFAULT_RUNS),
            seed: raw.seed.unwrap_or(DEFAULT_SEED),
            horizon: raw.horizon.unwrap_or(problem.horizon),
            episodes: raw.episodes.unwrap_or(alg.episodes),
            phase1_episodes: raw.phase1_episodes.unwrap_or(alg.phase1_episodes),
            radius: raw.radius.unwrap_or(alg.radius),
            schedule,
            evaluation: EvalConfig {
                rollouts: raw.evaluation.rollouts.unwrap_or(eval.rollouts),
                stride: raw.evaluation.stride.unwrap_or(eval.stride),
            },
            nls: NlsConfig {
                random_starts: raw.estimation.random_starts.unwrap_or(alg.nls.random_starts),
                max_iterations: raw.estimation.max_iterations.unwrap_or(alg.nls.max_iterations),
                step_tolerance: raw.estimation.step_tolerance.unwrap_or(alg.nls.step_tolerance),
            },
            fisher_rollouts: raw.estimation.fisher_rollouts.unwrap_or(alg.fisher_rollouts),
            training,
            fisher_report,
            output,
            system,
        })
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let positive = |path: &str, v: usize| {
            if v == 0 {
                Err(invalid(path, "must be positive"))
            } else {
                Ok(())
            }
        };
        let positive_real = |path: &str, v: f64| {
            if v > 0.0 && v.is_finite() {
                Ok(())
            } else {
                Err(invalid(path, format!("must be positive and finite, got {v}")))
            }
        };
        positive("runs", self.runs)?;
        positive("horizon", self.horizon)?;
        positive("episodes", self.episodes)?;
        if self.phase1_episodes > self.episodes {
            return Err(invalid(
                "phase1_episodes",
                format!("{} exceeds episodes = {}", self.phase1_episodes, self.episodes),
            ));
        }
        positive_real("radius", self.radius)?;
        match self.schedule {
            StepSchedule::InverseMu {
                mu: MuSetting::Fixed(mu),
            } => positive_real("schedule.mu", mu)?,
            StepSchedule::InverseMu { mu: MuSetting::Auto } => {
                if self.fisher_rollouts < 2 {
                    return Err(invalid(
                        "estimation.fisher_rollouts",
                        "automatic mu needs at least 2 rollouts",
                    ));
                }
            }
            StepSchedule::Harmonic { a } => positive_real("schedule.a", a)?,
        }
        if self.evaluation.rollouts < 2 {
            return Err(invalid("evaluation.rollouts", "must be at least 2"));
        }
        positive("evaluation.stride", self.evaluation.stride)?;
        positive("estimation.max_iterations", self.nls.max_iterations)?;
        if !(self.nls.step_tolerance >= 0.0) {
            return Err(invalid("estimation.step_tolerance", "must be non-negative"));
        }
        if let Some(t) = &self.training {
            positive("training.batch", t.batch)?;
            positive_real("training.learning_rate", t.learning_rate)?;
            positive_real("training.divergence_threshold", t.divergence_threshold)?;
        }
        if let Some(f) = &self.fisher_report {
            if f.rollouts < 2 {
                return Err(invalid("diagnostics.rollouts", "must be at least 2"));
            }
            if !(f.confidence > 0.0 && f.confidence < 1.0) {
                return Err(invalid("diagnostics.confidence", "must lie strictly between 0 and 1"));
            }
        }
        Ok(())
    }

    /// The benchmark with this configuration's horizon and training settings.
    pub fn problem(&self) -> Result<Problem, CliError> {
        let mut problem = match self.system.as_str() {
            "toy" => Problem::toy(),
            "cartpole" => Problem::cartpole(),
            other => return Err(invalid("system", format!("unknown system {other:?}"))),
        }
        .with_horizon(self.horizon);
        if let (
            Synthesis::MlpAdam {
                trainer,
                best_in_class_steps,
                ..
            },
            Some(t),
        ) = (&mut problem.synthesis, &self.training)
        {
            *trainer = TrainerConfig {
                adam: AdamConfig {
                    learning_rate: t.learning_rate,
                    ..trainer.adam
                },
                steps: t.steps,
                batch: t.batch,
                divergence_threshold: t.divergence_threshold,
                ..*trainer
            };
            *best_in_class_steps = t.best_in_class_steps;
        }
        Ok(problem)
    }

    pub fn refinement(&self) -> RefinementConfig {
        RefinementConfig {
            episodes: self.episodes,
            phase1_episodes: self.phase1_episodes,
            radius: self.radius,
            schedule: self.schedule,
            nls: self.nls,
            fisher_rollouts: self.fisher_rollouts,
        }
    }

    /// SHA-256 of the resolved configuration without the output directory.
    /// Writing a default explicitly leaves the hash unchanged.
    pub fn hash(&self) -> String {
        let mut value = serde_json::to_value(self).expect("configuration serializes");
        if let Some(map) = value.as_object_mut() {
            map.remove("output");
        }
        let bytes = serde_json::to_vec(&value).expect("configuration serializes");
        hex::encode(Sha256::digest(&bytes))
    }
}

fn resolve_mu(raw: Option<RawMu>, default: MuSetting) -> Result<MuSetting, CliError> {
    match raw {
        None => Ok(default),
        Some(RawMu::Number(mu)) => Ok(MuSetting::Fixed(mu)),
        Some(RawMu::Word(w)) if w == "auto" => Ok(MuSetting::Auto),
        Some(RawMu::Word(w)) => Err(invalid(
            "schedule.mu",
            format!("expected \"auto\" or a number, got {w:?}"),
        )),
    }
}
