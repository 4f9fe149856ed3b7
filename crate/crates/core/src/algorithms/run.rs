use super::{
    certainty_equivalent, check_problem, AlgorithmError, Baseline, EpisodeRecord, MuSetting, Phase, Problem,
    RefinementConfig, RegretTrace, StepSchedule,
};
use crate::analysis::{fisher_information, FisherConfig};
use crate::dynamics::{DynParams, System};
use crate::estimation::{fit_least_squares, loss_gradient, ConfidenceBall, Dataset, NlsConfig};
use crate::policy::{MlpParams, PolicySpec};
use crate::seed::{purpose, StreamKey};
use crate::simulate::{monte_carlo_cost, rollout, McEstimate, Trajectory};

/// Root of every stream a run draws from.
pub fn run_key(experiment: StreamKey, run: usize) -> StreamKey {
    experiment.child(purpose::RUN).child(run as u64)
}

/// `⌈√N⌉`, capped at `N`.
pub fn exploration_episodes(episodes: usize) -> usize {
    let mut k = (episodes as f64).sqrt().ceil() as usize;
    while k > 0 && (k - 1) * (k - 1) >= episodes {
        k -= 1;
    }
    while k * k < episodes {
        k += 1;
    }
    k.min(episodes)
}

/// Monte-Carlo cost of `policy` under the true parameters minus `J*`, on
/// the baseline's evaluation streams.
pub fn episode_excess_cost(
    problem: &Problem,
    baseline: &Baseline,
    policy: &PolicySpec,
) -> Result<(f64, McEstimate), AlgorithmError> {
    let est = monte_carlo_cost(
        &problem.system,
        policy,
        &problem.phi_star,
        &problem.cost,
        problem.horizon,
        baseline.eval.rollouts,
        baseline.eval_key,
    )?;
    Ok((est.mean - baseline.j_star.mean, est))
}

/// Shared bookkeeping for one run: plays episodes, evaluates the played
/// policies on schedule and keeps the regret prefix sum.
struct Runner<'a> {
    problem: &'a Problem,
    baseline: &'a Baseline,
    key: StreamKey,
    total_episodes: usize,
    trace: RegretTrace,
    /// Increments whenever the played controller changes.
    policy_version: u64,
    cached: Option<(u64, f64, McEstimate)>,
    last_excess: f64,
    last_phase: Option<Phase>,
}

impl<'a> Runner<'a> {
    fn new(problem: &'a Problem, baseline: &'a Baseline, key: StreamKey, run: usize, total_episodes: usize) -> Self {
        Self {
            problem,
            baseline,
            key,
            total_episodes,
            trace: RegretTrace::new(run, baseline.j_star),
            policy_version: 0,
            cached: None,
            last_excess: f64::NAN,
            last_phase: None,
        }
    }

    fn new_policy(&mut self) {
        self.policy_version += 1;
    }

    fn due(&self, episode: usize, phase: Phase) -> bool {
        let stride = self.baseline.eval.stride;
        episode == 0
            || (episode + 1).is_multiple_of(stride)
            || episode + 1 == self.total_episodes
            || self.last_phase != Some(phase)
    }

    fn play(
        &mut self,
        policy: &PolicySpec,
        phase: Phase,
        phi: Option<&DynParams>,
    ) -> Result<Trajectory, AlgorithmError> {
        let episode = self.trace.records.len();
        let mut rng = self.key.child(purpose::EPISODE).child(episode as u64).rng();
        let p = self.problem;
        let traj = rollout(&p.system, policy, &p.phi_star, &p.cost, p.horizon, &mut rng)?;

        let evaluation = if self.due(episode, phase) {
            let est = match self.cached {
                Some((version, excess, est)) if version == self.policy_version => {
                    self.last_excess = excess;
                    est
                }
                _ => {
                    let (excess, est) = episode_excess_cost(p, self.baseline, policy)?;
                    self.cached = Some((self.policy_version, excess, est));
                    self.last_excess = excess;
                    est
                }
            };
            Some(est)
        } else {
            None
        };
        self.last_phase = Some(phase);

        let cum_regret = self.trace.records.last().map_or(0.0, |r| r.cum_regret) + self.last_excess;
        self.trace.records.push(EpisodeRecord {
            episode: episode + 1,
            phase,
            policy: policy.tag().to_owned(),
            cost_realized: traj.total_cost,
            evaluation,
            excess_cost: self.last_excess,
            phi: phi.map(|v| v.to_vec()),
            phi_err_sq: phi.map_or(f64::NAN, |v| v.dist_sq(&p.phi_star)),
            cum_regret,
            held_estimate: false,
            training_diverged: false,
        });
        Ok(traj)
    }

    fn explore(&mut self, episodes: usize) -> Result<Dataset, AlgorithmError> {
        let p = self.problem;
        let mut data = Dataset::new(p.system.state_dim(), p.system.input_dim());
        self.new_policy();
        for _ in 0..episodes {
            let traj = self.play(&p.exploration, Phase::Explore, None)?;
            data.push_trajectory(&traj);
        }
        Ok(data)
    }

    fn fit(&mut self, data: &Dataset, nls: &NlsConfig) -> Result<DynParams, AlgorithmError> {
        let p = self.problem;
        let phi = if data.is_empty() {
            let mut origin = vec![0.0; p.system.param_dim()];
            p.system.clamp_params(&mut origin);
            DynParams::new(origin, p.bound())?
        } else {
            let mut rng = self.key.child(purpose::LEAST_SQUARES).rng();
            fit_least_squares(&p.system, data, p.bound(), nls, &mut rng)?.phi
        };
        self.trace.phi0 = Some(phi.to_vec());
        Ok(phi)
    }

    fn synthesize(
        &mut self,
        phi: &DynParams,
        warm: &mut Option<MlpParams>,
        round: usize,
    ) -> Result<PolicySpec, AlgorithmError> {
        let mut rng = self.key.child(purpose::TRAINING).child(round as u64).rng();
        let s = certainty_equivalent(self.problem, phi, warm.as_ref(), &mut rng)?;
        if let Some(outcome) = s.training {
            if outcome.diverged {
                self.trace.diverged_trainings += 1;
            }
            *warm = Some(outcome.params);
        }
        self.new_policy();
        Ok(s.policy)
    }

    fn mark_last(&mut self, held: bool, diverged: bool) {
        if let Some(r) = self.trace.records.last_mut() {
            r.held_estimate = held;
            r.training_diverged = diverged;
        }
    }
}

/// Explore for `N_phase1` episodes, fit, then alternate certainty-equivalent
/// play with one projected stochastic-gradient step per episode.
pub fn continuous_refinement(
    problem: &Problem,
    config: &RefinementConfig,
    baseline: &Baseline,
    experiment: StreamKey,
    run: usize,
) -> Result<RegretTrace, AlgorithmError> {
    check_problem(problem)?;
    config.validate()?;
    let key = run_key(experiment, run);
    let mut runner = Runner::new(problem, baseline, key, run, config.episodes);

    let data = runner.explore(config.phase1_episodes)?;
    let phi0 = runner.fit(&data, &config.nls)?;
    let ball = ConfidenceBall::new(phi0.clone(), config.radius);
    if config.phase1_episodes == config.episodes {
        runner.trace.final_phi = Some(phi0.to_vec());
        return Ok(runner.trace);
    }

    let mut warm = problem.initial_network(key.child(purpose::INIT))?;
    let mut phi = phi0;
    let mut policy = runner.synthesize(&phi, &mut warm, 0)?;
    let mut diverged = runner.trace.diverged_trainings > 0;

    let mu = match config.schedule {
        StepSchedule::InverseMu { mu: MuSetting::Auto } => {
            let fisher = FisherConfig {
                rollouts: config.fisher_rollouts,
                bootstrap_resamples: 0,
                confidence: 0.95,
            };
            let est = fisher_information(
                &problem.system,
                &policy,
                &phi,
                problem.horizon,
                &fisher,
                key.child(purpose::FISHER),
            )?;
            if !(est.min_eigenvalue > 0.0) {
                return Err(AlgorithmError::Config(format!(
                    "automatic mu is not positive ({}); set it explicitly",
                    est.min_eigenvalue
                )));
            }
            Some(est.min_eigenvalue)
        }
        StepSchedule::InverseMu {
            mu: MuSetting::Fixed(mu),
        } => Some(mu),
        StepSchedule::Harmonic { .. } => None,
    };
    runner.trace.mu = mu;

    let phase2 = config.episodes - config.phase1_episodes;
    for i in 0..phase2 {
        if i > 0 {
            let before = runner.trace.diverged_trainings;
            policy = runner.synthesize(&phi, &mut warm, i)?;
            diverged = runner.trace.diverged_trainings > before;
        }
        let traj = runner.play(&policy, Phase::Refine, Some(&phi))?;
        let grad = loss_gradient(&problem.system, &Dataset::from_trajectory(&traj), &phi)?;
        let held = grad.iter().any(|g| !g.is_finite());
        if held {
            runner.trace.held_steps += 1;
        } else {
            let eta = config.schedule.step(i, mu.unwrap_or(f64::NAN));
            let psi: Vec<f64> = phi.iter().zip(&grad).map(|(p, g)| p - eta * g).collect();
            phi = ball.project_admissible(&problem.system, &psi);
        }
        runner.mark_last(held, diverged);
    }
    runner.trace.final_phi = Some(phi.to_vec());
    Ok(runner.trace)
}

/// Explore for `⌈√N⌉` episodes, fit once, and play the resulting
/// certainty-equivalent controller for the rest.
pub fn explore_then_commit(
    problem: &Problem,
    episodes: usize,
    nls: &NlsConfig,
    baseline: &Baseline,
    experiment: StreamKey,
    run: usize,
) -> Result<RegretTrace, AlgorithmError> {
    check_problem(problem)?;
    if episodes == 0 {
        return Err(AlgorithmError::Config("episodes must be positive".into()));
    }
    let key = run_key(experiment, run);
    let mut runner = Runner::new(problem, baseline, key, run, episodes);
    let explore = exploration_episodes(episodes);
    let data = runner.explore(explore)?;
    let phi = runner.fit(&data, nls)?;
    runner.trace.final_phi = Some(phi.to_vec());
    if explore == episodes {
        return Ok(runner.trace);
    }
    let mut warm = problem.initial_network(key.child(purpose::INIT))?;
    let policy = runner.synthesize(&phi, &mut warm, 0)?;
    let diverged = runner.trace.diverged_trainings > 0;
    for _ in explore..episodes {
        runner.play(&policy, Phase::Commit, Some(&phi))?;
        runner.mark_last(false, diverged);
    }
    Ok(runner.trace)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::algorithms::{prepare_baseline, EvalConfig};
    use crate::dynamics::{SystemKind, ToySystem};

    fn noiseless_toy() -> Problem {
        Problem {
            system: SystemKind::Toy(ToySystem::new(5.0, 0.0)),
            ..Problem::toy()
        }
    }

    fn small_eval() -> EvalConfig {
        EvalConfig {
            rollouts: 50,
            stride: 1,
        }
    }

    #[test]
    fn exploration_count_is_ceiling_root() {
        for (n, k) in [(1, 1), (2, 2), (4, 2), (5, 3), (400, 20), (1600, 40), (1601, 41)] {
            assert_eq!(exploration_episodes(n), k, "N = {n}");
        }
    }

    #[test]
    fn degenerate_config_has_no_phase_two() {
        let p = Problem::toy();
        let b = prepare_baseline(&p, small_eval(), StreamKey::new(1)).unwrap();
        let config = RefinementConfig {
            episodes: 5,
            phase1_episodes: 5,
            ..RefinementConfig::toy()
        };
        let trace = continuous_refinement(&p, &config, &b, StreamKey::new(1), 0).unwrap();
        assert_eq!(trace.records.len(), 5);
        assert!(trace.records.iter().all(|r| r.phase == Phase::Explore));
        assert!(trace.phi0.is_some());
    }

    #[test]
    fn refinement_stays_in_the_ball_and_sums_regret() {
        let p = Problem::toy();
        let b = prepare_baseline(
            &p,
            EvalConfig {
                rollouts: 100,
                stride: 3,
            },
            StreamKey::new(2),
        )
        .unwrap();
        let config = RefinementConfig {
            episodes: 40,
            phase1_episodes: 10,
            fisher_rollouts: 200,
            ..RefinementConfig::toy()
        };
        let trace = continuous_refinement(&p, &config, &b, StreamKey::new(2), 0).unwrap();
        assert_eq!(trace.records.len(), 40);
        assert!(trace.mu.unwrap() > 0.0);
        let phi0 = trace.phi0.clone().unwrap();
        let mut sum = 0.0;
        for r in &trace.records {
            sum += r.excess_cost;
            assert_eq!(r.cum_regret, sum);
            if let Some(phi) = &r.phi {
                let d: f64 = phi.iter().zip(&phi0).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
                assert!(d <= config.radius * (1.0 + 1e-12));
            }
        }
        let refine = &trace.records[10];
        assert_eq!(refine.phase, Phase::Refine);
        assert!(refine.evaluation.is_some());
        assert!(trace.records[12].evaluation.is_none());
    }

    #[test]
    fn noiseless_refinement_holds_the_truth() {
        // Small steps: with 8/μ near the inverse curvature the first steps overshoot.
        let p = noiseless_toy();
        let b = prepare_baseline(&p, small_eval(), StreamKey::new(2)).unwrap();
        assert_eq!(b.j_star.mean, 0.0);
        let config = RefinementConfig {
            episodes: 40,
            phase1_episodes: 5,
            schedule: StepSchedule::InverseMu {
                mu: MuSetting::Fixed(1e4),
            },
            ..RefinementConfig::toy()
        };
        let trace = continuous_refinement(&p, &config, &b, StreamKey::new(2), 0).unwrap();
        for r in trace.records.iter().filter(|r| r.phase == Phase::Refine) {
            assert!(r.phi_err_sq < 1e-16, "episode {}: {}", r.episode, r.phi_err_sq);
            assert!(r.excess_cost.abs() < 1e-12);
        }
    }

    #[test]
    fn noiseless_commit_is_optimal() {
        let p = noiseless_toy();
        let b = prepare_baseline(&p, small_eval(), StreamKey::new(3)).unwrap();
        let trace = explore_then_commit(&p, 16, &NlsConfig::default(), &b, StreamKey::new(3), 0).unwrap();
        assert_eq!(trace.records.iter().filter(|r| r.phase == Phase::Explore).count(), 4);
        for r in trace.records.iter().filter(|r| r.phase == Phase::Commit) {
            assert!(r.excess_cost.abs() < 1e-12);
        }
    }

    #[test]
    fn single_episode_commit_run_only_explores() {
        let p = Problem::toy();
        let b = prepare_baseline(&p, small_eval(), StreamKey::new(4)).unwrap();
        let trace = explore_then_commit(&p, 1, &NlsConfig::default(), &b, StreamKey::new(4), 0).unwrap();
        assert_eq!(trace.records.len(), 1);
        assert_eq!(trace.records[0].phase, Phase::Explore);
    }

    #[test]
    fn exploration_policy_has_positive_excess() {
        let p = Problem::toy();
        let b = prepare_baseline(
            &p,
            EvalConfig {
                rollouts: 2000,
                stride: 1,
            },
            StreamKey::new(5),
        )
        .unwrap();
        let (excess, est) = episode_excess_cost(&p, &b, &p.exploration).unwrap();
        assert!(excess > 2.58 * est.stderr, "excess {excess}, stderr {}", est.stderr);
        let (zero, _) = episode_excess_cost(&p, &b, &b.policy).unwrap();
        assert_eq!(zero, 0.0);
    }
}
