//! Acceptance suite.
//!
//! Every criterion runs at its stated tolerance with the committed master
//! seed and prints one `PASS`/`FAIL` line. The process exits non-zero if any
//! criterion fails. A substring argument selects criteria by name, e.g.
//! `cargo test --test acceptance -- probe`.

use std::path::Path;
use std::process::ExitCode;
use std::sync::Arc;
use std::time::Instant;

use online_ce::algorithms::{reference_policy, AggregateRow, Phase, Problem, RegretTrace};
use online_ce::analysis::{
    fisher_information, fit_rate, gradient_oracle_check, lojasiewicz_probe, ring_grid, FisherConfig, ProbeConfig,
    RateModel,
};
use online_ce::dynamics::ScalarLinearSystem;
use online_ce::estimation::{empirical_loss, loss_and_gradient, Dataset};
use online_ce::policy::{MlpParams, PolicySpec};
use online_ce::seed::StreamKey;
use online_ce::simulate::{monte_carlo_cost, rollout};
use online_ce_cli::config::{Algorithm, ExperimentConfig};
use online_ce_cli::experiment::{default_jobs, run_experiment, trace_file_name, ExperimentOutcome, TRACE_DIR};
use rand::Rng;

const MASTER_SEED: u64 = 2025;

struct Verdict {
    passed: bool,
    detail: String,
}

fn verdict(passed: bool, detail: String) -> Result<Verdict, String> {
    Ok(Verdict { passed, detail })
}

fn bundled(name: &str) -> ExperimentConfig {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs").join(name);
    ExperimentConfig::load(&path).unwrap_or_else(|e| panic!("{}: {e}", path.display()))
}

fn run_in(config: &mut ExperimentConfig, dir: &Path) -> Result<ExperimentOutcome, String> {
    config.output = dir.to_owned();
    config.seed = MASTER_SEED;
    run_experiment(config, default_jobs()).map_err(|e| e.to_string())
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Largest norm-wise relative error between the analytic loss gradient and
/// central differences, over random parameters and fresh data per probe.
fn worst_gradient_error(
    problem: &Problem,
    key: StreamKey,
    sample: impl Fn(&mut dyn rand::RngCore) -> Vec<f64>,
) -> Result<f64, String> {
    let sys = &problem.system;
    let mut worst = 0.0f64;
    for k in 0..50 {
        let mut rng = key.child(k).rng();
        let traj = rollout(
            sys,
            &problem.exploration,
            &problem.phi_star,
            &problem.cost,
            problem.horizon,
            &mut rng,
        )
        .map_err(|e| e.to_string())?;
        let data = Dataset::from_trajectory(&traj);
        let phi = sample(&mut rng);
        let mut grad = vec![0.0; phi.len()];
        loss_and_gradient(sys, &data, &phi, &mut grad).map_err(|e| e.to_string())?;
        let mut fd = vec![0.0; phi.len()];
        let mut probe = phi.clone();
        for j in 0..phi.len() {
            let h = 1e-5 * phi[j].abs().max(1.0);
            probe[j] = phi[j] + h;
            let plus = empirical_loss(sys, &data, &probe).map_err(|e| e.to_string())?;
            probe[j] = phi[j] - h;
            let minus = empirical_loss(sys, &data, &probe).map_err(|e| e.to_string())?;
            probe[j] = phi[j];
            fd[j] = (plus - minus) / (2.0 * h);
        }
        let diff: Vec<f64> = grad.iter().zip(&fd).map(|(a, b)| a - b).collect();
        worst = worst.max(norm(&diff) / norm(&grad).max(norm(&fd)));
    }
    Ok(worst)
}

fn gradient_correctness() -> Result<Verdict, String> {
    let key = StreamKey::new(MASTER_SEED).child(1);
    let toy = worst_gradient_error(&Problem::toy(), key.child(1), |rng| {
        (0..2).map(|_| rng.random_range(-1.0..1.0)).collect()
    })?;
    let cart = worst_gradient_error(&Problem::cartpole(), key.child(2), |rng| {
        [1.0, 0.1, 1.0, 1.0, 1.0]
            .iter()
            .map(|v| v * rng.random_range(0.5..1.5))
            .collect()
    })?;
    verdict(
        toy <= 1e-6 && cart <= 1e-4,
        format!("50 probes each; worst relative error toy {toy:.2e} (<= 1e-6), cartpole {cart:.2e} (<= 1e-4)"),
    )
}

fn gradient_unbiasedness() -> Result<Verdict, String> {
    let p = Problem::toy();
    let key = StreamKey::new(MASTER_SEED).child(2);
    let phi = [0.35, 0.15];
    let n = 100_000;
    let check = |k: u64| {
        gradient_oracle_check(
            &p.system,
            &p.exploration,
            &p.phi_star,
            &phi,
            p.horizon,
            n,
            1e-4,
            key.child(k),
        )
        .map_err(|e| e.to_string())
    };
    let a = check(1)?;
    let b = check(2)?;
    let mut passed = true;
    let mut parts = Vec::new();
    for j in 0..2 {
        // Stochastic gradients on one set against the difference quotient of
        // the Monte-Carlo error on an independent set.
        let se = a.gradient_stderr[j].hypot(b.finite_difference_stderr[j]);
        let z = (a.mean_gradient[j] - b.finite_difference[j]) / se;
        // Same trajectories on both sides.
        let se_same = a.gradient_stderr[j].hypot(a.finite_difference_stderr[j]);
        let z_same = (a.mean_gradient[j] - a.finite_difference[j]) / se_same;
        passed &= z.abs() <= 3.0 && z_same.abs() <= 3.0;
        parts.push(format!(
            "d{j}: mean grad {:.4} vs FD {:.4} ({z:+.2} se independent, {z_same:+.2} se common)",
            a.mean_gradient[j], b.finite_difference[j]
        ));
    }
    verdict(passed, format!("{n} trajectories; {}", parts.join("; ")))
}

fn optimal_cost() -> Result<Verdict, String> {
    let p = Problem::toy();
    let (policy, _) = reference_policy(&p, StreamKey::new(MASTER_SEED)).map_err(|e| e.to_string())?;
    let est = monte_carlo_cost(
        &p.system,
        &policy,
        &p.phi_star,
        &p.cost,
        p.horizon,
        100_000,
        StreamKey::new(MASTER_SEED).child(3),
    )
    .map_err(|e| e.to_string())?;
    verdict(
        (est.mean - 18.0).abs() <= 0.2,
        format!(
            "J = {:.4} +/- {:.4} over 1e5 rollouts (target 18 +/- 0.2)",
            est.mean, est.stderr
        ),
    )
}

fn persistence_of_excitation() -> Result<Verdict, String> {
    let p = Problem::toy();
    let (policy, _) = reference_policy(&p, StreamKey::new(MASTER_SEED)).map_err(|e| e.to_string())?;
    let config = FisherConfig {
        rollouts: 10_000,
        bootstrap_resamples: 1000,
        confidence: 0.95,
    };
    let est = fisher_information(
        &p.system,
        &policy,
        &p.phi_star,
        p.horizon,
        &config,
        StreamKey::new(MASTER_SEED).child(4),
    )
    .map_err(|e| e.to_string())?;
    let (lo, hi) = est.min_eigenvalue_ci.ok_or("no bootstrap interval")?;
    verdict(
        lo > 0.0,
        format!(
            "min eigenvalue {:.3}, 95% bootstrap CI [{lo:.3}, {hi:.3}] (lower end > 0)",
            est.min_eigenvalue
        ),
    )
}

fn row(rows: &[AggregateRow], episode: usize) -> &AggregateRow {
    &rows[episode - 1]
}

fn estimation_decay(outcome: &ExperimentOutcome, config: &ExperimentConfig) -> Result<Verdict, String> {
    let n1 = config.phase1_episodes;
    let last = config.episodes - n1 - 1;
    // φ_i is the estimate played in episode N1 + i + 1.
    let err = |i: usize| row(&outcome.aggregate, n1 + i + 1).mean_phi_err_sq;
    let ratio = err(1000) / err(100);
    let series: Vec<(f64, f64)> = (100..=last).map(|i| (i as f64, err(i))).collect();
    let fit = fit_rate(&series, RateModel::PowerLaw).map_err(|e| e.to_string())?;
    verdict(
        ratio <= 0.15 && (-1.4..=-0.6).contains(&fit.slope),
        format!(
            "{} runs; E|phi_1000 - phi*|^2 / E|phi_100 - phi*|^2 = {ratio:.4} (<= 0.15); log-log slope {:.3} in [-1.4, -0.6]",
            outcome.traces.len(),
            fit.slope
        ),
    )
}

fn log_regret(outcome: &ExperimentOutcome, config: &ExperimentConfig) -> Result<Verdict, String> {
    let regret = |n: usize| row(&outcome.aggregate, n).mean_cum_regret;
    let series: Vec<(f64, f64)> = (config.phase1_episodes + 1..=config.episodes)
        .map(|n| (n as f64, regret(n)))
        .collect();
    let fit = fit_rate(&series, RateModel::LogLinear).map_err(|e| e.to_string())?;
    let late = regret(3000) - regret(1000);
    let early = regret(1000) - regret(100);
    verdict(
        fit.r_squared >= 0.9 && late <= 0.6 * early,
        format!(
            "regret vs ln(episode) R^2 = {:.4} (>= 0.9); [R(3000)-R(1000)] / [R(1000)-R(100)] = {:.3} (<= 0.6)",
            fit.r_squared,
            late / early
        ),
    )
}

fn explore_then_commit_scaling(dir: &Path) -> Result<Verdict, String> {
    let mut regret = Vec::new();
    for n in [400, 1600] {
        let mut c = bundled("toy-etc.toml");
        assert_eq!(c.algorithm, Algorithm::ExploreThenCommit);
        c.episodes = n;
        let outcome = run_in(&mut c, &dir.join(format!("etc-{n}")))?;
        regret.push(outcome.aggregate.last().expect("episodes").mean_cum_regret);
    }
    let ratio = regret[1] / regret[0];
    verdict(
        (1.4..=2.6).contains(&ratio),
        format!(
            "30 runs; Regret(1600) = {:.1}, Regret(400) = {:.1}, ratio {ratio:.3} in [1.4, 2.6]",
            regret[1], regret[0]
        ),
    )
}

fn read_trace(path: &Path) -> Result<Vec<csv::StringRecord>, String> {
    let mut reader = csv::Reader::from_path(path).map_err(|e| e.to_string())?;
    reader.records().collect::<Result<_, _>>().map_err(|e| e.to_string())
}

fn structural_invariants(dir: &Path) -> Result<Verdict, String> {
    let smoke = |out: &str| -> Result<ExperimentOutcome, String> {
        let mut c = bundled("toy.toml");
        c.episodes = 50;
        c.phase1_episodes = 10;
        c.runs = 4;
        c.fisher_report = None;
        run_in(&mut c, &dir.join(out))
    };
    let a = smoke("smoke-a")?;
    smoke("smoke-b")?;
    let bound = Problem::TOY_BOUND;
    let radius = a.manifest.config.radius;
    let mut files = vec!["aggregate.csv".to_owned()];
    files.extend((0..a.traces.len()).map(|r| format!("{TRACE_DIR}/{}", trace_file_name(r))));
    let identical = files
        .iter()
        .all(|f| std::fs::read(dir.join("smoke-a").join(f)).ok() == std::fs::read(dir.join("smoke-b").join(f)).ok());

    let mut in_ball = true;
    let mut prefix_exact = true;
    let mut complete = true;
    let mut checked = 0;
    for (r, trace) in a.traces.iter().enumerate() {
        complete &= trace.records.len() == 50;
        let phi0 = trace.phi0.as_ref().ok_or("missing phi0")?;
        let records = read_trace(&dir.join("smoke-a").join(TRACE_DIR).join(trace_file_name(r)))?;
        let mut previous = 0.0;
        for rec in &records {
            let num = |i: usize| rec[i].parse::<f64>().map_err(|e| e.to_string());
            // columns: run, episode, phase, cost_realized, mc_mean, mc_stderr, phi_0, phi_1, phi_err_sq, cum_regret, excess_cost
            let cum = num(9)?;
            let excess = num(10)?;
            prefix_exact &= cum == previous + excess;
            previous = cum;
            if &rec[2] == Phase::Refine.as_str() {
                let phi = [num(6)?, num(7)?];
                let d = (phi[0] - phi0[0]).hypot(phi[1] - phi0[1]);
                in_ball &= d <= radius + 1e-12 && norm(&phi) <= bound;
                checked += 1;
            }
        }
        in_ball &= trace
            .final_phi
            .as_ref()
            .is_some_and(|f| (f[0] - phi0[0]).hypot(f[1] - phi0[1]) <= radius + 1e-12);
    }
    verdict(
        identical && in_ball && prefix_exact && complete,
        format!(
            "{} runs x 50 episodes; {checked} refinement estimates in the ball: {in_ball}; prefix sums exact: {prefix_exact}; \
             byte-identical rerun: {identical}",
            a.traces.len()
        ),
    )
}

fn evaluated_cost(trace: &RegretTrace, episode: usize) -> Result<f64, String> {
    trace.records[episode - 1]
        .evaluation
        .map(|e| e.mean)
        .ok_or_else(|| format!("run {} episode {episode} was not evaluated", trace.run))
}

fn cartpole(dir: &Path) -> Result<Verdict, String> {
    let mut c = bundled("cartpole.toml");
    let outcome = run_in(&mut c, &dir.join("cartpole"))?;
    let j_star = outcome.baseline.j_star.mean;
    let mut improved = 0;
    let mut final_costs = Vec::new();
    for t in &outcome.traces {
        let c10 = evaluated_cost(t, 10)?;
        let c300 = evaluated_cost(t, 300)?;
        improved += usize::from(c300 < c10);
        final_costs.push(c300);
    }
    let mean = final_costs.iter().sum::<f64>() / final_costs.len() as f64;
    let rel = (mean - j_star).abs() / j_star;
    let diverged: usize = outcome.traces.iter().map(|t| t.diverged_trainings).sum();
    verdict(
        rel <= 0.2 && improved >= 25,
        format!(
            "{} runs; mean cost at episode 300 {mean:.2} vs best-in-class {j_star:.2} ({:.1}% off, <= 20%); \
             episode 300 below episode 10 in {improved}/30 (>= 25); {diverged} diverged training rounds",
            outcome.traces.len(),
            100.0 * rel
        ),
    )
}

/// Mean over `t = 1..T` of `E[x_t²]` for `x' = a·x + w`, `x_1 = x1`, `w ~ N(0, σ²)`.
fn mean_square_state(a: f64, sigma: f64, x1: f64, horizon: usize) -> f64 {
    let mut m = x1 * x1;
    let mut total = 0.0;
    for _ in 0..horizon {
        total += m;
        m = a * a * m + sigma * sigma;
    }
    total / horizon as f64
}

fn lojasiewicz() -> Result<Verdict, String> {
    let sys = ScalarLinearSystem::new(1.0, 1.0);
    let zero = PolicySpec::Mlp(Arc::new(MlpParams::zeros(&[1, 1]).map_err(|e| e.to_string())?));
    let phi_star = [0.5];
    let horizon = 10;
    let key = StreamKey::new(MASTER_SEED).child(10);
    // The excess error is exactly S·Δ², so the constant for α = 1/2 is S^{-1/2}.
    let expected = mean_square_state(phi_star[0], 1.0, 1.0, horizon).powf(-0.5);
    let radii = [0.4, 0.2, 0.1, 0.05, 0.025];
    let grid = ring_grid(&phi_star, &radii, 0).map_err(|e| e.to_string())?;
    let probe = |alpha: f64| {
        lojasiewicz_probe(
            &sys,
            &zero,
            &phi_star,
            &grid,
            horizon,
            &ProbeConfig {
                rollouts: 100_000,
                alpha,
            },
            key,
        )
        .map_err(|e| e.to_string())
    };
    let right = probe(0.5)?;
    let wrong = probe(1.0)?;
    let rel = (right.constant / expected - 1.0).abs();
    // Mean ratio on the largest and the smallest ring.
    let spread = |report: &online_ce::analysis::ProbeReport| {
        let ring = |r: f64| {
            let v: Vec<f64> = report
                .candidates
                .iter()
                .filter(|c| (c.distance - r).abs() < 1e-9)
                .filter_map(|c| c.ratio)
                .collect();
            v.iter().sum::<f64>() / v.len() as f64
        };
        ring(radii[radii.len() - 1]) / ring(radii[0])
    };
    let (stable, growth) = (spread(&right), spread(&wrong));
    let passed = rel <= 0.1 && right.flagged == 0 && (0.8..=1.25).contains(&stable) && growth >= 4.0;
    verdict(
        passed,
        format!(
            "alpha 1/2: C = {:.4} vs closed form {expected:.4} ({:.1}% off, <= 10%), smallest/largest ring ratio {stable:.3}; \
             alpha 1: ratio grows {growth:.1}x over a 16x shrink (divergence detected: {})",
            right.constant,
            100.0 * rel,
            growth >= 4.0
        ),
    )
}

fn main() -> ExitCode {
    let filter: Option<String> = std::env::args().skip(1).find(|a| !a.starts_with('-'));
    let selected = |name: &str| filter.as_deref().is_none_or(|f| name.contains(f));
    let dir = tempfile::tempdir().expect("temporary directory");
    let mut failures = 0;
    let mut report = |name: &str, run: &mut dyn FnMut() -> Result<Verdict, String>| {
        if !selected(name) {
            return;
        }
        let start = Instant::now();
        let result = run();
        let secs = start.elapsed().as_secs_f64();
        let (tag, detail) = match result {
            Ok(v) if v.passed => ("PASS", v.detail),
            Ok(v) => ("FAIL", v.detail),
            Err(e) => ("FAIL", format!("error: {e}")),
        };
        if tag == "FAIL" {
            failures += 1;
        }
        println!("{tag} {name}: {detail} [{secs:.1}s]");
    };

    println!("acceptance suite, master seed {MASTER_SEED}");
    report("gradient-correctness", &mut gradient_correctness);
    report("gradient-unbiasedness", &mut gradient_unbiasedness);
    report("optimal-cost", &mut optimal_cost);
    report("persistence-of-excitation", &mut persistence_of_excitation);

    if selected("estimation-decay") || selected("log-regret") {
        let mut config = bundled("toy.toml");
        config.fisher_report = None;
        let toy = run_in(&mut config, &dir.path().join("toy"));
        for (name, check) in [
            (
                "estimation-decay",
                estimation_decay as fn(&ExperimentOutcome, &ExperimentConfig) -> _,
            ),
            ("log-regret", log_regret),
        ] {
            report(name, &mut || {
                toy.as_ref().map_err(Clone::clone).and_then(|o| check(o, &config))
            });
        }
    }
    report("explore-then-commit-scaling", &mut || {
        explore_then_commit_scaling(dir.path())
    });
    report("structural-invariants", &mut || structural_invariants(dir.path()));
    report("lojasiewicz-probe", &mut lojasiewicz);
    report("cartpole", &mut || cartpole(dir.path()));

    if failures == 0 {
        println!("all selected criteria passed");
        ExitCode::SUCCESS
    } else {
        println!("{failures} criteria failed");
        ExitCode::FAILURE
    }
}
