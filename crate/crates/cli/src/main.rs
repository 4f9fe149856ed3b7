use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use online_ce::analysis::{FisherConfig, ProbeConfig, DEFAULT_ANGLES, DEFAULT_RADII};
use online_ce_cli::config::ExperimentConfig;
use online_ce_cli::experiment::{
    aggregate_traces, default_jobs, run_experiment, thread_pool, trace_files, write_aggregate_file, AGGREGATE_FILE,
};
use online_ce_cli::{diagnostics, CliError};

#[derive(Parser)]
#[command(
    name = "online-ce",
    version,
    about = "Online certainty-equivalent control experiments"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Experiment configuration (TOML).
    #[arg(long)]
    config: PathBuf,
    /// Worker threads; defaults to the number of cores.
    #[arg(long)]
    jobs: Option<usize>,
    /// Master seed, overriding the configuration.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory, overriding the configuration.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Run every seed of an experiment and write traces, aggregate and manifest.
    Run(Common),
    /// Fisher information at the true parameters under the reference controller.
    Fisher {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = FisherConfig::default().rollouts)]
        rollouts: usize,
        #[arg(long, default_value_t = FisherConfig::default().bootstrap_resamples)]
        bootstrap: usize,
        #[arg(long, default_value_t = FisherConfig::default().confidence)]
        confidence: f64,
    },
    /// Lojasiewicz probe on rings around the true parameters.
    Probe {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 0.5)]
        alpha: f64,
        #[arg(long, default_value_t = 10_000)]
        rollouts: usize,
        /// Comma-separated ring radii.
        #[arg(long, value_delimiter = ',', default_values_t = DEFAULT_RADII)]
        radii: Vec<f64>,
        #[arg(long, default_value_t = DEFAULT_ANGLES)]
        angles: usize,
    },
    /// Least-squares fit on exploration data.
    Fit {
        #[command(flatten)]
        common: Common,
        /// Exploration episodes; defaults to the configured initial phase.
        #[arg(long)]
        episodes: Option<usize>,
    },
    /// Recompute the aggregate CSV from a run directory's traces.
    Aggregate {
        /// Run directory (or a directory of run_*.csv files).
        #[arg(long = "in")]
        input: PathBuf,
        /// Output CSV; defaults to aggregate.csv inside the input directory.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn load(common: &Common) -> Result<(ExperimentConfig, usize), CliError> {
    let mut config = ExperimentConfig::load(&common.config)?;
    if let Some(seed) = common.seed {
        config.seed = seed;
    }
    if let Some(out) = &common.out {
        config.output = out.clone();
    }
    let jobs = common.jobs.unwrap_or_else(default_jobs);
    if jobs == 0 {
        return Err(CliError::Config {
            path: "--jobs".into(),
            message: "must be positive".into(),
        });
    }
    Ok((config, jobs))
}

fn main() -> ExitCode {
    match dispatch(Cli::parse().command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

fn dispatch(command: Command) -> Result<(), CliError> {
    match command {
        Command::Run(common) => {
            let (config, jobs) = load(&common)?;
            let outcome = run_experiment(&config, jobs)?;
            let m = &outcome.manifest;
            println!(
                "{} runs of {} x {} episodes written to {} ({:.1}s, config {})",
                m.runs.len(),
                config.system,
                config.episodes,
                config.output.display(),
                m.wall_time_seconds,
                &m.config_hash[..12]
            );
            if let Some(last) = outcome.aggregate.last() {
                println!(
                    "J* = {:.6}; episode {}: mean cumulative regret {:.6} (stderr {:.3e})",
                    outcome.baseline.j_star.mean, last.episode, last.mean_cum_regret, last.cum_regret_stderr
                );
            }
        }
        Command::Fisher {
            common,
            rollouts,
            bootstrap,
            confidence,
        } => {
            let (config, jobs) = load(&common)?;
            let fisher = FisherConfig {
                rollouts,
                bootstrap_resamples: bootstrap,
                confidence,
            };
            let (est, path) = thread_pool(jobs)?.install(|| diagnostics::fisher(&config, &fisher, &config.output))?;
            println!("minimum eigenvalue {:.6e}", est.min_eigenvalue);
            if let Some((lo, hi)) = est.min_eigenvalue_ci {
                println!("{:.0}% bootstrap interval [{lo:.6e}, {hi:.6e}]", 100.0 * confidence);
            }
            println!("report written to {}", path.display());
        }
        Command::Probe {
            common,
            alpha,
            rollouts,
            radii,
            angles,
        } => {
            let (config, jobs) = load(&common)?;
            let probe = ProbeConfig { rollouts, alpha };
            let (report, path) =
                thread_pool(jobs)?.install(|| diagnostics::probe(&config, &probe, &radii, angles, &config.output))?;
            println!(
                "alpha {alpha}: constant {:.6e}, {} of {} candidates flagged",
                report.constant,
                report.flagged,
                report.candidates.len()
            );
            println!("report written to {}", path.display());
        }
        Command::Fit { common, episodes } => {
            let (config, jobs) = load(&common)?;
            let (fit, path) = thread_pool(jobs)?.install(|| diagnostics::fit(&config, episodes, &config.output))?;
            println!(
                "phi_hat {:?} after {} episodes; squared error {:.6e}",
                fit.phi_hat, fit.episodes, fit.phi_err_sq
            );
            println!("report written to {}", path.display());
        }
        Command::Aggregate { input, out } => {
            let files = trace_files(&input)?;
            let rows = aggregate_traces(&files)?;
            let path = out.unwrap_or_else(|| input.join(AGGREGATE_FILE));
            write_aggregate_file(&path, &rows)?;
            println!("aggregated {} traces into {}", files.len(), path.display());
        }
    }
    Ok(())
}
