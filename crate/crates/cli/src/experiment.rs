use std::fs::{self, File};
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::time::Instant;

use online_ce::algorithms::{
    aggregate, continuous_refinement, explore_then_commit, prepare_baseline, write_aggregate_csv, write_trace_csv,
    AggregateRow, Baseline, RegretTrace,
};
use online_ce::analysis::{fisher_information, FisherEstimate};
use online_ce::dynamics::System;
use online_ce::policy::PolicySpec;
use online_ce::seed::{purpose, StreamKey};
use online_ce::simulate::McEstimate;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::{Algorithm, ExperimentConfig};
use crate::CliError;

pub const MANIFEST_FILE: &str = "manifest.json";
pub const AGGREGATE_FILE: &str = "aggregate.csv";
pub const BASELINE_FILE: &str = "baseline.json";
pub const FISHER_FILE: &str = "fisher.json";
pub const TRACE_DIR: &str = "traces";
pub const BEST_IN_CLASS_STEM: &str = "best_in_class";

pub fn trace_file_name(run: usize) -> String {
    format!("run_{run:03}.csv")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Status {
    Complete,
    Incomplete,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub run: usize,
    pub trace: String,
    pub cum_regret: f64,
    pub mu: Option<f64>,
    pub phi0: Option<Vec<f64>>,
    pub final_phi: Option<Vec<f64>>,
    pub held_steps: usize,
    pub diverged_trainings: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub tool: String,
    pub version: String,
    pub status: Status,
    pub error: Option<String>,
    pub config_hash: String,
    pub config: ExperimentConfig,
    pub master_seed: u64,
    /// How per-run and shared streams derive from the master seed.
    pub streams: String,
    pub jobs: usize,
    pub wall_time_seconds: f64,
    pub j_star: Option<McEstimate>,
    pub runs: Vec<RunSummary>,
    pub files: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BaselineReport {
    pub config_hash: String,
    pub policy: String,
    pub j_star: McEstimate,
    pub evaluation_rollouts: usize,
    pub training_steps: Option<usize>,
    pub training_diverged: Option<bool>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FisherReport {
    pub config_hash: String,
    pub system: String,
    pub policy: String,
    pub phi: Vec<f64>,
    pub estimate: FisherEstimate,
}

pub struct ExperimentOutcome {
    pub manifest: Manifest,
    pub baseline: Baseline,
    pub traces: Vec<RegretTrace>,
    pub aggregate: Vec<AggregateRow>,
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CliError + '_ {
    move |source| CliError::Io {
        path: path.to_owned(),
        source,
    }
}

fn create(path: &Path) -> Result<BufWriter<File>, CliError> {
    Ok(BufWriter::new(File::create(path).map_err(io_err(path))?))
}

pub(crate) fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    let text = serde_json::to_string_pretty(value).map_err(|e| CliError::Output(e.to_string()))?;
    fs::write(path, text + "\n").map_err(io_err(path))
}

fn csv_err(path: &Path) -> impl FnOnce(csv::Error) -> CliError + '_ {
    move |e| CliError::Output(format!("{}: {e}", path.display()))
}

pub fn thread_pool(jobs: usize) -> Result<rayon::ThreadPool, CliError> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(jobs)
        .build()
        .map_err(|e| CliError::Output(e.to_string()))
}

/// Worker count when `--jobs` is not given.
pub fn default_jobs() -> usize {
    std::thread::available_parallelism().map_or(1, |n| n.get())
}

/// Runs every seed of the experiment and writes traces, the aggregate, the
/// baseline and the manifest under `config.output`. On a runtime failure
/// the files written so far are kept and the manifest is marked incomplete.
pub fn run_experiment(config: &ExperimentConfig, jobs: usize) -> Result<ExperimentOutcome, CliError> {
    config.validate()?;
    let start = Instant::now();
    let out = config.output.clone();
    fs::create_dir_all(out.join(TRACE_DIR)).map_err(io_err(&out))?;
    let mut manifest = Manifest {
        tool: env!("CARGO_PKG_NAME").to_owned(),
        version: env!("CARGO_PKG_VERSION").to_owned(),
        status: Status::Incomplete,
        error: None,
        config_hash: config.hash(),
        config: config.clone(),
        master_seed: config.seed,
        streams: "run r draws from master/RUN/r; J* evaluation and every episode evaluation share master/EVALUATION"
            .to_owned(),
        jobs,
        wall_time_seconds: 0.0,
        j_star: None,
        runs: Vec::new(),
        files: Vec::new(),
    };
    let result = thread_pool(jobs)?.install(|| execute(config, &out, &mut manifest));
    manifest.wall_time_seconds = start.elapsed().as_secs_f64();
    match result {
        Ok((baseline, traces, aggregate)) => {
            manifest.status = Status::Complete;
            manifest.files.push(MANIFEST_FILE.to_owned());
            write_json(&out.join(MANIFEST_FILE), &manifest)?;
            Ok(ExperimentOutcome {
                manifest,
                baseline,
                traces,
                aggregate,
            })
        }
        Err(e) => {
            manifest.error = Some(e.to_string());
            manifest.files.push(MANIFEST_FILE.to_owned());
            write_json(&out.join(MANIFEST_FILE), &manifest)?;
            Err(e)
        }
    }
}

type Executed = (Baseline, Vec<RegretTrace>, Vec<AggregateRow>);

fn execute(config: &ExperimentConfig, out: &Path, manifest: &mut Manifest) -> Result<Executed, CliError> {
    let problem = config.problem()?;
    let experiment = StreamKey::new(config.seed);
    let baseline = prepare_baseline(&problem, config.evaluation, experiment)?;
    manifest.j_star = Some(baseline.j_star);

    if let PolicySpec::Mlp(params) = &baseline.policy {
        params.save(&out.join(BEST_IN_CLASS_STEM))?;
        manifest.files.push(format!("{BEST_IN_CLASS_STEM}.bin"));
        manifest.files.push(format!("{BEST_IN_CLASS_STEM}.json"));
    }
    let report = BaselineReport {
        config_hash: manifest.config_hash.clone(),
        policy: baseline.policy.tag().to_owned(),
        j_star: baseline.j_star,
        evaluation_rollouts: config.evaluation.rollouts,
        training_steps: baseline.training.as_ref().map(|t| t.steps_taken),
        training_diverged: baseline.training.as_ref().map(|t| t.diverged),
    };
    write_json(&out.join(BASELINE_FILE), &report)?;
    manifest.files.push(BASELINE_FILE.to_owned());

    let refinement = config.refinement();
    let results: Vec<_> = (0..config.runs)
        .into_par_iter()
        .map(|run| match config.algorithm {
            Algorithm::ContinuousRefinement => continuous_refinement(&problem, &refinement, &baseline, experiment, run),
            Algorithm::ExploreThenCommit => {
                explore_then_commit(&problem, config.episodes, &config.nls, &baseline, experiment, run)
            }
        })
        .collect();

    let param_dim = problem.system.param_dim();
    let mut traces = Vec::with_capacity(results.len());
    let mut first_error = None;
    for (run, result) in results.into_iter().enumerate() {
        match result {
            Ok(trace) => {
                let name = format!("{TRACE_DIR}/{}", trace_file_name(run));
                let path = out.join(&name);
                write_trace_csv(create(&path)?, &trace, param_dim).map_err(csv_err(&path))?;
                manifest.runs.push(RunSummary {
                    run,
                    trace: name.clone(),
                    cum_regret: trace.cumulative_regret(),
                    mu: trace.mu,
                    phi0: trace.phi0.clone(),
                    final_phi: trace.final_phi.clone(),
                    held_steps: trace.held_steps,
                    diverged_trainings: trace.diverged_trainings,
                });
                manifest.files.push(name);
                traces.push(trace);
            }
            Err(e) => {
                first_error.get_or_insert(CliError::Run { run, source: e });
            }
        }
    }
    if let Some(e) = first_error {
        return Err(e);
    }

    let rows = aggregate(&traces.iter().map(RegretTrace::summaries).collect::<Vec<_>>());
    write_aggregate_file(&out.join(AGGREGATE_FILE), &rows)?;
    manifest.files.push(AGGREGATE_FILE.to_owned());

    if let Some(fisher) = &config.fisher_report {
        let estimate = fisher_information(
            &problem.system,
            &baseline.policy,
            &problem.phi_star,
            problem.horizon,
            fisher,
            experiment.child(purpose::FISHER),
        )?;
        let report = FisherReport {
            config_hash: manifest.config_hash.clone(),
            system: config.system.clone(),
            policy: baseline.policy.tag().to_owned(),
            phi: problem.phi_star.to_vec(),
            estimate,
        };
        write_json(&out.join(FISHER_FILE), &report)?;
        manifest.files.push(FISHER_FILE.to_owned());
    }
    Ok((baseline, traces, rows))
}

pub fn write_aggregate_file(path: &Path, rows: &[AggregateRow]) -> Result<(), CliError> {
    write_aggregate_csv(create(path)?, rows).map_err(csv_err(path))
}

/// Trace files of an output directory, in run order.
pub fn trace_files(dir: &Path) -> Result<Vec<PathBuf>, CliError> {
    let traces = dir.join(TRACE_DIR);
    let search = if traces.is_dir() { traces } else { dir.to_owned() };
    let mut files: Vec<PathBuf> = fs::read_dir(&search)
        .map_err(io_err(&search))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.extension().is_some_and(|e| e == "csv")
                && p.file_name().is_some_and(|n| n.to_string_lossy().starts_with("run_"))
        })
        .collect();
    files.sort();
    if files.is_empty() {
        return Err(CliError::Output(format!("no run_*.csv traces in {}", search.display())));
    }
    Ok(files)
}

/// Recomputes the aggregate from trace files written by [`run_experiment`].
pub fn aggregate_traces(files: &[PathBuf]) -> Result<Vec<AggregateRow>, CliError> {
    let mut runs = Vec::with_capacity(files.len());
    for path in files {
        let mut reader = csv::Reader::from_path(path).map_err(csv_err(path))?;
        let headers = reader.headers().map_err(csv_err(path))?.clone();
        let column = |name: &str| {
            headers
                .iter()
                .position(|h| h == name)
                .ok_or_else(|| CliError::Output(format!("{}: missing column {name}", path.display())))
        };
        let (episode, cum, excess, err) = (
            column("episode")?,
            column("cum_regret")?,
            column("excess_cost")?,
            column("phi_err_sq")?,
        );
        let mut summaries = Vec::new();
        for record in reader.records() {
            let record = record.map_err(csv_err(path))?;
            let num = |i: usize| -> Result<f64, CliError> {
                record[i]
                    .parse()
                    .map_err(|_| CliError::Output(format!("{}: bad number {:?}", path.display(), &record[i])))
            };
            summaries.push(online_ce::algorithms::EpisodeSummary {
                episode: record[episode]
                    .parse()
                    .map_err(|_| CliError::Output(format!("{}: bad episode {:?}", path.display(), &record[episode])))?,
                cum_regret: num(cum)?,
                excess_cost: num(excess)?,
                phi_err_sq: num(err)?,
            });
        }
        runs.push(summaries);
    }
    Ok(aggregate(&runs))
}
