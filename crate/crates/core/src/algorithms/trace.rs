use std::collections::BTreeMap;
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::simulate::{format_float, McEstimate};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Phase {
    Explore,
    Refine,
    Commit,
}

impl Phase {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::Explore => "explore",
            Self::Refine => "refine",
            Self::Commit => "commit",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeRecord {
    /// One-based.
    pub episode: usize,
    pub phase: Phase,
    pub policy: String,
    /// Cost of the realized episode.
    pub cost_realized: f64,
    /// Present on evaluated episodes only.
    pub evaluation: Option<McEstimate>,
    /// Evaluated cost minus `J*`, carried forward between evaluations.
    pub excess_cost: f64,
    /// Estimate the played controller was synthesized from.
    pub phi: Option<Vec<f64>>,
    /// NaN when no estimate exists yet.
    pub phi_err_sq: f64,
    pub cum_regret: f64,
    /// The gradient step after this episode was skipped.
    pub held_estimate: bool,
    pub training_diverged: bool,
}

impl EpisodeRecord {
    pub fn summary(&self) -> EpisodeSummary {
        EpisodeSummary {
            episode: self.episode,
            cum_regret: self.cum_regret,
            excess_cost: self.excess_cost,
            phi_err_sq: self.phi_err_sq,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegretTrace {
    pub run: usize,
    pub j_star: McEstimate,
    pub records: Vec<EpisodeRecord>,
    /// Least-squares estimate after exploration.
    pub phi0: Option<Vec<f64>>,
    pub final_phi: Option<Vec<f64>>,
    /// Resolved strong-convexity constant, when the schedule uses one.
    pub mu: Option<f64>,
    pub held_steps: usize,
    pub diverged_trainings: usize,
}

impl RegretTrace {
    pub fn new(run: usize, j_star: McEstimate) -> Self {
        Self {
            run,
            j_star,
            records: Vec::new(),
            phi0: None,
            final_phi: None,
            mu: None,
            held_steps: 0,
            diverged_trainings: 0,
        }
    }

    pub fn cumulative_regret(&self) -> f64 {
        self.records.last().map_or(0.0, |r| r.cum_regret)
    }

    pub fn summaries(&self) -> Vec<EpisodeSummary> {
        self.records.iter().map(EpisodeRecord::summary).collect()
    }
}

/// The per-episode quantities that are averaged across runs.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpisodeSummary {
    pub episode: usize,
    pub cum_regret: f64,
    pub excess_cost: f64,
    pub phi_err_sq: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AggregateRow {
    pub episode: usize,
    /// Mean of `cum_regret / episode`.
    pub mean_avg_regret: f64,
    pub avg_regret_stderr: f64,
    pub mean_cum_regret: f64,
    pub cum_regret_stderr: f64,
    pub mean_excess_cost: f64,
    pub excess_cost_stderr: f64,
    /// Over runs that have an estimate at this episode.
    pub mean_phi_err_sq: f64,
    pub phi_err_sq_stderr: f64,
    pub runs: usize,
}

fn mean_stderr(values: &[f64]) -> (f64, f64) {
    let v: Vec<f64> = values.iter().copied().filter(|x| !x.is_nan()).collect();
    if v.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    if v.len() < 2 {
        return (mean, f64::NAN);
    }
    let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

/// Cross-run mean and standard error per episode. Episodes are matched by
/// number; each row averages the runs that reached it.
pub fn aggregate(runs: &[Vec<EpisodeSummary>]) -> Vec<AggregateRow> {
    let mut by_episode: BTreeMap<usize, Vec<EpisodeSummary>> = BTreeMap::new();
    for run in runs {
        for s in run {
            by_episode.entry(s.episode).or_default().push(*s);
        }
    }
    by_episode
        .into_iter()
        .map(|(episode, rows)| {
            let col = |f: fn(&EpisodeSummary) -> f64| rows.iter().map(f).collect::<Vec<f64>>();
            let avg: Vec<f64> = rows.iter().map(|r| r.cum_regret / episode as f64).collect();
            let (mean_avg_regret, avg_regret_stderr) = mean_stderr(&avg);
            let (mean_cum_regret, cum_regret_stderr) = mean_stderr(&col(|r| r.cum_regret));
            let (mean_excess_cost, excess_cost_stderr) = mean_stderr(&col(|r| r.excess_cost));
            let (mean_phi_err_sq, phi_err_sq_stderr) = mean_stderr(&col(|r| r.phi_err_sq));
            AggregateRow {
                episode,
                mean_avg_regret,
                avg_regret_stderr,
                mean_cum_regret,
                cum_regret_stderr,
                mean_excess_cost,
                excess_cost_stderr,
                mean_phi_err_sq,
                phi_err_sq_stderr,
                runs: rows.len(),
            }
        })
        .collect()
}

/// One row per episode. Unavailable values are written as `NaN`.
pub fn write_trace_csv<W: Write>(writer: W, trace: &RegretTrace, param_dim: usize) -> csv::Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    let mut header: Vec<String> = [
        "run",
        "episode",
        "phase",
        "cost_realized",
        "cost_mc_mean",
        "cost_mc_stderr",
    ]
    .iter()
    .map(|s| s.to_string())
    .collect();
    header.extend((0..param_dim).map(|i| format!("phi_{i}")));
    header.extend(
        ["phi_err_sq", "cum_regret", "excess_cost", "evaluated"]
            .iter()
            .map(|s| s.to_string()),
    );
    w.write_record(&header)?;
    for r in &trace.records {
        let mut row = vec![
            trace.run.to_string(),
            r.episode.to_string(),
            r.phase.as_str().to_string(),
            format_float(r.cost_realized),
            format_float(r.evaluation.map_or(f64::NAN, |e| e.mean)),
            format_float(r.evaluation.map_or(f64::NAN, |e| e.stderr)),
        ];
        match &r.phi {
            Some(phi) => row.extend(phi.iter().map(|&v| format_float(v))),
            None => row.extend((0..param_dim).map(|_| format_float(f64::NAN))),
        }
        row.push(format_float(r.phi_err_sq));
        row.push(format_float(r.cum_regret));
        row.push(format_float(r.excess_cost));
        row.push(u8::from(r.evaluation.is_some()).to_string());
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_aggregate_csv<W: Write>(writer: W, rows: &[AggregateRow]) -> csv::Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record([
        "episode",
        "mean_avg_regret",
        "avg_regret_stderr",
        "mean_cum_regret",
        "cum_regret_stderr",
        "mean_excess_cost",
        "excess_cost_stderr",
        "mean_phi_err_sq",
        "phi_err_sq_stderr",
        "runs",
    ])?;
    for r in rows {
        let mut row = vec![r.episode.to_string()];
        row.extend(
            [
                r.mean_avg_regret,
                r.avg_regret_stderr,
                r.mean_cum_regret,
                r.cum_regret_stderr,
                r.mean_excess_cost,
                r.excess_cost_stderr,
                r.mean_phi_err_sq,
                r.phi_err_sq_stderr,
            ]
            .into_iter()
            .map(format_float),
        );
        row.push(r.runs.to_string());
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn summary(episode: usize, cum_regret: f64) -> EpisodeSummary {
        EpisodeSummary {
            episode,
            cum_regret,
            excess_cost: cum_regret,
            phi_err_sq: f64::NAN,
        }
    }

    #[test]
    fn aggregate_by_hand() {
        let runs = vec![
            vec![summary(1, 1.0), summary(2, 4.0)],
            vec![summary(1, 3.0), summary(2, 8.0)],
        ];
        let rows = aggregate(&runs);
        assert_eq!(rows.len(), 2);
        assert_eq!(rows[0].mean_cum_regret, 2.0);
        // sample sd of {1, 3} is √2, so stderr is 1
        assert!((rows[0].cum_regret_stderr - 1.0).abs() < 1e-15);
        assert_eq!(rows[1].mean_avg_regret, 3.0);
        assert!(rows[1].mean_phi_err_sq.is_nan());
        assert_eq!(rows[1].runs, 2);
    }

    #[test]
    fn single_run_has_nan_stderr() {
        let rows = aggregate(&[vec![summary(1, 5.0)]]);
        assert_eq!(rows[0].mean_cum_regret, 5.0);
        assert!(rows[0].cum_regret_stderr.is_nan());
    }

    #[test]
    fn trace_csv_layout() {
        let est = McEstimate {
            mean: 20.0,
            stderr: 0.5,
            n_used: 10,
            n_excluded: 0,
        };
        let mut t = RegretTrace::new(3, est);
        t.records.push(EpisodeRecord {
            episode: 1,
            phase: Phase::Explore,
            policy: "toy-ce".into(),
            cost_realized: 25.0,
            evaluation: Some(est),
            excess_cost: 2.0,
            phi: None,
            phi_err_sq: f64::NAN,
            cum_regret: 2.0,
            held_estimate: false,
            training_diverged: false,
        });
        let mut buf = Vec::new();
        write_trace_csv(&mut buf, &t, 2).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let mut lines = text.lines();
        assert_eq!(
            lines.next().unwrap(),
            "run,episode,phase,cost_realized,cost_mc_mean,cost_mc_stderr,phi_0,phi_1,phi_err_sq,cum_regret,excess_cost,evaluated"
        );
        let row: Vec<&str> = lines.next().unwrap().split(',').collect();
        assert_eq!(row[..3], ["3", "1", "explore"]);
        assert_eq!(row[6], "NaN");
        assert_eq!(row[11], "1");
    }
}
