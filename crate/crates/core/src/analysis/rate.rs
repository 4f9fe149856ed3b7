use serde::{Deserialize, Serialize};

use super::AnalysisError;

pub const MIN_POINTS: usize = 10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RateModel {
    /// `value ≈ slope·ln i + intercept`
    LogLinear,
    /// `ln value ≈ slope·ln i + intercept`
    PowerLaw,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RateFit {
    pub model: RateModel,
    pub slope: f64,
    pub intercept: f64,
    /// Zero when the response has no variance.
    pub r_squared: f64,
    pub points_used: usize,
    /// Points dropped because the power-law model needs positive values.
    pub points_excluded: usize,
}

/// Ordinary least squares of the value (or its log) on `ln i`.
pub fn fit_rate(series: &[(f64, f64)], model: RateModel) -> Result<RateFit, AnalysisError> {
    if let Some(&(i, _)) = series.iter().find(|(i, _)| !(*i > 0.0)) {
        return Err(AnalysisError::NonPositiveAbscissa(i));
    }
    let points: Vec<(f64, f64)> = series
        .iter()
        .filter(|(_, v)| v.is_finite() && (model == RateModel::LogLinear || *v > 0.0))
        .map(|&(i, v)| match model {
            RateModel::LogLinear => (i.ln(), v),
            RateModel::PowerLaw => (i.ln(), v.ln()),
        })
        .collect();
    if points.len() < MIN_POINTS {
        return Err(AnalysisError::TooFewSamples(points.len()));
    }
    let n = points.len() as f64;
    // Centre on the first point so that a constant response has exactly zero spread.
    let (x0, y0) = points[0];
    let mx = points.iter().map(|p| p.0 - x0).sum::<f64>() / n;
    let my = points.iter().map(|p| p.1 - y0).sum::<f64>() / n;
    let (mut sxx, mut sxy, mut syy) = (0.0, 0.0, 0.0);
    for &(x, y) in &points {
        let dx = x - x0 - mx;
        let dy = y - y0 - my;
        sxx += dx * dx;
        sxy += dx * dy;
        syy += dy * dy;
    }
    if sxx == 0.0 {
        return Err(AnalysisError::DegenerateAbscissa);
    }
    let slope = sxy / sxx;
    let intercept = (y0 + my) - slope * (x0 + mx);
    let r_squared = if syy == 0.0 { 0.0 } else { (sxy * sxy) / (sxx * syy) };
    Ok(RateFit {
        model,
        slope,
        intercept,
        r_squared,
        points_used: points.len(),
        points_excluded: series.len() - points.len(),
    })
}
