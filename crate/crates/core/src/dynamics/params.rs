use std::ops::Deref;

use serde::{Deserialize, Serialize};

use super::DynamicsError;

/// A dynamics parameter vector together with the norm bound it lives in.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DynParams {
    values: Vec<f64>,
    bound: f64,
}

impl DynParams {
    /// Checks `‖values‖₂ ≤ bound`.
    pub fn new(values: Vec<f64>, bound: f64) -> Result<Self, DynamicsError> {
        if !(bound > 0.0) || !bound.is_finite() {
            return Err(DynamicsError::InvalidBound(bound));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(DynamicsError::NonFiniteParams);
        }
        let norm = l2_norm(&values);
        if norm > bound * (1.0 + 1e-12) {
            return Err(DynamicsError::OutOfBound { norm, bound });
        }
        Ok(Self { values, bound })
    }

    /// For points produced by projections whose target set may poke outside
    /// the original bound; the stored bound grows to cover the point.
    pub(crate) fn enclosing(values: Vec<f64>, bound: f64) -> Self {
        let norm = l2_norm(&values);
        Self {
            bound: bound.max(norm),
            values,
        }
    }

    pub fn bound(&self) -> f64 {
        self.bound
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.values
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.values
    }

    pub fn norm(&self) -> f64 {
        l2_norm(&self.values)
    }

    pub fn dist_sq(&self, other: &[f64]) -> f64 {
        self.values.iter().zip(other).map(|(a, b)| (a - b) * (a - b)).sum()
    }
}

impl Deref for DynParams {
    type Target = [f64];

    fn deref(&self) -> &[f64] {
        &self.values
    }
}

pub(crate) fn l2_norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_points_outside_bound() {
        assert!(DynParams::new(vec![3.0, 4.0], 5.0).is_ok());
        assert!(matches!(
            DynParams::new(vec![3.0, 4.1], 5.0),
            Err(DynamicsError::OutOfBound { .. })
        ));
        assert!(DynParams::new(vec![0.0], 0.0).is_err());
        assert!(DynParams::new(vec![f64::NAN], 1.0).is_err());
    }

    #[test]
    fn enclosing_grows_bound() {
        let p = DynParams::enclosing(vec![3.0, 4.0], 1.0);
        assert_eq!(p.bound(), 5.0);
        assert_eq!(p.dist_sq(&[0.0, 0.0]), 25.0);
    }
}
