use super::{expect_dim, DynamicsError, Linearize, System};

/// Scalar reference plant `x' = φ·x + u + w`, used where a closed-form
/// answer is needed to check an estimator.
#[derive(Debug, Clone, PartialEq)]
pub struct ScalarLinearSystem {
    noise_std: [f64; 1],
    x1: [f64; 1],
}

impl ScalarLinearSystem {
    pub fn new(x1: f64, sigma: f64) -> Self {
        Self {
            noise_std: [sigma],
            x1: [x1],
        }
    }
}

impl System for ScalarLinearSystem {
    fn id(&self) -> &'static str {
        "scalar-linear"
    }
    fn state_dim(&self) -> usize {
        1
    }
    fn input_dim(&self) -> usize {
        1
    }
    fn param_dim(&self) -> usize {
        1
    }
    fn initial_state(&self) -> &[f64] {
        &self.x1
    }
    fn noise_std(&self) -> &[f64] {
        &self.noise_std
    }
    fn mean_step(&self, x: &[f64], u: &[f64], phi: &[f64], out: &mut [f64]) -> Result<(), DynamicsError> {
        self.check_dims(x, u, phi)?;
        expect_dim("output", out.len(), 1)?;
        out[0] = phi[0] * x[0] + u[0];
        Ok(())
    }
    fn jac_phi(&self, x: &[f64], u: &[f64], phi: &[f64], out: &mut [f64]) -> Result<(), DynamicsError> {
        self.check_dims(x, u, phi)?;
        expect_dim("jacobian", out.len(), 1)?;
        out[0] = x[0];
        Ok(())
    }
}

impl Linearize for ScalarLinearSystem {
    fn linearize_into(
        &self,
        x: &[f64],
        u: &[f64],
        phi: &[f64],
        wrt_state: &mut [f64],
        wrt_input: &mut [f64],
    ) -> Result<(), DynamicsError> {
        self.check_dims(x, u, phi)?;
        wrt_state[0] = phi[0];
        wrt_input[0] = 1.0;
        Ok(())
    }
}
