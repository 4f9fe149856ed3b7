use super::{expect_dim, DynamicsError, Linearize, System};

/// Inside this distance of φ the radial drift is taken to be zero; the
/// direction `(x − φ)/‖x − φ‖` is undefined there.
pub const SINGULARITY_RADIUS: f64 = 1e-9;

/// Two-dimensional radial-drift plant
/// `x' = x + g·exp(−‖x−φ‖²)·(x−φ)/‖x−φ‖ + u + w`.
#[derive(Debug, Clone, PartialEq)]
pub struct ToySystem {
    gain: f64,
    noise_std: [f64; 2],
    x1: [f64; 2],
}

impl ToySystem {
    pub const GAIN: f64 = 5.0;
    pub const PHI_STAR: [f64; 2] = [0.25, 0.25];

    pub fn new(gain: f64, sigma: f64) -> Self {
        Self {
            gain,
            noise_std: [sigma; 2],
            x1: [0.0; 2],
        }
    }

    #[must_use]
    pub fn with_noise_scale(mut self, scale: f64) -> Self {
        self.noise_std = self.noise_std.map(|s| s * scale);
        self
    }

    pub fn gain(&self) -> f64 {
        self.gain
    }
}

impl Default for ToySystem {
    fn default() -> Self {
        Self::new(Self::GAIN, 1.0)
    }
}

/// The radial drift term; shared with the feedback-linearizing policy.
#[inline]
pub fn toy_drift(gain: f64, x: &[f64], phi: &[f64]) -> [f64; 2] {
    let d0 = x[0] - phi[0];
    let d1 = x[1] - phi[1];
    let r2 = d0 * d0 + d1 * d1;
    let r = r2.sqrt();
    if r < SINGULARITY_RADIUS {
        return [0.0, 0.0];
    }
    let scale = gain * (-r2).exp() / r;
    [scale * d0, scale * d1]
}

impl System for ToySystem {
    fn id(&self) -> &'static str {
        "toy"
    }
    fn state_dim(&self) -> usize {
        2
    }
    fn input_dim(&self) -> usize {
        2
    }
    fn param_dim(&self) -> usize {
        2
    }
    fn initial_state(&self) -> &[f64] {
        &self.x1
    }
    fn noise_std(&self) -> &[f64] {
        &self.noise_std
    }

    #[inline]
    fn mean_step(&self, x: &[f64], u: &[f64], phi: &[f64], out: &mut [f64]) -> Result<(), DynamicsError> {
        self.check_dims(x, u, phi)?;
        expect_dim("output", out.len(), 2)?;
        let g = toy_drift(self.gain, x, phi);
        out[0] = x[0] + g[0] + u[0];
        out[1] = x[1] + g[1] + u[1];
        Ok(())
    }

    /// `D_φ f = −G(r)·[(I − nnᵀ)/r − 2r·nnᵀ]` with `G(r) = g·exp(−r²)` and
    /// `n = (x − φ)/r`; zero inside the singularity radius.
    fn jac_phi(&self, x: &[f64], u: &[f64], phi: &[f64], out: &mut [f64]) -> Result<(), DynamicsError> {
        self.check_dims(x, u, phi)?;
        expect_dim("jacobian", out.len(), 4)?;
        let d = [x[0] - phi[0], x[1] - phi[1]];
        let r2 = d[0] * d[0] + d[1] * d[1];
        let r = r2.sqrt();
        if r < SINGULARITY_RADIUS {
            out.fill(0.0);
            return Ok(());
        }
        let big_g = self.gain * (-r2).exp();
        let n = [d[0] / r, d[1] / r];
        for i in 0..2 {
            for j in 0..2 {
                let nn = n[i] * n[j];
                let eye = if i == j { 1.0 } else { 0.0 };
                out[i * 2 + j] = -big_g * ((eye - nn) / r - 2.0 * r * nn);
            }
        }
        Ok(())
    }
}

impl Linearize for ToySystem {
    /// The drift depends on `x − φ` only, so `∂f/∂x = I − D_φ f`.
    fn linearize_into(
        &self,
        x: &[f64],
        u: &[f64],
        phi: &[f64],
        wrt_state: &mut [f64],
        wrt_input: &mut [f64],
    ) -> Result<(), DynamicsError> {
        expect_dim("state jacobian", wrt_state.len(), 4)?;
        expect_dim("input jacobian", wrt_input.len(), 4)?;
        self.jac_phi(x, u, phi, wrt_state)?;
        for (k, v) in wrt_state.iter_mut().enumerate() {
            *v = if k % 3 == 0 { 1.0 - *v } else { -*v };
        }
        wrt_input.copy_from_slice(&[1.0, 0.0, 0.0, 1.0]);
        Ok(())
    }
}
