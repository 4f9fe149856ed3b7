//! Euler-discretized cart-pole with viscous friction on cart and pole.
//!
//! State `[p, ṗ, θ, θ̇]` with θ measured from upright; parameters
//! `[M, m, l, b_p, b_θ]`. The continuous dynamics are
//!
//! ```text
//! (M + m)·a + m·l·cosθ·c = m·l·θ̇²·sinθ + u
//! m·cosθ·a   + m·l·c     = m·g·sinθ
//! ```
//!
//! with `a = p̈ + b_p·ṗ` and `c = θ̈ + b_θ·θ̇`.

use super::{expect_dim, finite_difference_jac_phi, DynamicsError, Linearize, System};

pub const GRAVITY: f64 = 9.81;

/// Minimum admissible value for M, m and l.
const MIN_POSITIVE: f64 = 1e-3;
const PARAM_NAMES: [&str; 5] = ["M", "m", "l", "b_p", "b_theta"];

#[derive(Debug, Clone, PartialEq)]
pub struct CartpoleSystem {
    dt: f64,
    gravity: f64,
    noise_std: [f64; 4],
    x1: [f64; 4],
}

/// First-order sensitivities of one Euler step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepLinearization {
    /// ∂x'/∂x, row-major 4×4.
    pub wrt_state: [f64; 16],
    /// ∂x'/∂u.
    pub wrt_input: [f64; 4],
}

impl Default for CartpoleSystem {
    fn default() -> Self {
        Self {
            dt: 0.2,
            gravity: GRAVITY,
            noise_std: [0.05f64.sqrt(); 4],
            x1: [0.0; 4],
        }
    }
}

impl CartpoleSystem {
    pub const PHI_STAR: [f64; 5] = [1.0, 0.1, 1.0, 1.0, 1.0];
    pub const NOISE_VARIANCE: f64 = 0.05;

    pub fn dt(&self) -> f64 {
        self.dt
    }

    #[must_use]
    pub fn with_noise_scale(mut self, scale: f64) -> Self {
        self.noise_std = self.noise_std.map(|s| s * scale);
        self
    }

    fn check_domain(phi: &[f64]) -> Result<(), DynamicsError> {
        for (j, name) in PARAM_NAMES.iter().enumerate().take(3) {
            if !(phi[j] > 0.0) {
                return Err(DynamicsError::ParameterDomain { name, value: phi[j] });
            }
        }
        Ok(())
    }

    /// Solves the 2×2 mass-matrix system for the friction-shifted
    /// accelerations `(a, c)`.
    pub fn solve_accelerations(&self, x: &[f64], u: f64, phi: &[f64]) -> Result<(f64, f64), DynamicsError> {
        expect_dim("state", x.len(), 4)?;
        expect_dim("parameter", phi.len(), 5)?;
        Self::check_domain(phi)?;
        let (big_m, m, l) = (phi[0], phi[1], phi[2]);
        let (s, c) = x[2].sin_cos();
        let omega = x[3];
        let denom = big_m + m * s * s;
        let a = (m * l * omega * omega * s + u - m * self.gravity * s * c) / denom;
        let cc = ((big_m + m) * self.gravity * s - c * (m * l * omega * omega * s + u)) / (l * denom);
        Ok((a, cc))
    }

    /// Analytic derivatives of the mean step in state and input.
    pub fn linearize(&self, x: &[f64], u: f64, phi: &[f64]) -> Result<StepLinearization, DynamicsError> {
        expect_dim("state", x.len(), 4)?;
        expect_dim("parameter", phi.len(), 5)?;
        Self::check_domain(phi)?;
        let (big_m, m, l, bp, bth) = (phi[0], phi[1], phi[2], phi[3], phi[4]);
        let g = self.gravity;
        let dt = self.dt;
        let (s, c) = x[2].sin_cos();
        let w = x[3];
        let d = big_m + m * s * s;
        let dd_dth = 2.0 * m * s * c;

        let na = m * l * w * w * s + u - m * g * s * c;
        let dna_dth = m * l * w * w * c - m * g * (c * c - s * s);
        let da_dth = (dna_dth * d - na * dd_dth) / (d * d);
        let da_dw = 2.0 * m * l * w * s / d;
        let da_du = 1.0 / d;

        let nc = (big_m + m) * g * s - m * l * w * w * s * c - u * c;
        let dnc_dth = (big_m + m) * g * c - m * l * w * w * (c * c - s * s) + u * s;
        let dc_dth = (dnc_dth * d - nc * dd_dth) / (l * d * d);
        let dc_dw = -2.0 * m * w * s * c / d;
        let dc_du = -c / (l * d);

        #[rustfmt::skip]
        let wrt_state = [
            1.0, dt,              0.0,            0.0,
            0.0, 1.0 - dt * bp,   dt * da_dth,    dt * da_dw,
            0.0, 0.0,             1.0,            dt,
            0.0, 0.0,             dt * dc_dth,    1.0 + dt * (dc_dw - bth),
        ];
        Ok(StepLinearization {
            wrt_state,
            wrt_input: [0.0, dt * da_du, 0.0, dt * dc_du],
        })
    }
}

impl System for CartpoleSystem {
    fn id(&self) -> &'static str {
        "cartpole"
    }
    fn state_dim(&self) -> usize {
        4
    }
    fn input_dim(&self) -> usize {
        1
    }
    fn param_dim(&self) -> usize {
        5
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
        expect_dim("output", out.len(), 4)?;
        let (a, c) = self.solve_accelerations(x, u[0], phi)?;
        let p_acc = a - phi[3] * x[1];
        let th_acc = c - phi[4] * x[3];
        out[0] = x[0] + self.dt * x[1];
        out[1] = x[1] + self.dt * p_acc;
        out[2] = x[2] + self.dt * x[3];
        out[3] = x[3] + self.dt * th_acc;
        Ok(())
    }

    fn jac_phi(&self, x: &[f64], u: &[f64], phi: &[f64], out: &mut [f64]) -> Result<(), DynamicsError> {
        self.check_dims(x, u, phi)?;
        Self::check_domain(phi)?;
        // Keep the stencil inside the positive domain.
        let rel = phi[..3].iter().fold(1e-6, |h: f64, &p| {
            if p - h * p.abs().max(1.0) <= 0.0 {
                h.min(0.5 * p)
            } else {
                h
            }
        });
        finite_difference_jac_phi(self, x, u, phi, rel, out)
    }

    fn clamp_params(&self, phi: &mut [f64]) -> bool {
        let mut changed = false;
        for v in phi.iter_mut().take(3) {
            if !(*v >= MIN_POSITIVE) {
                *v = MIN_POSITIVE;
                changed = true;
            }
        }
        changed
    }
}

impl Linearize for CartpoleSystem {
    fn linearize_into(
        &self,
        x: &[f64],
        u: &[f64],
        phi: &[f64],
        wrt_state: &mut [f64],
        wrt_input: &mut [f64],
    ) -> Result<(), DynamicsError> {
        self.check_dims(x, u, phi)?;
        expect_dim("state jacobian", wrt_state.len(), 16)?;
        expect_dim("input jacobian", wrt_input.len(), 4)?;
        let lin = self.linearize(x, u[0], phi)?;
        wrt_state.copy_from_slice(&lin.wrt_state);
        wrt_input.copy_from_slice(&lin.wrt_input);
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    const PHI: [f64; 5] = CartpoleSystem::PHI_STAR;

    fn step(x: [f64; 4], u: f64, phi: &[f64]) -> [f64; 4] {
        let mut out = [0.0; 4];
        CartpoleSystem::default().mean_step(&x, &[u], phi, &mut out).unwrap();
        out
    }

    #[test]
    fn upright_rest_is_a_fixed_point() {
        assert_eq!(step([0.0; 4], 0.0, &PHI), [0.0; 4]);
    }

    #[test]
    fn unit_push_from_rest() {
        // θ = 0: a = u/M = 1, c = −cos0·a/l = −1
        let out = step([0.0; 4], 1.0, &PHI);
        let expected = [0.0, 0.2, 0.0, -0.2];
        for (o, e) in out.iter().zip(expected) {
            assert!((o - e).abs() < 1e-15, "{out:?}");
        }
    }

    #[test]
    fn nonpositive_mass_is_rejected() {
        let mut out = [0.0; 4];
        let sys = CartpoleSystem::default();
        for j in 0..3 {
            let mut phi = PHI;
            phi[j] = 0.0;
            assert!(matches!(
                sys.mean_step(&[0.0; 4], &[0.0], &phi, &mut out),
                Err(DynamicsError::ParameterDomain { .. })
            ));
        }
        // Friction may be zero or negative.
        let mut phi = PHI;
        phi[3] = -0.5;
        assert!(sys.mean_step(&[0.0; 4], &[0.0], &phi, &mut out).is_ok());
    }

    #[test]
    fn clamp_enforces_positivity() {
        let sys = CartpoleSystem::default();
        let mut phi = [-1.0, 0.5, 0.0, -2.0, 1.0];
        assert!(sys.clamp_params(&mut phi));
        assert_eq!(phi, [1e-3, 0.5, 1e-3, -2.0, 1.0]);
        assert!(!sys.clamp_params(&mut phi));
    }

    proptest! {
        #[test]
        fn mass_matrix_solve_has_tiny_residual(
            th in -3.2f64..3.2, w in -5.0f64..5.0, u in -10.0f64..10.0,
            big_m in 0.1f64..5.0, m in 0.01f64..2.0, l in 0.1f64..3.0,
        ) {
            let sys = CartpoleSystem::default();
            let phi = [big_m, m, l, 1.0, 1.0];
            let (a, c) = sys.solve_accelerations(&[0.0, 0.0, th, w], u, &phi).unwrap();
            let (s, cs) = th.sin_cos();
            let r1 = (big_m + m) * a + m * l * cs * c - (m * l * w * w * s + u);
            let r2 = m * cs * a + m * l * c - m * GRAVITY * s;
            prop_assert!(r1.abs() <= 1e-12 * (1.0 + (m * l * w * w * s + u).abs()));
            prop_assert!(r2.abs() <= 1e-12 * (1.0 + (m * GRAVITY * s).abs()));
            // The determinant is positive for positive masses and length.
            prop_assert!(m * l * (big_m + m * s * s) > 0.0);
        }

        #[test]
        fn linearization_matches_finite_differences(
            p in -1.0f64..1.0, v in -2.0f64..2.0, th in -1.5f64..1.5, w in -3.0f64..3.0,
            u in -3.0f64..3.0,
        ) {
            let x = [p, v, th, w];
            let lin = CartpoleSystem::default().linearize(&x, u, &PHI).unwrap();
            let h = 1e-6;
            for k in 0..5 {
                let (mut xp, mut xm) = (x, x);
                let (mut up, mut um) = (u, u);
                if k < 4 { xp[k] += h; xm[k] -= h; } else { up += h; um -= h; }
                let fp = step(xp, up, &PHI);
                let fm = step(xm, um, &PHI);
                for i in 0..4 {
                    let fd = (fp[i] - fm[i]) / (2.0 * h);
                    let an = if k < 4 { lin.wrt_state[i * 4 + k] } else { lin.wrt_input[i] };
                    prop_assert!((fd - an).abs() <= 1e-6 * an.abs().max(1.0), "entry ({i},{k}): fd {fd} analytic {an}");
                }
            }
        }
    }
}
