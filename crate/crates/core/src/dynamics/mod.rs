//! Parametric systems `x' = f(x, u, φ) + w` and the two benchmarks.

mod cartpole;
mod linear;
mod params;
mod toy;

use thiserror::Error;

pub use cartpole::{CartpoleSystem, StepLinearization, GRAVITY};
pub use linear::ScalarLinearSystem;
pub(crate) use params::l2_norm;
pub use params::DynParams;
pub use toy::{toy_drift, ToySystem, SINGULARITY_RADIUS};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DynamicsError {
    #[error("{what} has dimension {got}, expected {expected}")]
    Dimension {
        what: &'static str,
        got: usize,
        expected: usize,
    },
    #[error("parameter {name} = {value} must be positive")]
    ParameterDomain { name: &'static str, value: f64 },
    #[error("parameter norm {norm} exceeds bound {bound}")]
    OutOfBound { norm: f64, bound: f64 },
    #[error("norm bound must be positive and finite, got {0}")]
    InvalidBound(f64),
    #[error("parameter vector has non-finite entries")]
    NonFiniteParams,
    #[error("unknown system id {0:?} (expected \"toy\" or \"cartpole\")")]
    UnknownSystem(String),
}

/// The contract every simulated plant satisfies.
///
/// Jacobians are written row-major, `state_dim × param_dim`.
pub trait System: Send + Sync {
    fn id(&self) -> &'static str;
    fn state_dim(&self) -> usize;
    fn input_dim(&self) -> usize;
    fn param_dim(&self) -> usize;
    fn initial_state(&self) -> &[f64];
    /// Per-coordinate standard deviation of the additive Gaussian noise.
    fn noise_std(&self) -> &[f64];

    fn mean_step(&self, x: &[f64], u: &[f64], phi: &[f64], out: &mut [f64]) -> Result<(), DynamicsError>;

    fn jac_phi(&self, x: &[f64], u: &[f64], phi: &[f64], out: &mut [f64]) -> Result<(), DynamicsError>;

    /// Moves `phi` into the physically admissible region. Returns whether it
    /// changed anything.
    fn clamp_params(&self, _phi: &mut [f64]) -> bool {
        false
    }

    fn check_dims(&self, x: &[f64], u: &[f64], phi: &[f64]) -> Result<(), DynamicsError> {
        expect_dim("state", x.len(), self.state_dim())?;
        expect_dim("input", u.len(), self.input_dim())?;
        expect_dim("parameter", phi.len(), self.param_dim())
    }
}

/// Plants whose mean step can be differentiated in state and input, as
/// needed for pathwise policy gradients.
pub trait Linearize: System {
    /// Writes `∂f/∂x` (row-major `d_x × d_x`) and `∂f/∂u` (row-major `d_x × d_u`).
    fn linearize_into(
        &self,
        x: &[f64],
        u: &[f64],
        phi: &[f64],
        wrt_state: &mut [f64],
        wrt_input: &mut [f64],
    ) -> Result<(), DynamicsError>;
}

pub(crate) fn expect_dim(what: &'static str, got: usize, expected: usize) -> Result<(), DynamicsError> {
    if got == expected {
        Ok(())
    } else {
        Err(DynamicsError::Dimension { what, got, expected })
    }
}

/// The registered benchmark systems, selectable by id.
#[derive(Debug, Clone)]
pub enum SystemKind {
    Toy(ToySystem),
    Cartpole(CartpoleSystem),
}

impl SystemKind {
    pub fn from_id(id: &str) -> Result<Self, DynamicsError> {
        match id {
            "toy" => Ok(Self::Toy(ToySystem::default())),
            "cartpole" => Ok(Self::Cartpole(CartpoleSystem::default())),
            other => Err(DynamicsError::UnknownSystem(other.to_owned())),
        }
    }

    pub fn ids() -> &'static [&'static str] {
        &["toy", "cartpole"]
    }

    /// Scales the process noise, e.g. to zero for noiseless checks.
    #[must_use]
    pub fn with_noise_scale(self, scale: f64) -> Self {
        match self {
            Self::Toy(s) => Self::Toy(s.with_noise_scale(scale)),
            Self::Cartpole(s) => Self::Cartpole(s.with_noise_scale(scale)),
        }
    }

    fn inner(&self) -> &dyn System {
        match self {
            Self::Toy(s) => s,
            Self::Cartpole(s) => s,
        }
    }
}

impl System for SystemKind {
    fn id(&self) -> &'static str {
        self.inner().id()
    }
    fn state_dim(&self) -> usize {
        self.inner().state_dim()
    }
    fn input_dim(&self) -> usize {
        self.inner().input_dim()
    }
    fn param_dim(&self) -> usize {
        self.inner().param_dim()
    }
    fn initial_state(&self) -> &[f64] {
        self.inner().initial_state()
    }
    fn noise_std(&self) -> &[f64] {
        self.inner().noise_std()
    }
    #[inline]
    fn mean_step(&self, x: &[f64], u: &[f64], phi: &[f64], out: &mut [f64]) -> Result<(), DynamicsError> {
        match self {
            Self::Toy(s) => s.mean_step(x, u, phi, out),
            Self::Cartpole(s) => s.mean_step(x, u, phi, out),
        }
    }
    fn jac_phi(&self, x: &[f64], u: &[f64], phi: &[f64], out: &mut [f64]) -> Result<(), DynamicsError> {
        match self {
            Self::Toy(s) => s.jac_phi(x, u, phi, out),
            Self::Cartpole(s) => s.jac_phi(x, u, phi, out),
        }
    }
    fn clamp_params(&self, phi: &mut [f64]) -> bool {
        self.inner().clamp_params(phi)
    }
}

impl Linearize for SystemKind {
    fn linearize_into(
        &self,
        x: &[f64],
        u: &[f64],
        phi: &[f64],
        wrt_state: &mut [f64],
        wrt_input: &mut [f64],
    ) -> Result<(), DynamicsError> {
        match self {
            Self::Toy(s) => s.linearize_into(x, u, phi, wrt_state, wrt_input),
            Self::Cartpole(s) => s.linearize_into(x, u, phi, wrt_state, wrt_input),
        }
    }
}

/// Central finite-difference Jacobian of `mean_step` in φ, with per-coordinate
/// step `rel_step · max(1, |φ_j|)`.
pub fn finite_difference_jac_phi<S: System + ?Sized>(
    system: &S,
    x: &[f64],
    u: &[f64],
    phi: &[f64],
    rel_step: f64,
    out: &mut [f64],
) -> Result<(), DynamicsError> {
    let dx = system.state_dim();
    let dp = system.param_dim();
    expect_dim("jacobian", out.len(), dx * dp)?;
    let mut probe = phi.to_vec();
    let mut plus = vec![0.0; dx];
    let mut minus = vec![0.0; dx];
    for j in 0..dp {
        let h = rel_step * phi[j].abs().max(1.0);
        probe[j] = phi[j] + h;
        system.mean_step(x, u, &probe, &mut plus)?;
        probe[j] = phi[j] - h;
        system.mean_step(x, u, &probe, &mut minus)?;
        probe[j] = phi[j];
        for i in 0..dx {
            out[i * dp + j] = (plus[i] - minus[i]) / (2.0 * h);
        }
    }
    Ok(())
}
