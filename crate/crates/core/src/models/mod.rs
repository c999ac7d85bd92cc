//! θ-parameterized state-space models, the concrete benchmark systems, and
//! twin-experiment data generation.

mod affine;
mod convdiff;
mod lorenz;
mod overrides;
mod stream;

use nalgebra::{DMatrix, DVector};

pub use affine::{pendulum_model, AffineLinearModel, PendulumVariant, PENDULUM_TRUE_A};
pub use convdiff::{convection_diffusion_model, ConvectionDiffusion, DiffScheme};
pub use lorenz::{lorenz96_drift, lorenz96_model, Integrator, Lorenz96};
pub use overrides::CovOverride;
pub use stream::{generate_twin_data, ObsRecord, ObservationSource, ObservationStream, StreamHeader, TruthSpec};

use crate::error::Result;
use crate::prob::linalg::cholesky_jittered;
use crate::prob::Gaussian;

/// Discrete-time system `x_k = Φ(x_{k−1}; θ) + w`, `y_k = h(x_k; θ) + v`
/// with `w ~ N(0, Σ(θ))`, `v ~ N(0, Γ(θ))`.
pub trait StateSpaceModel: Send + Sync {
    fn id(&self) -> String;
    fn state_dim(&self) -> usize;
    fn obs_dim(&self) -> usize;
    fn param_dim(&self) -> usize;

    fn transition(&self, x: &DVector<f64>, theta: &DVector<f64>) -> DVector<f64>;
    fn observe(&self, x: &DVector<f64>, theta: &DVector<f64>) -> DVector<f64>;
    fn process_cov(&self, theta: &DVector<f64>) -> DMatrix<f64>;
    fn obs_cov(&self, theta: &DVector<f64>) -> DMatrix<f64>;

    /// `A(θ)` when the dynamics are declared linear in the state.
    fn dynamics_matrix(&self, _theta: &DVector<f64>) -> Option<DMatrix<f64>> {
        None
    }

    /// `H(θ)` when the observation is declared linear in the state.
    fn observation_matrix(&self, _theta: &DVector<f64>) -> Option<DMatrix<f64>> {
        None
    }

    fn is_linear_dynamics(&self) -> bool {
        false
    }

    fn is_linear_observation(&self) -> bool {
        false
    }

    fn is_linear(&self) -> bool {
        self.is_linear_dynamics() && self.is_linear_observation()
    }
}

/// Factor for sampling additive noise. An all-zero covariance yields a zero
/// factor (deterministic noise) rather than a jittered one.
pub fn noise_factor(cov: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    if cov.iter().all(|v| *v == 0.0) {
        return Ok(DMatrix::zeros(cov.nrows(), cov.ncols()));
    }
    Ok(cholesky_jittered(cov, "noise covariance")?.lower)
}

/// Joint prior `p_0(X_0, θ) = p(θ)·p(X_0)`.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct Prior {
    pub theta: Gaussian,
    pub state: Gaussian,
}

/// Checks `Φ(x, θ) = A(θ)x` and `h(x, θ) = H(θ)x` at random points.
#[cfg(test)]
pub(crate) fn spot_check_linear(model: &dyn StateSpaceModel, trials: usize, seed: u64) -> f64 {
    use crate::prob::SeededRng;
    let mut rng = SeededRng::new(seed, 0);
    let mut worst: f64 = 0.0;
    for _ in 0..trials {
        let x = DVector::from_fn(model.state_dim(), |_, _| 3.0 * rng.standard_normal());
        let th = DVector::from_fn(model.param_dim(), |_, _| rng.standard_normal());
        if let Some(a) = model.dynamics_matrix(&th) {
            worst = worst.max((model.transition(&x, &th) - a * &x).amax());
        }
        if let Some(h) = model.observation_matrix(&th) {
            worst = worst.max((model.observe(&x, &th) - h * &x).amax());
        }
    }
    worst
}
