//! Single-step filters conditioned on a fixed θ: exact Kalman, unscented
//! moment matching, and the every-step-resampling ensemble Kalman step.

mod enkf;
mod kalman;
mod sigma;
mod unscented;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

pub use enkf::{enkf_step_resampled, ensemble_moments, perturbed_obs_update, EnkfOutput};
pub use kalman::{kalman_moments, kalman_predict, kalman_step};
pub use sigma::{SigmaPointSet, UtParams};
pub use unscented::{unscented_moments, unscented_predict, unscented_step};

use crate::error::{check_dim, AssimError, Result};
use crate::prob::linalg::{cholesky_jittered, solve_lower, solve_lower_mat, symmetrize};
use crate::prob::Gaussian;

/// Predictive and innovation moments of one Gaussian-filter step.
#[derive(Debug, Clone)]
pub struct FilterMoments {
    /// `m⁻`
    pub pred_mean: DVector<f64>,
    /// `C⁻`, including Σ.
    pub pred_cov: DMatrix<f64>,
    /// `μ`
    pub obs_mean: DVector<f64>,
    /// `S`, including Γ.
    pub obs_cov: DMatrix<f64>,
    /// `U = Cov(X⁻, Y)`
    pub cross_cov: DMatrix<f64>,
}

impl FilterMoments {
    /// Gaussian-filter update `m = m⁻ + U S⁻¹(y − μ)`, `C = C⁻ − U S⁻¹ Uᵀ`.
    pub fn update(&self, y: &DVector<f64>) -> Result<Gaussian> {
        check_dim("filter update observation", self.obs_mean.len(), y.len())?;
        let ls = cholesky_jittered(&self.obs_cov, "innovation covariance")?.lower;
        // W = L_S⁻¹ Uᵀ so that U S⁻¹ Uᵀ = Wᵀ W.
        let w = solve_lower_mat(&ls, &self.cross_cov.transpose());
        let v = solve_lower(&ls, &(y - &self.obs_mean));
        let mean = &self.pred_mean + w.transpose() * v;
        let mut cov = &self.pred_cov - w.transpose() * &w;
        symmetrize(&mut cov);
        Gaussian::from_cov(mean, &cov)
    }

    pub(crate) fn ensure_finite(&self, theta: &DVector<f64>, context: &str) -> Result<()> {
        let all = self
            .pred_mean
            .iter()
            .chain(self.pred_cov.iter())
            .chain(self.obs_mean.iter())
            .chain(self.obs_cov.iter())
            .chain(self.cross_cov.iter());
        for v in all {
            if !v.is_finite() {
                return Err(AssimError::Divergence {
                    context: context.to_string(),
                    theta: theta.iter().cloned().collect(),
                });
            }
        }
        Ok(())
    }
}

/// Which conditional filter produces the Stage-2 targets.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "kind")]
pub enum FilterBackend {
    Kalman,
    Unscented,
    Enkf { members: usize },
}

#[cfg(test)]
pub(crate) mod test_support {
    use nalgebra::{DMatrix, DVector};

    use crate::models::{pendulum_model, AffineLinearModel, PendulumVariant};
    use crate::prob::Gaussian;

    pub fn pendulum() -> AffineLinearModel {
        pendulum_model(PendulumVariant::DynamicsOnly)
    }

    pub fn truth_theta() -> DVector<f64> {
        DVector::from_vec(vec![0.9594, -0.8056])
    }

    pub fn state_prior() -> Gaussian {
        Gaussian::isotropic(DVector::from_vec(vec![3.0, 4.5]), 4.0).unwrap()
    }

    /// Kalman update written with explicit inverses, independent of the
    /// factor-based implementation.
    pub fn dense_kalman(
        a: &DMatrix<f64>,
        h: &DMatrix<f64>,
        sigma: &DMatrix<f64>,
        gamma: &DMatrix<f64>,
        m: &DVector<f64>,
        c: &DMatrix<f64>,
        y: &DVector<f64>,
    ) -> (DVector<f64>, DMatrix<f64>) {
        let mp = a * m;
        let cp = a * c * a.transpose() + sigma;
        let s = h * &cp * h.transpose() + gamma;
        let k = &cp * h.transpose() * s.try_inverse().unwrap();
        let mean = &mp + &k * (y - h * &mp);
        let n = m.len();
        let cov = (DMatrix::identity(n, n) - &k * h) * cp;
        (mean, cov)
    }
}
