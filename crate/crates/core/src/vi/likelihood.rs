//! The one-step data likelihood `I(θ) = p(y_k | θ, ρ_{k−1}(·|θ))`.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, AssimError, Result};
use crate::filters::{kalman_predict, unscented_predict, SigmaPointSet, UtParams};
use crate::models::{noise_factor, StateSpaceModel};
use crate::prob::gaussian::logpdf_factor;
use crate::prob::linalg::cholesky_jittered;
use crate::prob::{Gaussian, SeededRng};

/// How `I(θ)` is evaluated.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "kind")]
pub enum LikelihoodBackend {
    /// Exact for models linear in both dynamics and observation.
    LinearClosedForm,
    /// UT predictive moments, then a UT integral over the observation model.
    GaussianApproxUt,
    /// UT predictive moments, then the closed form for a linear observation.
    GaussianApproxLinearObs,
    MonteCarlo { draws: usize },
}

impl LikelihoodBackend {
    /// Most accurate backend the model's structure allows.
    pub fn auto(model: &dyn StateSpaceModel) -> Self {
        if model.is_linear() {
            Self::LinearClosedForm
        } else if model.is_linear_observation() {
            Self::GaussianApproxLinearObs
        } else {
            Self::GaussianApproxUt
        }
    }

    pub fn check(&self, model: &dyn StateSpaceModel) -> Result<()> {
        let ok = match self {
            Self::LinearClosedForm => model.is_linear(),
            Self::GaussianApproxLinearObs => model.is_linear_observation(),
            Self::GaussianApproxUt => true,
            Self::MonteCarlo { draws } => *draws >= 1,
        };
        if ok {
            Ok(())
        } else {
            Err(AssimError::Config(format!(
                "likelihood backend {self:?} is incompatible with model {}",
                model.id()
            )))
        }
    }
}

/// `log p_N(y; H m, H C Hᵀ + Γ)`.
fn linear_obs_loglik(
    h: &DMatrix<f64>,
    gamma: &DMatrix<f64>,
    mean: &DVector<f64>,
    cov: &DMatrix<f64>,
    y: &DVector<f64>,
) -> Result<f64> {
    let s = h * cov * h.transpose() + gamma;
    let ls = cholesky_jittered(&s, "predictive observation covariance")?.lower;
    Ok(logpdf_factor(y, &(h * mean), &ls))
}

/// Closed-form `log I(θ)` for a fully linear model.
pub fn log_i_linear(
    model: &dyn StateSpaceModel,
    theta: &DVector<f64>,
    prev: &Gaussian,
    y: &DVector<f64>,
) -> Result<f64> {
    check_dim("likelihood observation", model.obs_dim(), y.len())?;
    let h = model.observation_matrix(theta).ok_or_else(|| {
        AssimError::InvalidArgument(format!("model {} has a nonlinear observation", model.id()))
    })?;
    let (mean, cov) = kalman_predict(model, theta, prev)?;
    linear_obs_loglik(&h, &model.obs_cov(theta), &mean, &cov, y)
}

/// UT approximation of the predictive moments, including Σ(θ).
pub fn predictive_moments_ut(
    model: &dyn StateSpaceModel,
    theta: &DVector<f64>,
    prev: &Gaussian,
) -> Result<(DVector<f64>, DMatrix<f64>)> {
    unscented_predict(model, theta, prev, UtParams::default())
}

/// `log Σ w_i exp(l_i)` allowing negative weights; `−∞` when the weighted
/// sum is not positive.
fn signed_log_sum_exp(weights: &DVector<f64>, logs: &[f64]) -> f64 {
    let lmax = logs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !lmax.is_finite() {
        return f64::NEG_INFINITY;
    }
    let s: f64 = weights
        .iter()
        .zip(logs)
        .map(|(w, l)| w * (l - lmax).exp())
        .sum();
    if s > 0.0 {
        lmax + s.ln()
    } else {
        f64::NEG_INFINITY
    }
}

/// `log I(θ)` with the predictive distribution replaced by its Gaussian
/// (UT) approximation. Returns `−∞` when every sigma-point likelihood
/// underflows.
pub fn log_i_gaussian_approx(
    model: &dyn StateSpaceModel,
    theta: &DVector<f64>,
    prev: &Gaussian,
    y: &DVector<f64>,
    backend: LikelihoodBackend,
) -> Result<f64> {
    check_dim("likelihood observation", model.obs_dim(), y.len())?;
    let (mean, cov) = predictive_moments_ut(model, theta, prev)?;
    let gamma = model.obs_cov(theta);
    match backend {
        LikelihoodBackend::GaussianApproxLinearObs => {
            let h = model.observation_matrix(theta).ok_or_else(|| {
                AssimError::InvalidArgument("linear-observation backend needs H(θ)".into())
            })?;
            linear_obs_loglik(&h, &gamma, &mean, &cov, y)
        }
        LikelihoodBackend::GaussianApproxUt => {
            let lower = cholesky_jittered(&cov, "predictive covariance")?.lower;
            let lg = cholesky_jittered(&gamma, "observation covariance")?.lower;
            let sigma = SigmaPointSet::new(&mean, &lower, UtParams::default())?;
            let logs: Vec<f64> = sigma
                .points
                .column_iter()
                .map(|x| logpdf_factor(y, &model.observe(&x.into_owned(), theta), &lg))
                .collect();
            Ok(signed_log_sum_exp(&sigma.mean_weights, &logs))
        }
        other => Err(AssimError::InvalidArgument(format!(
            "{other:?} is not a Gaussian-approximation backend"
        ))),
    }
}

/// Monte Carlo `log I(θ)` from `draws` propagated samples of `prev`.
pub fn log_i_monte_carlo(
    model: &dyn StateSpaceModel,
    theta: &DVector<f64>,
    prev: &Gaussian,
    y: &DVector<f64>,
    draws: usize,
    rng: &mut SeededRng,
) -> Result<f64> {
    check_dim("likelihood observation", model.obs_dim(), y.len())?;
    let x = prev.sample(draws, rng)?;
    let process_l = noise_factor(&model.process_cov(theta))?;
    let lg = cholesky_jittered(&model.obs_cov(theta), "observation covariance")?.lower;
    let n = model.state_dim();
    let mut z = DVector::zeros(n);
    let mut logs = Vec::with_capacity(draws);
    for col in x.column_iter() {
        rng.fill_standard_normal(z.as_mut_slice());
        let xk = model.transition(&col.into_owned(), theta) + &process_l * &z;
        logs.push(logpdf_factor(y, &model.observe(&xk, theta), &lg));
    }
    let w = DVector::from_element(draws, 1.0 / draws as f64);
    Ok(signed_log_sum_exp(&w, &logs))
}

/// Dispatches to the configured backend. `rng` is used only by the Monte
/// Carlo path.
pub fn log_i(
    model: &dyn StateSpaceModel,
    theta: &DVector<f64>,
    prev: &Gaussian,
    y: &DVector<f64>,
    backend: LikelihoodBackend,
    rng: &mut SeededRng,
) -> Result<f64> {
    match backend {
        LikelihoodBackend::LinearClosedForm => log_i_linear(model, theta, prev, y),
        LikelihoodBackend::MonteCarlo { draws } => {
            log_i_monte_carlo(model, theta, prev, y, draws, rng)
        }
        _ => log_i_gaussian_approx(model, theta, prev, y, backend),
    }
}
