use nalgebra::{DMatrix, DVector};

use super::FilterMoments;
use crate::error::{check_dim, AssimError, Result};
use crate::models::StateSpaceModel;
use crate::prob::Gaussian;

fn linear_parts(
    model: &dyn StateSpaceModel,
    theta: &DVector<f64>,
) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    match (model.dynamics_matrix(theta), model.observation_matrix(theta)) {
        (Some(a), Some(h)) => Ok((a, h)),
        _ => Err(AssimError::InvalidArgument(format!(
            "model {} is not linear in both dynamics and observation",
            model.id()
        ))),
    }
}

/// `m⁻ = A(θ)m`, `C⁻ = A(θ) C A(θ)ᵀ + Σ(θ)`.
pub fn kalman_predict(
    model: &dyn StateSpaceModel,
    theta: &DVector<f64>,
    prev: &Gaussian,
) -> Result<(DVector<f64>, DMatrix<f64>)> {
    check_dim("kalman prior", model.state_dim(), prev.dim())?;
    let a = model.dynamics_matrix(theta).ok_or_else(|| {
        AssimError::InvalidArgument(format!("model {} has nonlinear dynamics", model.id()))
    })?;
    let al = &a * prev.cov_factor();
    let cov = &al * al.transpose() + model.process_cov(theta);
    Ok((&a * prev.mean(), cov))
}

pub fn kalman_moments(
    model: &dyn StateSpaceModel,
    theta: &DVector<f64>,
    prev: &Gaussian,
) -> Result<FilterMoments> {
    let (_, h) = linear_parts(model, theta)?;
    let (pred_mean, pred_cov) = kalman_predict(model, theta, prev)?;
    let cross_cov = &pred_cov * h.transpose();
    let obs_cov = &h * &cross_cov + model.obs_cov(theta);
    let moments = FilterMoments {
        obs_mean: &h * &pred_mean,
        pred_mean,
        pred_cov,
        obs_cov,
        cross_cov,
    };
    moments.ensure_finite(theta, "kalman step")?;
    Ok(moments)
}

/// Exact conditional update of a linear-Gaussian model.
pub fn kalman_step(
    model: &dyn StateSpaceModel,
    theta: &DVector<f64>,
    prev: &Gaussian,
    y: &DVector<f64>,
) -> Result<Gaussian> {
    kalman_moments(model, theta, prev)?.update(y)
}
