use nalgebra::{DMatrix, DVector};

use super::{FilterMoments, SigmaPointSet, UtParams};
use crate::error::{check_dim, AssimError, Result};
use crate::models::StateSpaceModel;
use crate::prob::linalg::{cholesky_jittered, symmetrize};
use crate::prob::Gaussian;

fn divergence(theta: &DVector<f64>, context: &str) -> AssimError {
    AssimError::Divergence {
        context: context.to_string(),
        theta: theta.iter().cloned().collect(),
    }
}

/// UT approximation of the predictive mean and covariance (`+Σ(θ)`).
pub fn unscented_predict(
    model: &dyn StateSpaceModel,
    theta: &DVector<f64>,
    prev: &Gaussian,
    params: UtParams,
) -> Result<(DVector<f64>, DMatrix<f64>)> {
    check_dim("unscented prior", model.state_dim(), prev.dim())?;
    let sigma = SigmaPointSet::new(prev.mean(), prev.cov_factor(), params)?;
    let prop = sigma.map(|x| model.transition(x, theta));
    if prop.iter().any(|v| !v.is_finite()) {
        return Err(divergence(theta, "unscented propagation"));
    }
    let mean = sigma.weighted_mean(&prop);
    let mut cov = sigma.weighted_cross(&prop, &mean, &prop, &mean) + model.process_cov(theta);
    symmetrize(&mut cov);
    Ok((mean, cov))
}

/// Predictive moments through Φ, then observation moments through `h`.
///
/// A declared-linear observation uses `H` directly, which is what the
/// second sigma set reproduces exactly.
pub fn unscented_moments(
    model: &dyn StateSpaceModel,
    theta: &DVector<f64>,
    prev: &Gaussian,
    params: UtParams,
) -> Result<FilterMoments> {
    let (pred_mean, pred_cov) = unscented_predict(model, theta, prev, params)?;
    let gamma = model.obs_cov(theta);
    let moments = if let Some(h) = model.observation_matrix(theta) {
        let cross_cov = &pred_cov * h.transpose();
        FilterMoments {
            obs_mean: &h * &pred_mean,
            obs_cov: &h * &cross_cov + gamma,
            cross_cov,
            pred_mean,
            pred_cov,
        }
    } else {
        let lower = cholesky_jittered(&pred_cov, "unscented predictive covariance")?.lower;
        let sigma = SigmaPointSet::new(&pred_mean, &lower, params)?;
        let obs = sigma.map(|x| model.observe(x, theta));
        if obs.iter().any(|v| !v.is_finite()) {
            return Err(divergence(theta, "unscented observation"));
        }
        let obs_mean = sigma.weighted_mean(&obs);
        let mut obs_cov = sigma.weighted_cross(&obs, &obs_mean, &obs, &obs_mean) + gamma;
        symmetrize(&mut obs_cov);
        let cross_cov = sigma.weighted_cross(&sigma.points, &pred_mean, &obs, &obs_mean);
        FilterMoments {
            pred_mean,
            pred_cov,
            obs_mean,
            obs_cov,
            cross_cov,
        }
    };
    moments.ensure_finite(theta, "unscented step")?;
    Ok(moments)
}

pub fn unscented_step(
    model: &dyn StateSpaceModel,
    theta: &DVector<f64>,
    prev: &Gaussian,
    y: &DVector<f64>,
    params: UtParams,
) -> Result<Gaussian> {
    let moments = unscented_moments(model, theta, prev, params)?;
    moments
        .update(y)
        .map_err(|e| if e.is_numerical() { divergence(theta, "unscented update") } else { e })
}
