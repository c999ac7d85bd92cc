use nalgebra::{DMatrix, DVector};

use crate::error::{check_dim, AssimError, Result};
use crate::models::{noise_factor, StateSpaceModel};
use crate::prob::linalg::{cholesky_jittered, solve_lower_mat, symmetrize};
use crate::prob::{Gaussian, SeededRng};

#[derive(Debug, Clone)]
pub struct EnkfOutput {
    pub posterior: Gaussian,
    /// Ensemble size did not exceed the state dimension, so the sample
    /// covariance is rank-deficient and was jittered.
    pub rank_deficient: bool,
}

/// Sample mean and `1/(M−1)`-normalized covariance of the columns of `x`.
pub fn ensemble_moments(x: &DMatrix<f64>) -> (DVector<f64>, DMatrix<f64>) {
    let m = x.ncols();
    let mean = x.column_mean();
    let mut dev = x.clone();
    for mut col in dev.column_iter_mut() {
        col -= &mean;
    }
    let mut cov = &dev * dev.transpose() / (m as f64 - 1.0);
    symmetrize(&mut cov);
    (mean, cov)
}

fn centered(x: &DMatrix<f64>) -> (DVector<f64>, DMatrix<f64>) {
    let mean = x.column_mean();
    let mut dev = x.clone();
    for mut col in dev.column_iter_mut() {
        col -= &mean;
    }
    (mean, dev)
}

/// Perturbed-observation analysis of a forecast ensemble.
///
/// `xf` holds forecast members as columns and `hx` their predicted
/// observations. Draws `η⁽ʲ⁾ ~ N(0, Γ)` from `rng`; the predicted-observation
/// statistics use `h(x⁽ʲ⁾) + η⁽ʲ⁾` and member `j` is moved by
/// `U S⁻¹ (y − η⁽ʲ⁾ − h(x⁽ʲ⁾))`.
pub fn perturbed_obs_update(
    xf: &DMatrix<f64>,
    hx: &DMatrix<f64>,
    y: &DVector<f64>,
    obs_lower: &DMatrix<f64>,
    rng: &mut SeededRng,
) -> Result<DMatrix<f64>> {
    let m = xf.ncols();
    let r = y.len();
    check_dim("ensemble observations", r, hx.nrows())?;
    check_dim("ensemble members", m, hx.ncols())?;
    if m < 2 {
        return Err(AssimError::InvalidArgument("ensemble needs at least 2 members".into()));
    }
    let mut eta = DMatrix::zeros(r, m);
    rng.fill_standard_normal(eta.as_mut_slice());
    let eta = obs_lower * eta;
    let yp = hx + &eta;
    let (_, dy) = centered(&yp);
    let (_, dx) = centered(xf);
    let denom = m as f64 - 1.0;
    let s = &dy * dy.transpose() / denom;
    let u = &dx * dy.transpose() / denom;
    let ls = cholesky_jittered(&s, "ensemble innovation covariance")?.lower;
    let mut innov = -(hx + &eta);
    for mut col in innov.column_iter_mut() {
        col += y;
    }
    // S⁻¹ = L⁻ᵀ L⁻¹
    let linv = solve_lower_mat(&ls, &DMatrix::identity(r, r));
    let sinv_innov = linv.transpose() * (&linv * innov);
    Ok(xf + u * sinv_innov)
}

/// One step of the every-step-resampling ensemble filter at fixed θ: draw
/// `M` members from `prev`, propagate with fresh process noise, assimilate
/// `y` with perturbed observations, and summarize the analysis ensemble.
pub fn enkf_step_resampled(
    model: &dyn StateSpaceModel,
    theta: &DVector<f64>,
    prev: &Gaussian,
    y: &DVector<f64>,
    members: usize,
    rng: &mut SeededRng,
) -> Result<EnkfOutput> {
    let n = model.state_dim();
    check_dim("ensemble prior", n, prev.dim())?;
    check_dim("ensemble observation", model.obs_dim(), y.len())?;
    if members < 2 {
        return Err(AssimError::InvalidArgument("ensemble needs at least 2 members".into()));
    }
    let x0 = prev.sample(members, rng)?;
    let process_l = noise_factor(&model.process_cov(theta))?;
    let mut xi = DMatrix::zeros(n, members);
    rng.fill_standard_normal(xi.as_mut_slice());
    let mut xf = process_l * xi;
    for (j, mut col) in xf.column_iter_mut().enumerate() {
        col += model.transition(&x0.column(j).into_owned(), theta);
    }
    let hx_cols: Vec<DVector<f64>> = xf
        .column_iter()
        .map(|c| model.observe(&c.into_owned(), theta))
        .collect();
    let hx = DMatrix::from_columns(&hx_cols);
    if xf.iter().chain(hx.iter()).any(|v| !v.is_finite()) {
        return Err(AssimError::Divergence {
            context: "ensemble propagation".into(),
            theta: theta.iter().cloned().collect(),
        });
    }
    let obs_l = noise_factor(&model.obs_cov(theta))?;
    let xa = perturbed_obs_update(&xf, &hx, y, &obs_l, rng)?;
    let (mean, cov) = ensemble_moments(&xa);
    Ok(EnkfOutput {
        posterior: Gaussian::from_cov(mean, &cov)?,
        rank_deficient: members <= n,
    })
}
