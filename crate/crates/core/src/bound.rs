//! Monte Carlo estimate of the a-posteriori error bound between the exact
//! joint posterior and `q_k` for linear-Gaussian models.

use nalgebra::DVector;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::conditional::ConditionalState;
use crate::error::{check_dim, AssimError, Result};
use crate::filters::{kalman_moments, kalman_step};
use crate::models::{Prior, StateSpaceModel};
use crate::prob::linalg::{cholesky_jittered, log_det, solve_lower, solve_lower_mat};
use crate::prob::gaussian::logpdf_factor;
use crate::prob::{hellinger_distance_grid, tv_distance_grid, DensityGrid, Gaussian, GridAxis, SeededRng, LN_2PI};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Distance {
    TotalVariation,
    Hellinger,
}

/// `Ψ_j(θ)`: the KL-style discrepancy between `ρ_j(· | θ)` and the Kalman
/// update `N(F_m, F_c)` of `ρ_{j−1}(· | θ)` with `y_j`,
///
/// `log|F_c| − log|C_j| − n + tr(F_c⁻¹ C_j) + (m_j − F_m)ᵀ F_c⁻¹ (m_j − F_m)`.
pub fn psi_term(
    cond_j: &dyn ConditionalState,
    cond_prev: &dyn ConditionalState,
    theta: &DVector<f64>,
    model: &dyn StateSpaceModel,
    y: &DVector<f64>,
) -> Result<f64> {
    let rho = cond_j.eval(theta)?;
    let target = kalman_step(model, theta, &cond_prev.eval(theta)?, y)?;
    psi_between(&rho, &target)
}

/// `Ψ` for an explicit pair `ρ = N(m, C)` and `N(F_m, F_c)`.
pub fn psi_between(rho: &Gaussian, target: &Gaussian) -> Result<f64> {
    check_dim("psi", target.dim(), rho.dim())?;
    let n = rho.dim();
    let lf = target.cov_factor();
    // tr(F_c⁻¹ C) = ‖L_F⁻¹ L_C‖²_F
    let w = solve_lower_mat(lf, rho.cov_factor());
    let delta = solve_lower(lf, &(rho.mean() - target.mean()));
    let v = log_det(lf) - log_det(rho.cov_factor()) - n as f64 + w.norm_squared() + delta.norm_squared();
    if !v.is_finite() {
        return Err(AssimError::NumericalDegeneracy("non-finite psi".into()));
    }
    Ok(v)
}

/// `p_N(y_j; H m_j^{*−}, H C_j^{*−} Hᵀ + Γ)` at one θ.
pub fn predictive_density(
    cond_prev: &dyn ConditionalState,
    theta: &DVector<f64>,
    model: &dyn StateSpaceModel,
    y: &DVector<f64>,
) -> Result<f64> {
    let m = kalman_moments(model, theta, &cond_prev.eval(theta)?)?;
    let l = cholesky_jittered(&m.obs_cov, "predictive density")?.lower;
    let z = solve_lower(&l, &(y - &m.obs_mean));
    Ok((-0.5 * (y.len() as f64 * LN_2PI + z.norm_squared() + log_det(&l))).exp())
}

/// Sample mean and its standard error.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct McEstimate {
    pub mean: f64,
    pub std_error: f64,
}

impl McEstimate {
    fn from_values(v: &[f64]) -> Self {
        let n = v.len() as f64;
        let mean = v.iter().sum::<f64>() / n;
        let var = if v.len() > 1 {
            v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)
        } else {
            0.0
        };
        Self {
            mean,
            std_error: (var / n).sqrt(),
        }
    }
}

/// `Z_j = E_{θ∼ν_{j−1}}[p_N(y_j; H m_j^{*−}, H C_j^{*−} Hᵀ + Γ)]` from
/// `samples` draws; draw `i` comes from `rng.derive(i)`.
pub fn z_factor(
    nu_prev: &Gaussian,
    cond_prev: &dyn ConditionalState,
    model: &dyn StateSpaceModel,
    y: &DVector<f64>,
    samples: usize,
    rng: &SeededRng,
) -> Result<McEstimate> {
    if samples == 0 {
        return Err(AssimError::InvalidArgument("z_factor needs at least one sample".into()));
    }
    let vals: Vec<f64> = (0..samples)
        .into_par_iter()
        .map(|i| {
            let theta = nu_prev.sample_one(&mut rng.derive(i as u64));
            predictive_density(cond_prev, &theta, model, y)
        })
        .collect::<Result<_>>()?;
    Ok(McEstimate::from_values(&vals))
}

/// `E_{θ∼ν_j}[Ψ_j(θ)]` from `samples` draws.
pub fn expected_psi(
    nu: &Gaussian,
    cond_j: &dyn ConditionalState,
    cond_prev: &dyn ConditionalState,
    model: &dyn StateSpaceModel,
    y: &DVector<f64>,
    samples: usize,
    rng: &SeededRng,
) -> Result<McEstimate> {
    if samples == 0 {
        return Err(AssimError::InvalidArgument("expected_psi needs at least one sample".into()));
    }
    let vals: Vec<f64> = (0..samples)
        .into_par_iter()
        .map(|i| {
            let theta = nu.sample_one(&mut rng.derive(i as u64));
            psi_term(cond_j, cond_prev, &theta, model, y)
        })
        .collect::<Result<_>>()?;
    Ok(McEstimate::from_values(&vals))
}

/// One assimilated step of an FBOVI run.
pub struct BoundStep<'a> {
    pub nu: &'a Gaussian,
    pub cond: &'a dyn ConditionalState,
    /// Terminal ELBO `ε_j` of Stage 1 and its standard error.
    pub elbo: f64,
    pub elbo_std_error: f64,
    pub y: &'a DVector<f64>,
}

pub struct BoundInputs<'a> {
    pub model: &'a dyn StateSpaceModel,
    pub nu0: &'a Gaussian,
    pub cond0: &'a dyn ConditionalState,
    /// Steps `j = 1..k`.
    pub steps: Vec<BoundStep<'a>>,
    /// Declared `inf_θ |Γ(θ)|`.
    pub c_tilde: f64,
    pub distance: Distance,
    pub psi_samples: usize,
    pub z_samples: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundTerm {
    pub step: usize,
    pub expected_psi: McEstimate,
    /// `Z_j`, which enters the constants of the earlier steps.
    pub z: McEstimate,
    pub radicand: f64,
    pub clamped: bool,
    /// `C′` for `j < k`, `1/√2` for `j = k`.
    pub constant: f64,
    pub addend: f64,
    pub addend_std_error: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundReport {
    pub k: usize,
    pub distance: Distance,
    pub terms: Vec<BoundTerm>,
    pub total: f64,
    pub total_std_error: f64,
    pub clamped_steps: usize,
}

/// Per-step MC quantities shared by the bounds at every horizon.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepQuantities {
    pub expected_psi: McEstimate,
    pub z: McEstimate,
    pub radicand: f64,
    pub radicand_std_error: f64,
}

/// Computes `E_{ν_j}[Ψ_j]` (from `rng.derive2(j, 0)`), `Z_j` (from
/// `rng.derive2(j, 1)`) and the radicand for every step.
pub fn step_quantities(inputs: &BoundInputs<'_>, rng: &SeededRng) -> Result<Vec<StepQuantities>> {
    if !(inputs.c_tilde > 0.0) || !inputs.c_tilde.is_finite() {
        return Err(AssimError::InvalidArgument(format!("declared C̃ = {}", inputs.c_tilde)));
    }
    let r = inputs.model.obs_dim() as f64;
    let offset = -0.5 * r * LN_2PI - 0.5 * inputs.c_tilde.ln();
    let mut out = Vec::with_capacity(inputs.steps.len());
    for (idx, s) in inputs.steps.iter().enumerate() {
        let j = idx + 1;
        if !s.elbo.is_finite() {
            return Err(AssimError::InvalidArgument(format!("terminal ELBO at step {j} is not finite")));
        }
        let (nu_prev, cond_prev) = if idx == 0 {
            (inputs.nu0, inputs.cond0)
        } else {
            (inputs.steps[idx - 1].nu, inputs.steps[idx - 1].cond)
        };
        let expected_psi = expected_psi(
            s.nu,
            s.cond,
            cond_prev,
            inputs.model,
            s.y,
            inputs.psi_samples,
            &rng.derive2(j as u64, 0),
        )?;
        let z = z_factor(nu_prev, cond_prev, inputs.model, s.y, inputs.z_samples, &rng.derive2(j as u64, 1))?;
        let se = if s.elbo_std_error.is_finite() { s.elbo_std_error } else { 0.0 };
        out.push(StepQuantities {
            radicand: expected_psi.mean + offset - s.elbo,
            radicand_std_error: expected_psi.std_error.hypot(se),
            expected_psi,
            z,
        });
    }
    Ok(out)
}

/// The constant `C′(j, k)` multiplying step `j`'s root for `j < k`.
pub fn bound_constant(distance: Distance, r: usize, c_tilde: f64, log_z_product: f64, gap: usize) -> f64 {
    let g = gap as f64;
    let r = r as f64;
    match distance {
        Distance::TotalVariation => {
            (-0.5 * r * g * LN_2PI - 0.5 * g * c_tilde.ln() - log_z_product).exp() / std::f64::consts::SQRT_2
        }
        Distance::Hellinger => {
            (g * 2f64.ln() - 0.25 * r * g * LN_2PI - 0.25 * g * c_tilde.ln() - 0.5 * log_z_product).exp()
                / std::f64::consts::SQRT_2
        }
    }
}

/// Assembles the bound at horizon `k` from precomputed step quantities.
pub fn assemble_bound(
    quantities: &[StepQuantities],
    k: usize,
    distance: Distance,
    r: usize,
    c_tilde: f64,
) -> Result<BoundReport> {
    if k == 0 || k > quantities.len() {
        return Err(AssimError::InvalidArgument(format!(
            "horizon {k} outside 1..={}",
            quantities.len()
        )));
    }
    let mut terms = Vec::with_capacity(k);
    let mut total = 0.0;
    let mut var = 0.0;
    for j in 1..=k {
        let q = &quantities[j - 1];
        let (constant, rel_se) = if j == k {
            (std::f64::consts::FRAC_1_SQRT_2, 0.0)
        } else {
            let zs = &quantities[j..k];
            let log_prod: f64 = zs.iter().map(|s| s.z.mean.ln()).sum();
            let rel: f64 = zs.iter().map(|s| (s.z.std_error / s.z.mean).powi(2)).sum::<f64>().sqrt();
            let rel = match distance {
                Distance::TotalVariation => rel,
                Distance::Hellinger => rel / 2.0,
            };
            (bound_constant(distance, r, c_tilde, log_prod, k - j), rel)
        };
        let clamped = q.radicand < 0.0;
        let rad = q.radicand.max(0.0);
        let root = rad.sqrt();
        let addend = constant * root;
        // delta method; at a clamped radicand the spread is taken as √SE
        let root_se = if root > 0.0 {
            q.radicand_std_error / (2.0 * root)
        } else {
            q.radicand_std_error.sqrt()
        };
        let addend_se = constant * root_se.hypot(root * rel_se);
        total += addend;
        var += addend_se * addend_se;
        terms.push(BoundTerm {
            step: j,
            expected_psi: q.expected_psi,
            z: q.z,
            radicand: q.radicand,
            clamped,
            constant,
            addend,
            addend_std_error: addend_se,
        });
    }
    Ok(BoundReport {
        k,
        distance,
        clamped_steps: terms.iter().filter(|t| t.clamped).count(),
        terms,
        total,
        total_std_error: var.sqrt(),
    })
}

/// The bound at the last step of `inputs`.
pub fn error_bound(inputs: &BoundInputs<'_>, rng: &SeededRng) -> Result<BoundReport> {
    let q = step_quantities(inputs, rng)?;
    assemble_bound(&q, q.len(), inputs.distance, inputs.model.obs_dim(), inputs.c_tilde)
}

/// `Σ_{j<k} C_j √(a_j + b_j) + (1/√2) √(a_k + b_k)` for externally supplied
/// `(E[KL(ρ_j ‖ ρ_j*)], KL(ν_j ‖ ν_j*))` pairs and constants `C_j`, `j < k`.
pub fn kl_bound_skeleton(kl_pairs: &[(f64, f64)], constants: &[f64]) -> Result<f64> {
    let k = kl_pairs.len();
    if k == 0 {
        return Ok(0.0);
    }
    if constants.len() != k - 1 {
        return Err(AssimError::DimensionMismatch {
            context: "bound constants",
            expected: k - 1,
            found: constants.len(),
        });
    }
    if let Some(p) = kl_pairs.iter().find(|(a, b)| !(*a >= 0.0 && *b >= 0.0)) {
        return Err(AssimError::InvalidArgument(format!("KL terms must be nonnegative, got {p:?}")));
    }
    let head: f64 = kl_pairs[..k - 1]
        .iter()
        .zip(constants)
        .map(|((a, b), c)| c * (a + b).sqrt())
        .sum();
    let (a, b) = kl_pairs[k - 1];
    Ok(head + ((a + b) / 2.0).sqrt())
}

/// Distance between the exact joint posterior `p(x_k, θ | y_1..y_k)` of a
/// linear model with scalar state and scalar θ and `ν(θ)ρ(x | θ)`, by
/// quadrature on the `theta_axis × x_axis` grid. Both densities are
/// renormalized on the grid.
#[allow(clippy::too_many_arguments)]
pub fn grid_distance_scalar(
    model: &dyn StateSpaceModel,
    prior: &Prior,
    ys: &[DVector<f64>],
    nu: &Gaussian,
    cond: &dyn ConditionalState,
    theta_axis: GridAxis,
    x_axis: GridAxis,
    distance: Distance,
) -> Result<f64> {
    if model.state_dim() != 1 || model.param_dim() != 1 {
        return Err(AssimError::InvalidArgument(format!(
            "grid distance needs scalar state and parameter, model {} has {} and {}",
            model.id(),
            model.state_dim(),
            model.param_dim()
        )));
    }
    let thetas: Vec<f64> = (0..theta_axis.count).map(|i| theta_axis.point(i)).collect();
    let xs: Vec<f64> = (0..x_axis.count).map(|i| x_axis.point(i)).collect();
    let rows: Vec<(Vec<f64>, Vec<f64>)> = thetas
        .par_iter()
        .map(|&t| {
            let th = DVector::from_element(1, t);
            let mut lp_exact = prior.theta.logpdf(&th)?;
            let mut g = prior.state.clone();
            for y in ys {
                let m = kalman_moments(model, &th, &g)?;
                let ls = cholesky_jittered(&m.obs_cov, "innovation covariance")?.lower;
                lp_exact += logpdf_factor(y, &m.obs_mean, &ls);
                g = m.update(y)?;
            }
            let rho = cond.eval(&th)?;
            let lp_nu = nu.logpdf(&th)?;
            let mut exact = Vec::with_capacity(xs.len());
            let mut approx = Vec::with_capacity(xs.len());
            for &x in &xs {
                let xv = DVector::from_element(1, x);
                exact.push(lp_exact + g.logpdf(&xv)?);
                approx.push(lp_nu + rho.logpdf(&xv)?);
            }
            Ok((exact, approx))
        })
        .collect::<Result<_>>()?;
    let grid = |pick: fn(&(Vec<f64>, Vec<f64>)) -> &Vec<f64>| {
        let max = rows.iter().flat_map(|r| pick(r).iter()).fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        let mut vals = rows.iter().flat_map(|r| pick(r).iter()).map(move |v| (v - max).exp());
        DensityGrid::from_fn(vec![theta_axis, x_axis], |_| vals.next().unwrap_or(0.0))?.normalized()
    };
    let exact = grid(|r| &r.0)?;
    let approx = grid(|r| &r.1)?;
    match distance {
        Distance::TotalVariation => tv_distance_grid(&exact, &approx),
        Distance::Hellinger => hellinger_distance_grid(&exact, &approx),
    }
}
