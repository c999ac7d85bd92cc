use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::likelihood::{log_i, LikelihoodBackend};
use crate::conditional::ConditionalState;
use crate::error::{check_dim, AssimError, Result};
use crate::models::StateSpaceModel;
use crate::prob::linalg::{solve_lower_mat, spd_inverse};
use crate::prob::{gaussian_kl, Gaussian, SeededRng};

/// Variational family for the parameter posterior: a full-covariance
/// Gaussian held by its lower-triangular factor.
pub type VariationalGaussian = Gaussian;

/// Monte Carlo estimate of `E_ν[log I(θ)] − KL(ν ‖ ν_prev)` and its
/// reparameterization gradient with respect to `(μ, L)`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ElboEstimate {
    pub value: f64,
    pub grad_mean: DVector<f64>,
    pub grad_factor: DMatrix<f64>,
    pub n_mc: usize,
    /// Standard error of the expectation term.
    pub std_error: f64,
    pub kl: f64,
    pub log_i_min: f64,
    pub log_i_max: f64,
    pub log_i_mean: f64,
    /// Draws whose `log I` was `−∞`, non-finite or numerically failed.
    pub n_nonfinite: usize,
}

impl ElboEstimate {
    pub fn is_finite(&self) -> bool {
        self.value.is_finite()
            && self.grad_mean.iter().all(|v| v.is_finite())
            && self.grad_factor.iter().all(|v| v.is_finite())
    }
}

/// Inputs shared by every ELBO evaluation within one time step.
pub struct ElboProblem<'a> {
    pub model: &'a dyn StateSpaceModel,
    pub prev_cond: &'a dyn ConditionalState,
    pub y: &'a DVector<f64>,
    pub backend: LikelihoodBackend,
    /// Relative step of the central differences in θ.
    pub fd_step: f64,
}

impl ElboProblem<'_> {
    /// `log I(θ)`; numerical failures map to `−∞`.
    pub fn log_i_at(&self, theta: &DVector<f64>, rng: &SeededRng) -> Result<f64> {
        let prev = match self.prev_cond.eval(theta) {
            Ok(g) => g,
            Err(e) if e.is_numerical() => return Ok(f64::NEG_INFINITY),
            Err(e) => return Err(e),
        };
        match log_i(self.model, theta, &prev, self.y, self.backend, &mut rng.clone()) {
            Ok(v) if v.is_finite() => Ok(v),
            Ok(_) => Ok(f64::NEG_INFINITY),
            Err(e) if e.is_numerical() => Ok(f64::NEG_INFINITY),
            Err(e) => Err(e),
        }
    }

    /// `log I(θ)` and its θ-gradient by central differences with common
    /// random numbers.
    fn log_i_with_grad(
        &self,
        theta: &DVector<f64>,
        rng: &SeededRng,
    ) -> Result<(f64, Option<DVector<f64>>)> {
        let v = self.log_i_at(theta, rng)?;
        if !v.is_finite() {
            return Ok((v, None));
        }
        let d = theta.len();
        let mut g = DVector::zeros(d);
        for i in 0..d {
            let h = self.fd_step * theta[i].abs().max(1.0);
            let mut tp = theta.clone();
            tp[i] += h;
            let mut tm = theta.clone();
            tm[i] -= h;
            let fp = self.log_i_at(&tp, rng)?;
            let fm = self.log_i_at(&tm, rng)?;
            if !(fp.is_finite() && fm.is_finite()) {
                return Ok((v, None));
            }
            g[i] = (fp - fm) / (2.0 * h);
        }
        Ok((v, Some(g)))
    }
}

/// Gradient of `KL(ν ‖ ν_prev)` with respect to `(μ, L)` of `ν`.
pub fn kl_gradient(nu: &Gaussian, prev: &Gaussian) -> (DVector<f64>, DMatrix<f64>) {
    let p = spd_inverse(prev.cov_factor());
    let gm = &p * (nu.mean() - prev.mean());
    let mut gl = &p * nu.cov_factor();
    for i in 0..nu.dim() {
        gl[(i, i)] -= 1.0 / nu.cov_factor()[(i, i)];
        for j in (i + 1)..nu.dim() {
            gl[(i, j)] = 0.0;
        }
    }
    (gm, gl)
}

/// Reparameterized ELBO estimate with `s_mc` draws `θ = μ + L z`.
///
/// Draw `s` takes its `z` and any Monte Carlo likelihood noise from
/// `rng.derive(s)`, so two calls with the same `rng` share random numbers.
pub fn elbo_estimate(
    nu: &Gaussian,
    nu_prev: &Gaussian,
    problem: &ElboProblem<'_>,
    s_mc: usize,
    with_grad: bool,
    rng: &SeededRng,
) -> Result<ElboEstimate> {
    check_dim("variational family", nu_prev.dim(), nu.dim())?;
    if s_mc == 0 {
        return Err(AssimError::InvalidArgument("s_mc must be >= 1".into()));
    }
    let d = nu.dim();
    let draws: Vec<Result<(DVector<f64>, f64, Option<DVector<f64>>)>> = (0..s_mc)
        .into_par_iter()
        .map(|s| {
            let mut r = rng.derive(s as u64);
            let mut z = DVector::zeros(d);
            r.fill_standard_normal(z.as_mut_slice());
            let theta = nu.mean() + nu.cov_factor() * &z;
            if with_grad {
                let (v, g) = problem.log_i_with_grad(&theta, &r)?;
                Ok((z, v, g))
            } else {
                Ok((z, problem.log_i_at(&theta, &r)?, None))
            }
        })
        .collect();

    let mut sum = 0.0;
    let mut sum2 = 0.0;
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    let mut bad = 0;
    let mut gm = DVector::zeros(d);
    let mut gl = DMatrix::zeros(d, d);
    for item in draws {
        let (z, v, g) = item?;
        if !v.is_finite() || (with_grad && g.is_none()) {
            bad += 1;
            continue;
        }
        sum += v;
        sum2 += v * v;
        lo = lo.min(v);
        hi = hi.max(v);
        if let Some(g) = g {
            gm += &g;
            gl += &g * z.transpose();
        }
    }
    let good = s_mc - bad;
    let kl = gaussian_kl(nu, nu_prev)?;
    let (klm, kll) = kl_gradient(nu, nu_prev);
    let s = s_mc as f64;
    let mean = if good > 0 { sum / good as f64 } else { f64::NEG_INFINITY };
    let var = if good > 1 {
        ((sum2 - good as f64 * mean * mean) / (good as f64 - 1.0)).max(0.0)
    } else {
        0.0
    };
    let value = if bad == 0 { mean - kl } else { f64::NEG_INFINITY };
    for i in 0..d {
        for j in (i + 1)..d {
            gl[(i, j)] = 0.0;
        }
    }
    Ok(ElboEstimate {
        value,
        grad_mean: gm / s - klm,
        grad_factor: gl / s - kll,
        n_mc: s_mc,
        std_error: (var / good.max(1) as f64).sqrt(),
        kl,
        log_i_min: lo,
        log_i_max: hi,
        log_i_mean: mean,
        n_nonfinite: bad,
    })
}

/// Whitened coordinates of `ν` relative to an anchor `ν_a`:
/// `μ = μ_a + L_a a`, `L = L_a B` with `B` lower triangular and
/// `B_ii = exp(b_ii)`. The anchor itself is `a = 0`, `B = I`.
#[derive(Debug, Clone)]
pub(crate) struct Whitened {
    pub a: DVector<f64>,
    /// Lower triangle of `B`, with log-diagonal.
    pub b: DMatrix<f64>,
}

impl Whitened {
    pub fn origin(d: usize) -> Self {
        Self {
            a: DVector::zeros(d),
            b: DMatrix::zeros(d, d),
        }
    }

    fn b_matrix(&self) -> DMatrix<f64> {
        let d = self.a.len();
        DMatrix::from_fn(d, d, |i, j| match i.cmp(&j) {
            std::cmp::Ordering::Greater => self.b[(i, j)],
            std::cmp::Ordering::Equal => self.b[(i, i)].exp(),
            std::cmp::Ordering::Less => 0.0,
        })
    }

    pub fn decode(&self, anchor: &Gaussian) -> Result<Gaussian> {
        let la = anchor.cov_factor();
        Gaussian::new(anchor.mean() + la * &self.a, la * self.b_matrix())
    }

    pub fn len(&self) -> usize {
        let d = self.a.len();
        d + d * (d + 1) / 2
    }

    pub fn to_flat(&self) -> Vec<f64> {
        let d = self.a.len();
        let mut out: Vec<f64> = self.a.iter().cloned().collect();
        for i in 0..d {
            for j in 0..=i {
                out.push(self.b[(i, j)]);
            }
        }
        out
    }

    pub fn from_flat(d: usize, v: &[f64]) -> Self {
        let a = DVector::from_column_slice(&v[..d]);
        let mut b = DMatrix::zeros(d, d);
        let mut k = d;
        for i in 0..d {
            for j in 0..=i {
                b[(i, j)] = v[k];
                k += 1;
            }
        }
        Self { a, b }
    }

    /// Chain rule from `(∂/∂μ, ∂/∂L)` to the flat whitened coordinates.
    pub fn pull_back(
        &self,
        anchor: &Gaussian,
        grad_mean: &DVector<f64>,
        grad_factor: &DMatrix<f64>,
    ) -> Vec<f64> {
        let la = anchor.cov_factor();
        let ga = la.transpose() * grad_mean;
        let gb = la.transpose() * grad_factor;
        let bm = self.b_matrix();
        let d = self.a.len();
        let mut out: Vec<f64> = ga.iter().cloned().collect();
        for i in 0..d {
            for j in 0..=i {
                out.push(if i == j { gb[(i, i)] * bm[(i, i)] } else { gb[(i, j)] });
            }
        }
        out
    }
}

/// `L_a⁻¹` applied to a factor, for expressing an arbitrary Gaussian in
/// whitened coordinates (used by tests).
#[allow(dead_code)]
pub(crate) fn whiten(anchor: &Gaussian, g: &Gaussian) -> Whitened {
    let la = anchor.cov_factor();
    let a = solve_lower_mat(la, &DMatrix::from_column_slice(g.dim(), 1, (g.mean() - anchor.mean()).as_slice()));
    let mut b = solve_lower_mat(la, g.cov_factor());
    for i in 0..g.dim() {
        b[(i, i)] = b[(i, i)].ln();
        for j in (i + 1)..g.dim() {
            b[(i, j)] = 0.0;
        }
    }
    Whitened {
        a: a.column(0).into_owned(),
        b,
    }
}
