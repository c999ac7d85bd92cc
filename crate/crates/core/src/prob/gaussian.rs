use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use super::linalg::{self, cholesky_jittered};
use super::rng::SeededRng;
use crate::error::{check_dim, AssimError, Result};

pub const LN_2PI: f64 = 1.837_877_066_409_345_3;

/// Multivariate Gaussian held as mean and lower-triangular covariance factor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Gaussian {
    mean: DVector<f64>,
    cov_factor: DMatrix<f64>,
}

impl Gaussian {
    /// Builds from a factor; rejects non-square, non-lower or non-positive diagonals.
    pub fn new(mean: DVector<f64>, cov_factor: DMatrix<f64>) -> Result<Self> {
        let d = mean.len();
        if cov_factor.nrows() != d || cov_factor.ncols() != d {
            return Err(AssimError::DimensionMismatch {
                context: "gaussian factor",
                expected: d,
                found: cov_factor.nrows(),
            });
        }
        for i in 0..d {
            let lii = cov_factor[(i, i)];
            if !(lii > 0.0) || !lii.is_finite() {
                return Err(AssimError::InvalidFactor(format!(
                    "diagonal entry {i} is {lii}"
                )));
            }
            for j in (i + 1)..d {
                if cov_factor[(i, j)] != 0.0 {
                    return Err(AssimError::InvalidFactor(
                        "factor is not lower triangular".into(),
                    ));
                }
            }
        }
        if mean.iter().chain(cov_factor.iter()).any(|v| !v.is_finite()) {
            return Err(AssimError::NumericalDegeneracy(
                "non-finite gaussian parameter".into(),
            ));
        }
        Ok(Self { mean, cov_factor })
    }

    /// Factorizes an external covariance once, with the jitter ladder.
    pub fn from_cov(mean: DVector<f64>, cov: &DMatrix<f64>) -> Result<Self> {
        check_dim("gaussian covariance", mean.len(), cov.nrows())?;
        let f = cholesky_jittered(cov, "gaussian covariance")?;
        Self::new(mean, f.lower)
    }

    pub fn standard(d: usize) -> Self {
        Self {
            mean: DVector::zeros(d),
            cov_factor: DMatrix::identity(d, d),
        }
    }

    /// `N(mean, s²·I)`.
    pub fn isotropic(mean: DVector<f64>, variance: f64) -> Result<Self> {
        let d = mean.len();
        Self::new(mean, DMatrix::identity(d, d) * variance.sqrt())
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn mean(&self) -> &DVector<f64> {
        &self.mean
    }

    pub fn cov_factor(&self) -> &DMatrix<f64> {
        &self.cov_factor
    }

    pub fn cov(&self) -> DMatrix<f64> {
        linalg::outer_factor(&self.cov_factor)
    }

    pub fn variances(&self) -> DVector<f64> {
        DVector::from_iterator(
            self.dim(),
            (0..self.dim()).map(|i| self.cov_factor.row(i).norm_squared()),
        )
    }

    pub fn log_det(&self) -> f64 {
        linalg::log_det(&self.cov_factor)
    }

    pub fn logpdf(&self, x: &DVector<f64>) -> Result<f64> {
        check_dim("gaussian logpdf", self.dim(), x.len())?;
        let z = linalg::solve_lower(&self.cov_factor, &(x - &self.mean));
        Ok(-0.5 * (self.dim() as f64 * LN_2PI + z.norm_squared()) - 0.5 * self.log_det())
    }

    /// `n` draws `μ + L·z`, one per column.
    pub fn sample(&self, n: usize, rng: &mut SeededRng) -> Result<DMatrix<f64>> {
        if n == 0 {
            return Err(AssimError::InvalidArgument("sample count must be >= 1".into()));
        }
        let d = self.dim();
        let mut z = DMatrix::zeros(d, n);
        rng.fill_standard_normal(z.as_mut_slice());
        let mut out = &self.cov_factor * z;
        for mut col in out.column_iter_mut() {
            col += &self.mean;
        }
        Ok(out)
    }

    pub fn sample_one(&self, rng: &mut SeededRng) -> DVector<f64> {
        let mut z = DVector::zeros(self.dim());
        rng.fill_standard_normal(z.as_mut_slice());
        &self.mean + &self.cov_factor * z
    }

    /// Marginal over the index range `[start, start + len)`.
    pub fn marginal(&self, start: usize, len: usize) -> Result<Gaussian> {
        let cov = self.cov();
        let sub = cov.view((start, start), (len, len)).into_owned();
        Gaussian::from_cov(self.mean.rows(start, len).into_owned(), &sub)
    }
}

/// Density of `N(mean, L·Lᵀ)` at `x` given the factor directly.
pub fn logpdf_factor(x: &DVector<f64>, mean: &DVector<f64>, lower: &DMatrix<f64>) -> f64 {
    let z = linalg::solve_lower(lower, &(x - mean));
    -0.5 * (x.len() as f64 * LN_2PI + z.norm_squared()) - 0.5 * linalg::log_det(lower)
}

/// `KL(p ‖ q)` in closed form.
pub fn gaussian_kl(p: &Gaussian, q: &Gaussian) -> Result<f64> {
    check_dim("gaussian kl", p.dim(), q.dim())?;
    let d = p.dim() as f64;
    // tr(C_q⁻¹ C_p) = ‖L_q⁻¹ L_p‖_F²
    let m = linalg::solve_lower_mat(q.cov_factor(), p.cov_factor());
    let trace = m.norm_squared();
    let delta = linalg::solve_lower(q.cov_factor(), &(p.mean() - q.mean()));
    let kl = 0.5 * (q.log_det() - p.log_det() - d + trace + delta.norm_squared());
    if !kl.is_finite() {
        return Err(AssimError::NumericalDegeneracy(format!("kl evaluated to {kl}")));
    }
    // Rounding can leave a tiny negative value for identical inputs.
    Ok(kl.max(0.0))
}

/// Standard normal CDF.
pub fn normal_cdf(x: f64) -> f64 {
    0.5 * statrs::function::erf::erfc(-x / std::f64::consts::SQRT_2)
}
