use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{AssimError, Result};

/// Scaled unscented-transform constants.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct UtParams {
    pub alpha: f64,
    pub beta: f64,
    pub kappa: f64,
}

impl Default for UtParams {
    fn default() -> Self {
        Self {
            alpha: 0.5,
            beta: 2.0,
            kappa: 0.0,
        }
    }
}

impl UtParams {
    pub fn lambda(&self, n: usize) -> f64 {
        self.alpha * self.alpha * (n as f64 + self.kappa) - n as f64
    }
}

/// The `2n + 1` sigma points of a Gaussian with their mean and covariance
/// weights.
#[derive(Debug, Clone)]
pub struct SigmaPointSet {
    /// One point per column.
    pub points: DMatrix<f64>,
    pub mean_weights: DVector<f64>,
    pub cov_weights: DVector<f64>,
    pub params: UtParams,
}

impl SigmaPointSet {
    pub fn new(mean: &DVector<f64>, lower: &DMatrix<f64>, params: UtParams) -> Result<Self> {
        let n = mean.len();
        let lambda = params.lambda(n);
        let spread = n as f64 + lambda;
        if !(spread > 0.0) {
            return Err(AssimError::InvalidArgument(format!(
                "unscented spread n + λ = {spread} must be positive"
            )));
        }
        let scale = spread.sqrt();
        let mut points = DMatrix::zeros(n, 2 * n + 1);
        points.set_column(0, mean);
        for i in 0..n {
            let offset = lower.column(i) * scale;
            points.set_column(1 + i, &(mean + &offset));
            points.set_column(1 + n + i, &(mean - &offset));
        }
        let wi = 1.0 / (2.0 * spread);
        let mut mean_weights = DVector::from_element(2 * n + 1, wi);
        let mut cov_weights = mean_weights.clone();
        mean_weights[0] = lambda / spread;
        cov_weights[0] = lambda / spread + (1.0 - params.alpha * params.alpha + params.beta);
        Ok(Self {
            points,
            mean_weights,
            cov_weights,
            params,
        })
    }

    pub fn len(&self) -> usize {
        self.points.ncols()
    }

    pub fn is_empty(&self) -> bool {
        self.points.ncols() == 0
    }

    /// Applies `f` to every point, one output per column.
    pub fn map(&self, f: impl Fn(&DVector<f64>) -> DVector<f64>) -> DMatrix<f64> {
        let cols: Vec<DVector<f64>> = self
            .points
            .column_iter()
            .map(|c| f(&c.into_owned()))
            .collect();
        DMatrix::from_columns(&cols)
    }

    pub fn weighted_mean(&self, values: &DMatrix<f64>) -> DVector<f64> {
        values * &self.mean_weights
    }

    /// `Σ w_c (a_i − ā)(b_i − b̄)ᵀ`.
    pub fn weighted_cross(
        &self,
        a: &DMatrix<f64>,
        a_mean: &DVector<f64>,
        b: &DMatrix<f64>,
        b_mean: &DVector<f64>,
    ) -> DMatrix<f64> {
        let mut da = a.clone();
        for (i, mut col) in da.column_iter_mut().enumerate() {
            col -= a_mean;
            col *= self.cov_weights[i];
        }
        let mut db = b.clone();
        for mut col in db.column_iter_mut() {
            col -= b_mean;
        }
        da * db.transpose()
    }
}
