use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;

use crate::conditional::ConditionalState;
use crate::error::{check_dim, AssimError, Result};
use crate::filters::{enkf_step_resampled, kalman_step, unscented_step, FilterBackend, UtParams};
use crate::models::StateSpaceModel;
use crate::prob::linalg::{cholesky_jittered, log_det, spd_inverse};
use crate::prob::{Gaussian, SeededRng};

/// One regression target `(θ, m*(θ), C*(θ))` with the factorization of `C*`
/// cached for the KL loss.
#[derive(Debug, Clone)]
pub struct TargetItem {
    pub theta: DVector<f64>,
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
    pub factor: DMatrix<f64>,
    pub precision: DMatrix<f64>,
    pub log_det: f64,
}

impl TargetItem {
    pub fn new(theta: DVector<f64>, mean: DVector<f64>, cov: DMatrix<f64>) -> Result<Self> {
        check_dim("target covariance", mean.len(), cov.nrows())?;
        let factor = cholesky_jittered(&cov, "target covariance")?.lower;
        Ok(Self {
            precision: spd_inverse(&factor),
            log_det: log_det(&factor),
            theta,
            mean,
            cov,
            factor,
        })
    }

    pub fn from_gaussian(theta: DVector<f64>, g: &Gaussian) -> Result<Self> {
        Self::new(theta, g.mean().clone(), g.cov())
    }
}

#[derive(Debug, Clone, Default)]
pub struct TargetBatch {
    pub items: Vec<TargetItem>,
    /// θ-samples whose filter step failed and were left out.
    pub dropped: usize,
    /// Some ensemble was not larger than the state dimension.
    pub rank_deficient: bool,
}

impl TargetBatch {
    pub fn new(items: Vec<TargetItem>) -> Self {
        Self {
            items,
            dropped: 0,
            rank_deficient: false,
        }
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }
}

/// Largest fraction of failed θ-samples tolerated in one batch.
pub const MAX_DROP_FRACTION: f64 = 0.2;

/// Draws `n` θ-samples from `nu` and computes the θ-conditioned filter
/// update of `prev_cond(θ)` with `y` for each.
///
/// θ-samples come from `rng.derive(0)`; sample `i` uses `rng.derive2(1, i)`
/// for any filter randomness.
pub fn build_targets(
    nu: &Gaussian,
    prev_cond: &dyn ConditionalState,
    model: &dyn StateSpaceModel,
    y: &DVector<f64>,
    backend: FilterBackend,
    n: usize,
    rng: &SeededRng,
) -> Result<TargetBatch> {
    if n == 0 {
        return Err(AssimError::InvalidArgument("target count must be >= 1".into()));
    }
    if backend == FilterBackend::Kalman && !model.is_linear() {
        return Err(AssimError::Config(format!(
            "kalman targets need a linear model, got {}",
            model.id()
        )));
    }
    let thetas = nu.sample(n, &mut rng.derive(0))?;
    let results: Vec<Result<(TargetItem, bool)>> = (0..n)
        .into_par_iter()
        .map(|i| {
            let theta = thetas.column(i).into_owned();
            let prev = prev_cond.eval(&theta)?;
            let (post, deficient) = match backend {
                FilterBackend::Kalman => (kalman_step(model, &theta, &prev, y)?, false),
                FilterBackend::Unscented => {
                    (unscented_step(model, &theta, &prev, y, UtParams::default())?, false)
                }
                FilterBackend::Enkf { members } => {
                    let mut r = rng.derive2(1, i as u64);
                    let out = enkf_step_resampled(model, &theta, &prev, y, members, &mut r)?;
                    (out.posterior, out.rank_deficient)
                }
            };
            Ok((TargetItem::from_gaussian(theta, &post)?, deficient))
        })
        .collect();

    let mut batch = TargetBatch::default();
    let mut last_err = None;
    for r in results {
        match r {
            Ok((item, deficient)) => {
                batch.rank_deficient |= deficient;
                batch.items.push(item);
            }
            Err(e) if e.is_numerical() => {
                batch.dropped += 1;
                last_err = Some(e);
            }
            Err(e) => return Err(e),
        }
    }
    if batch.dropped as f64 > MAX_DROP_FRACTION * n as f64 {
        return Err(AssimError::NumericalDegeneracy(format!(
            "{} of {n} target filter steps failed; last error: {}",
            batch.dropped,
            last_err.map(|e| e.to_string()).unwrap_or_default()
        )));
    }
    Ok(batch)
}
