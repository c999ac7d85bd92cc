//! Delayed-rejection adaptive Metropolis sampling of the exact joint
//! posterior of a linear-Gaussian model, used as the reference posterior.

use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, AssimError, Result};
use crate::filters::kalman_moments;
use crate::io;
use crate::models::{Prior, StateSpaceModel};
use crate::prob::gaussian::logpdf_factor;
use crate::prob::linalg::cholesky_jittered;
use crate::prob::{Gaussian, SeededRng};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DramConfig {
    /// Adapt the proposal covariance every this many draws.
    pub adaptation_threshold: usize,
    pub dr_tiers: usize,
    /// Tier-2 proposal factor is `γ` times the tier-1 factor.
    pub second_tier_scale: f64,
    /// Total draws, burn-in included.
    pub n_samples: usize,
    pub burn_in_fraction: f64,
    pub thinning: usize,
    /// Regularization `ε·I` added to the adapted covariance.
    pub epsilon: f64,
    /// Consecutive rejections after which the chain is declared stuck.
    pub stuck_after: usize,
    /// Initial proposal covariance as a multiple of the prior covariance.
    pub init_cov_scale: f64,
}

impl Default for DramConfig {
    fn default() -> Self {
        Self {
            adaptation_threshold: 100,
            dr_tiers: 2,
            second_tier_scale: 0.5,
            n_samples: 200_000,
            burn_in_fraction: 0.5,
            thinning: 2,
            epsilon: 1e-10,
            stuck_after: 10_000,
            init_cov_scale: 0.1,
        }
    }
}

impl DramConfig {
    /// Number of draws kept after burn-in and thinning.
    pub fn kept_draws(&self) -> usize {
        let burn = (self.burn_in_fraction * self.n_samples as f64) as usize;
        (self.n_samples - burn).div_ceil(self.thinning)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.second_tier_scale > 0.0 && self.second_tier_scale < 1.0) {
            return Err(AssimError::Config(format!("second_tier_scale {} not in (0, 1)", self.second_tier_scale)));
        }
        if self.dr_tiers != 2 {
            return Err(AssimError::Config(format!("dr_tiers must be 2, got {}", self.dr_tiers)));
        }
        if !(0.0..1.0).contains(&self.burn_in_fraction) || self.thinning == 0 || self.adaptation_threshold == 0 {
            return Err(AssimError::Config("invalid burn-in, thinning or adaptation threshold".into()));
        }
        Ok(())
    }
}

/// `log p(X_k = x, θ | y_1..y_k)` up to a constant: the θ-conditioned Kalman
/// recursion from the state prior gives `Π p(y_i | θ, y_{1:i−1})` and
/// `N(x; m_k(θ), C_k(θ))`.
pub fn log_target_joint(
    model: &dyn StateSpaceModel,
    prior: &Prior,
    ys: &[DVector<f64>],
    x: &DVector<f64>,
    theta: &DVector<f64>,
) -> Result<f64> {
    check_dim("target state", model.state_dim(), x.len())?;
    let mut lp = prior.theta.logpdf(theta)?;
    let mut g = prior.state.clone();
    for y in ys {
        let m = kalman_moments(model, theta, &g)?;
        let ls = cholesky_jittered(&m.obs_cov, "innovation covariance")?.lower;
        lp += logpdf_factor(y, &m.obs_mean, &ls);
        g = m.update(y)?;
    }
    Ok(lp + g.logpdf(x)?)
}

/// Standard two-stage delayed-rejection acceptance, in logs:
///
/// `α₂ = min(1, π(y₂) q₁(y₂→y₁) (1 − α₁(y₂, y₁)) / [π(x) q₁(x→y₁) (1 − α₁(x, y₁))])`
///
/// where `α₁(a, b) = min(1, π(b)/π(a))`; the tier-2 proposal is symmetric.
pub fn tier2_log_alpha(lp_x: f64, lp_y1: f64, lp_y2: f64, log_q1_x_y1: f64, log_q1_y2_y1: f64) -> f64 {
    let a1_x = (lp_y1 - lp_x).min(0.0).exp();
    let a1_y2 = (lp_y1 - lp_y2).min(0.0).exp();
    if a1_x >= 1.0 {
        return f64::NEG_INFINITY;
    }
    if a1_y2 >= 1.0 {
        return f64::NEG_INFINITY;
    }
    let num = lp_y2 + log_q1_y2_y1 + (-a1_y2).ln_1p();
    let den = lp_x + log_q1_x_y1 + (-a1_x).ln_1p();
    (num - den).min(0.0)
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct DramStats {
    pub draws: usize,
    pub kept: usize,
    pub accepted_tier1: usize,
    pub accepted_tier2: usize,
    pub acceptance_rate: f64,
    pub adaptations: usize,
}

#[derive(Debug, Clone)]
pub struct DramOutput {
    /// Kept draws, one per column.
    pub samples: DMatrix<f64>,
    pub stats: DramStats,
}

impl DramOutput {
    pub fn mean(&self) -> DVector<f64> {
        self.samples.column_mean()
    }

    pub fn cov(&self) -> DMatrix<f64> {
        crate::filters::ensemble_moments(&self.samples).1
    }

    /// `samples.bin` (row-major f64 LE, one draw per row) and `stats.json`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        let mut bytes = Vec::with_capacity(self.samples.len() * 8);
        for c in self.samples.column_iter() {
            for v in c.iter() {
                bytes.extend_from_slice(&v.to_le_bytes());
            }
        }
        std::fs::write(dir.join("samples.bin"), bytes)?;
        io::write_json_file(
            &dir.join("stats.json"),
            &serde_json::json!({
                "dim": self.samples.nrows(),
                "stats": self.stats,
                "mean": self.mean().as_slice(),
                "cov": crate::metrics::cov_rows(&self.cov()),
            }),
        )
    }
}

/// Running mean and covariance of the chain for the adaptation.
struct Welford {
    n: f64,
    mean: DVector<f64>,
    m2: DMatrix<f64>,
}

impl Welford {
    fn new(d: usize) -> Self {
        Self {
            n: 0.0,
            mean: DVector::zeros(d),
            m2: DMatrix::zeros(d, d),
        }
    }

    fn push(&mut self, x: &DVector<f64>) {
        self.n += 1.0;
        let delta = x - &self.mean;
        self.mean += &delta / self.n;
        let delta2 = x - &self.mean;
        self.m2 += &delta * delta2.transpose();
    }

    fn cov(&self) -> DMatrix<f64> {
        &self.m2 / (self.n - 1.0)
    }
}

/// Runs one DRAM chain from `init` with initial proposal covariance
/// `init_cov`. Non-finite target values reject.
pub fn dram_sample(
    log_target: &dyn Fn(&DVector<f64>) -> f64,
    init: &DVector<f64>,
    init_cov: &DMatrix<f64>,
    config: &DramConfig,
    rng: &SeededRng,
) -> Result<DramOutput> {
    config.validate()?;
    let d = init.len();
    check_dim("dram proposal", d, init_cov.nrows())?;
    let mut rng = rng.clone();
    let eval = |x: &DVector<f64>| {
        let v = log_target(x);
        if v.is_nan() { f64::NEG_INFINITY } else { v }
    };
    let mut x = init.clone();
    let mut lp = eval(&x);
    if !lp.is_finite() {
        return Err(AssimError::InvalidArgument("log target is not finite at the initial point".into()));
    }
    let mut l = cholesky_jittered(init_cov, "initial proposal")?.lower;
    let gamma = config.second_tier_scale;
    let sd = 2.38 * 2.38 / d as f64;
    let burn = (config.burn_in_fraction * config.n_samples as f64) as usize;
    let mut kept_cols = Vec::with_capacity((config.n_samples - burn) / config.thinning + 1);
    let mut stats = DramStats::default();
    let mut history = Welford::new(d);
    let mut rejected_run = 0;
    let mut z = DVector::zeros(d);

    for t in 0..config.n_samples {
        rng.fill_standard_normal(z.as_mut_slice());
        let y1 = &x + &l * &z;
        let lp1 = eval(&y1);
        let accept1 = (lp1 - lp).min(0.0);
        if lp1.is_finite() && rng.uniform().ln() < accept1 {
            x = y1;
            lp = lp1;
            stats.accepted_tier1 += 1;
            rejected_run = 0;
        } else {
            rng.fill_standard_normal(z.as_mut_slice());
            let y2 = &x + (&l * &z) * gamma;
            let lp2 = eval(&y2);
            let accepted = lp2.is_finite() && {
                // q₁(a→y₁) is Gaussian with the tier-1 factor; only the
                // quadratic forms differ between the two directions.
                let log_q_x = logpdf_factor(&y1, &x, &l);
                let log_q_y2 = logpdf_factor(&y1, &y2, &l);
                let a2 = if lp1.is_finite() {
                    tier2_log_alpha(lp, lp1, lp2, log_q_x, log_q_y2)
                } else {
                    (lp2 - lp).min(0.0)
                };
                rng.uniform().ln() < a2
            };
            if accepted {
                x = y2;
                lp = lp2;
                stats.accepted_tier2 += 1;
                rejected_run = 0;
            } else {
                rejected_run += 1;
                if rejected_run >= config.stuck_after {
                    return Err(AssimError::StuckChain(rejected_run));
                }
            }
        }
        history.push(&x);
        if (t + 1) % config.adaptation_threshold == 0 && history.n > d as f64 + 1.0 {
            let cov = history.cov() * sd + DMatrix::identity(d, d) * (sd * config.epsilon);
            if let Ok(f) = cholesky_jittered(&cov, "adapted proposal") {
                l = f.lower;
                stats.adaptations += 1;
            }
        }
        if t >= burn && (t - burn) % config.thinning == 0 {
            kept_cols.push(x.clone());
        }
    }
    stats.draws = config.n_samples;
    stats.kept = kept_cols.len();
    stats.acceptance_rate = (stats.accepted_tier1 + stats.accepted_tier2) as f64 / config.n_samples as f64;
    let samples = if kept_cols.is_empty() {
        DMatrix::zeros(d, 0)
    } else {
        DMatrix::from_columns(&kept_cols)
    };
    Ok(DramOutput { samples, stats })
}

/// DRAM over `(x_k, θ)` given `y_1..y_k`, started at the prior mean with
/// `init_cov_scale` times the prior covariance. Rows `0..n` of the samples
/// are the state, rows `n..` are θ.
pub fn oracle_posterior(
    model: &dyn StateSpaceModel,
    prior: &Prior,
    ys: &[DVector<f64>],
    config: &DramConfig,
    rng: &SeededRng,
) -> Result<DramOutput> {
    if !model.is_linear() {
        return Err(AssimError::Config(format!(
            "the reference sampler needs a linear model, {} is not",
            model.id()
        )));
    }
    let (n, d) = (model.state_dim(), model.param_dim());
    let mut init = DVector::zeros(n + d);
    init.rows_mut(0, n).copy_from(prior.state.mean());
    init.rows_mut(n, d).copy_from(prior.theta.mean());
    let mut cov = DMatrix::zeros(n + d, n + d);
    cov.view_mut((0, 0), (n, n)).copy_from(&(prior.state.cov() * config.init_cov_scale));
    cov.view_mut((n, n), (d, d)).copy_from(&(prior.theta.cov() * config.init_cov_scale));
    let target = |z: &DVector<f64>| {
        let x = z.rows(0, n).into_owned();
        let th = z.rows(n, d).into_owned();
        log_target_joint(model, prior, ys, &x, &th).unwrap_or(f64::NEG_INFINITY)
    };
    dram_sample(&target, &init, &cov, config, rng)
}

/// θ-marginal of the reference sample as a Gaussian summary.
pub fn theta_marginal(out: &DramOutput, state_dim: usize) -> Result<Gaussian> {
    let d = out.samples.nrows() - state_dim;
    let th = out.samples.rows(state_dim, d).into_owned();
    let (m, c) = crate::filters::ensemble_moments(&th);
    Gaussian::from_cov(m, &c)
}
