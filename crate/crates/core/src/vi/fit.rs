use serde::{Deserialize, Serialize};

use super::elbo::{elbo_estimate, ElboProblem, Whitened};
use crate::adam::Adam;
use crate::error::{AssimError, Result};
use crate::prob::{Gaussian, SeededRng};

/// Stage-1 optimizer settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Stage1Config {
    pub steps: usize,
    pub lr: f64,
    pub s_mc: usize,
    /// Draws for the terminal ELBO estimate.
    pub final_samples: usize,
    /// Relative step for the central differences in θ.
    pub fd_step: f64,
    /// Fraction of the final iterations over which the learning rate decays
    /// linearly to a tenth of `lr`.
    pub decay_fraction: f64,
}

impl Default for Stage1Config {
    fn default() -> Self {
        Self {
            steps: 200,
            lr: 5e-2,
            s_mc: 32,
            final_samples: 256,
            fd_step: 1e-5,
            decay_fraction: 0.5,
        }
    }
}

impl Stage1Config {
    fn lr_at(&self, t: usize) -> f64 {
        let start = ((1.0 - self.decay_fraction) * self.steps as f64) as usize;
        if t < start || self.steps <= start + 1 {
            return self.lr;
        }
        let frac = (t - start) as f64 / (self.steps - start - 1) as f64;
        self.lr * (1.0 - 0.9 * frac)
    }
}

/// Result of one Stage-1 fit.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct NuFit {
    pub nu: Gaussian,
    /// Terminal ELBO `ε_k` at the returned `ν`.
    pub terminal_elbo: f64,
    pub terminal_std_error: f64,
    pub initial_elbo: f64,
    /// ELBO estimate at each iteration.
    pub trace: Vec<f64>,
    /// Iterations skipped because the estimate was not finite.
    pub flagged_iterations: usize,
    /// The data point was uninformative-to-impossible for almost every draw,
    /// so `ν_{k−1}` was kept.
    pub degenerate: bool,
}

/// Maximizes the ELBO over Gaussians, starting from and regularized
/// towards `nu_prev`.
///
/// Iterations run with Adam in coordinates whitened by `nu_prev`, so the
/// learning rate is measured in prior standard deviations. Iteration `t`
/// draws its common random numbers from `rng.derive(t)`.
pub fn fit_nu(
    nu_prev: &Gaussian,
    problem: &ElboProblem<'_>,
    config: &Stage1Config,
    rng: &SeededRng,
) -> Result<NuFit> {
    let d = nu_prev.dim();
    let mut w = Whitened::origin(d);
    let mut flat = w.to_flat();
    let mut adam = Adam::new(w.len());
    let mut trace = Vec::with_capacity(config.steps);
    let mut flagged = 0;
    let mut initial = f64::NAN;

    for t in 0..config.steps {
        let nu = w.decode(nu_prev)?;
        let est = elbo_estimate(&nu, nu_prev, problem, config.s_mc, true, &rng.derive(t as u64))?;
        if t == 0 {
            initial = est.value;
            if est.n_nonfinite as f64 > 0.9 * config.s_mc as f64 {
                return Ok(NuFit {
                    nu: nu_prev.clone(),
                    terminal_elbo: f64::NEG_INFINITY,
                    terminal_std_error: f64::NAN,
                    initial_elbo: initial,
                    trace: vec![est.value],
                    flagged_iterations: 1,
                    degenerate: true,
                });
            }
        }
        trace.push(est.value);
        if !est.is_finite() {
            flagged += 1;
            continue;
        }
        let grad = w.pull_back(nu_prev, &est.grad_mean, &est.grad_factor);
        let mut trial = flat.clone();
        adam.ascend(&mut trial, &grad, config.lr_at(t));
        if trial.iter().all(|v| v.is_finite()) {
            flat = trial;
            w = Whitened::from_flat(d, &flat);
        } else {
            flagged += 1;
        }
    }
    if config.steps > 0 && flagged == config.steps {
        return Err(AssimError::NumericalDegeneracy(format!(
            "every stage-1 iteration was non-finite (initial elbo {initial})"
        )));
    }
    let nu = w.decode(nu_prev)?;
    let terminal = elbo_estimate(
        &nu,
        nu_prev,
        problem,
        config.final_samples.max(1),
        false,
        &rng.derive(u64::MAX),
    )?;
    Ok(NuFit {
        nu,
        terminal_elbo: terminal.value,
        terminal_std_error: terminal.std_error,
        initial_elbo: initial,
        trace,
        flagged_iterations: flagged,
        degenerate: false,
    })
}
