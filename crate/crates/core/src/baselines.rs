//! Augmented-state comparison methods: joint bootstrap particle filter,
//! joint UKF and joint EnKF. θ is appended to the state and given
//! random-walk dynamics.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, AssimError, Result};
use crate::filters::{ensemble_moments, perturbed_obs_update, unscented_step, UtParams};
use crate::metrics::{cov_rows, MarginalSummary, PredictiveSummary, StepRecord};
use crate::models::{noise_factor, Prior, StateSpaceModel};
use crate::orchestrator::propagate_samples;
use crate::prob::gaussian::logpdf_factor;
use crate::prob::{Gaussian, SeededRng};
use crate::runner::{OnlineEstimator, SummaryOptions};

/// Random-walk variance of θ in the joint particle filter.
pub const PF_THETA_WALK: f64 = 1e-4;
/// Random-walk variance of θ in the joint Gaussian filters.
pub const GAUSSIAN_THETA_WALK: f64 = 1e-8;

/// `[x; θ] ↦ [Φ(x; θ); θ]` with noise `blockdiag(Σ, q_θ·I)`.
///
/// Covariances that depend on θ are evaluated at `reference_theta` when the
/// augmented model is used as a plain state-space model; the particle filter
/// evaluates them per particle instead.
#[derive(Clone)]
pub struct AugmentedModel {
    pub inner: Arc<dyn StateSpaceModel>,
    pub theta_walk: f64,
    pub reference_theta: DVector<f64>,
}

impl AugmentedModel {
    pub fn new(inner: Arc<dyn StateSpaceModel>, theta_walk: f64, reference_theta: DVector<f64>) -> Result<Self> {
        check_dim("augmented reference theta", inner.param_dim(), reference_theta.len())?;
        if !(theta_walk >= 0.0) {
            return Err(AssimError::InvalidArgument(format!("theta walk variance {theta_walk}")));
        }
        Ok(Self {
            inner,
            theta_walk,
            reference_theta,
        })
    }

    pub fn n(&self) -> usize {
        self.inner.state_dim()
    }

    pub fn d(&self) -> usize {
        self.inner.param_dim()
    }

    /// Splits an augmented vector into `(x, θ)`.
    pub fn split(&self, z: &DVector<f64>) -> (DVector<f64>, DVector<f64>) {
        let n = self.n();
        (z.rows(0, n).into_owned(), z.rows(n, self.d()).into_owned())
    }

    pub fn join(&self, x: &DVector<f64>, theta: &DVector<f64>) -> DVector<f64> {
        let mut z = DVector::zeros(self.n() + self.d());
        z.rows_mut(0, self.n()).copy_from(x);
        z.rows_mut(self.n(), self.d()).copy_from(theta);
        z
    }

    /// Independent Gaussian over `[x; θ]` from the product prior.
    pub fn joint_prior(&self, prior: &Prior) -> Result<Gaussian> {
        let (n, d) = (self.n(), self.d());
        let mut mean = DVector::zeros(n + d);
        mean.rows_mut(0, n).copy_from(prior.state.mean());
        mean.rows_mut(n, d).copy_from(prior.theta.mean());
        let mut l = DMatrix::zeros(n + d, n + d);
        l.view_mut((0, 0), (n, n)).copy_from(prior.state.cov_factor());
        l.view_mut((n, n), (d, d)).copy_from(prior.theta.cov_factor());
        Gaussian::new(mean, l)
    }

    /// `[x; θ] ↦ [Φ(x; θ) + w; θ + u]` with the noise drawn from `rng`.
    fn propagate(&self, z: &DVector<f64>, rng: &mut SeededRng) -> Result<DVector<f64>> {
        let (x, theta) = self.split(z);
        let l = noise_factor(&self.inner.process_cov(&theta))?;
        let mut w = DVector::zeros(self.n());
        rng.fill_standard_normal(w.as_mut_slice());
        let mut u = DVector::zeros(self.d());
        rng.fill_standard_normal(u.as_mut_slice());
        let x_next = self.inner.transition(&x, &theta) + l * w;
        Ok(self.join(&x_next, &(theta + u * self.theta_walk.sqrt())))
    }
}

impl StateSpaceModel for AugmentedModel {
    fn id(&self) -> String {
        format!("augmented-{}", self.inner.id())
    }

    fn state_dim(&self) -> usize {
        self.n() + self.d()
    }

    fn obs_dim(&self) -> usize {
        self.inner.obs_dim()
    }

    fn param_dim(&self) -> usize {
        0
    }

    fn transition(&self, z: &DVector<f64>, _: &DVector<f64>) -> DVector<f64> {
        let (x, theta) = self.split(z);
        self.join(&self.inner.transition(&x, &theta), &theta)
    }

    fn observe(&self, z: &DVector<f64>, _: &DVector<f64>) -> DVector<f64> {
        let (x, theta) = self.split(z);
        self.inner.observe(&x, &theta)
    }

    fn process_cov(&self, _: &DVector<f64>) -> DMatrix<f64> {
        let (n, d) = (self.n(), self.d());
        let mut q = DMatrix::zeros(n + d, n + d);
        q.view_mut((0, 0), (n, n)).copy_from(&self.inner.process_cov(&self.reference_theta));
        for i in n..n + d {
            q[(i, i)] = self.theta_walk;
        }
        q
    }

    fn obs_cov(&self, _: &DVector<f64>) -> DMatrix<f64> {
        self.inner.obs_cov(&self.reference_theta)
    }
}

/// Outcome of one particle-filter step.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct PfStepInfo {
    /// Effective sample size after reweighting, before any resampling.
    pub ess: f64,
    pub resampled: bool,
    /// ESS fell to the degeneracy floor.
    pub degenerate: bool,
}

/// Weighted augmented particles, one per column.
#[derive(Debug, Clone, PartialEq)]
pub struct ParticleEnsemble {
    pub particles: DMatrix<f64>,
    pub weights: Vec<f64>,
    pub ess: f64,
}

impl ParticleEnsemble {
    pub fn from_prior(aug: &AugmentedModel, prior: &Prior, n: usize, rng: &SeededRng) -> Result<Self> {
        if n == 0 {
            return Err(AssimError::InvalidArgument("particle filter needs at least 1 particle".into()));
        }
        let particles = aug.joint_prior(prior)?.sample(n, &mut rng.clone())?;
        Ok(Self {
            particles,
            weights: vec![1.0 / n as f64; n],
            ess: n as f64,
        })
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    pub fn weighted_mean(&self) -> DVector<f64> {
        let first = self.particles.column(0).into_owned();
        let mut acc = DVector::zeros(self.particles.nrows());
        for (c, w) in self.particles.column_iter().zip(&self.weights) {
            acc += (c - &first) * *w;
        }
        first + acc
    }

    pub fn weighted_cov(&self) -> DMatrix<f64> {
        let mean = self.weighted_mean();
        let dim = self.particles.nrows();
        let mut cov = DMatrix::zeros(dim, dim);
        for (c, w) in self.particles.column_iter().zip(&self.weights) {
            let d = c - &mean;
            cov += &d * d.transpose() * *w;
        }
        cov
    }
}

/// `1 / Σ wᵢ²`.
pub fn effective_sample_size(weights: &[f64]) -> f64 {
    1.0 / weights.iter().map(|w| w * w).sum::<f64>()
}

/// Normalizes log-weights by subtracting the maximum. Fails when no weight
/// is finite.
pub fn normalize_log_weights(log_w: &[f64], step: usize) -> Result<Vec<f64>> {
    let max = log_w.iter().cloned().filter(|v| v.is_finite()).fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return Err(AssimError::Collapse { step, ess: 0.0 });
    }
    let w: Vec<f64> = log_w
        .iter()
        .map(|v| if v.is_finite() { (v - max).exp() } else { 0.0 })
        .collect();
    let total: f64 = w.iter().sum();
    Ok(w.into_iter().map(|v| v / total).collect())
}

/// Systematic resampling: `n` indices from one uniform draw.
pub fn systematic_resample(weights: &[f64], n: usize, rng: &mut SeededRng) -> Vec<usize> {
    let u0 = rng.uniform() / n as f64;
    let mut out = Vec::with_capacity(n);
    let mut cum = weights[0];
    let mut j = 0;
    for i in 0..n {
        let u = u0 + i as f64 / n as f64;
        while u > cum && j + 1 < weights.len() {
            j += 1;
            cum += weights[j];
        }
        out.push(j);
    }
    out
}

/// Particle-filter tuning.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PfConfig {
    /// Resample when `ESS < resample_fraction·N`.
    pub resample_fraction: f64,
    /// A step is logged as degenerate when `ESS < degeneracy_ess`.
    pub degeneracy_ess: f64,
}

impl Default for PfConfig {
    fn default() -> Self {
        Self {
            resample_fraction: 0.5,
            degeneracy_ess: DEGENERACY_ESS,
        }
    }
}

/// Fewer effective particles than this leaves the weighted moments
/// meaningless.
pub const DEGENERACY_ESS: f64 = 10.0;

/// Bootstrap step: propagate every particle with member `i`'s noise from
/// `rng.derive2(0, i)`, reweight by `p_N(y; h(x, θ), Γ(θ))`, and resample
/// systematically (`rng.derive(1)`) when the ESS drops below the trigger.
pub fn joint_pf_step(
    ens: &ParticleEnsemble,
    aug: &AugmentedModel,
    y: &DVector<f64>,
    step: usize,
    config: &PfConfig,
    rng: &SeededRng,
) -> Result<(ParticleEnsemble, PfStepInfo)> {
    if ens.is_empty() {
        return Err(AssimError::InvalidArgument("particle filter needs at least 1 particle".into()));
    }
    check_dim("particle observation", aug.obs_dim(), y.len())?;
    let n = ens.len();
    let moved: Vec<(DVector<f64>, f64)> = (0..n)
        .into_par_iter()
        .map(|i| {
            let z = aug.propagate(&ens.particles.column(i).into_owned(), &mut rng.derive2(0, i as u64))?;
            let (x, theta) = aug.split(&z);
            let h = aug.inner.observe(&x, &theta);
            let gamma = aug.inner.obs_cov(&theta);
            let lw = match crate::prob::linalg::cholesky_jittered(&gamma, "particle likelihood") {
                Ok(f) if z.iter().all(|v| v.is_finite()) => logpdf_factor(y, &h, &f.lower),
                _ => f64::NEG_INFINITY,
            };
            Ok((z, ens.weights[i].ln() + lw))
        })
        .collect::<Result<_>>()?;
    let log_w: Vec<f64> = moved.iter().map(|(_, l)| *l).collect();
    let weights = normalize_log_weights(&log_w, step)?;
    let ess = effective_sample_size(&weights);
    let cols: Vec<DVector<f64>> = moved.into_iter().map(|(z, _)| z).collect();
    let particles = DMatrix::from_columns(&cols);
    let info = PfStepInfo {
        ess,
        resampled: ess < config.resample_fraction * n as f64,
        degenerate: ess < config.degeneracy_ess,
    };
    let next = if info.resampled {
        let idx = systematic_resample(&weights, n, &mut rng.derive(1));
        ParticleEnsemble {
            particles: particles.select_columns(&idx),
            weights: vec![1.0 / n as f64; n],
            ess: n as f64,
        }
    } else {
        ParticleEnsemble { particles, weights, ess }
    };
    Ok((next, info))
}

/// Joint UKF update of the augmented Gaussian (α = 0.5, β = 2, κ = 0).
pub fn joint_ukf_step(g: &Gaussian, aug: &AugmentedModel, y: &DVector<f64>) -> Result<Gaussian> {
    check_dim("joint ukf prior", aug.state_dim(), g.dim())?;
    unscented_step(aug, &DVector::zeros(0), g, y, UtParams::default())
}

/// Perturbed-observation EnKF on persistent augmented members (columns).
pub fn joint_enkf_step(
    members: &DMatrix<f64>,
    aug: &AugmentedModel,
    y: &DVector<f64>,
    rng: &SeededRng,
) -> Result<DMatrix<f64>> {
    let m = members.ncols();
    if m < 2 {
        return Err(AssimError::InvalidArgument("ensemble needs at least 2 members".into()));
    }
    check_dim("joint enkf members", aug.state_dim(), members.nrows())?;
    let cols: Vec<DVector<f64>> = (0..m)
        .into_par_iter()
        .map(|j| aug.propagate(&members.column(j).into_owned(), &mut rng.derive2(0, j as u64)))
        .collect::<Result<_>>()?;
    let xf = DMatrix::from_columns(&cols);
    let hx_cols: Vec<DVector<f64>> = cols.iter().map(|z| aug.observe(z, &DVector::zeros(0))).collect();
    let hx = DMatrix::from_columns(&hx_cols);
    if xf.iter().chain(hx.iter()).any(|v| !v.is_finite()) {
        return Err(AssimError::Divergence {
            context: "joint ensemble propagation".into(),
            theta: Vec::new(),
        });
    }
    let obs_l = noise_factor(&aug.inner.obs_cov(&aug.reference_theta))?;
    perturbed_obs_update(&xf, &hx, y, &obs_l, &mut rng.derive(1))
}

fn theta_block(aug: &AugmentedModel, z: &DMatrix<f64>) -> (DMatrix<f64>, DMatrix<f64>) {
    let (n, d) = (aug.n(), aug.d());
    (z.rows(n, d).into_owned(), z.rows(0, n).into_owned())
}

fn record_from_samples(
    aug: &AugmentedModel,
    step: usize,
    z: &DMatrix<f64>,
    options: &SummaryOptions,
    rng: &SeededRng,
) -> Result<StepRecord> {
    let (theta, x) = theta_block(aug, z);
    let (tm, tc) = ensemble_moments(&theta);
    let prediction = if options.predict {
        let p = propagate_samples(aug.inner.as_ref(), &theta, &x, rng)?;
        Some(PredictiveSummary::from_samples(&p.x, p.diverged))
    } else {
        None
    };
    Ok(StepRecord {
        step,
        theta_mean: tm.iter().cloned().collect(),
        theta_cov: cov_rows(&tc),
        state: MarginalSummary::from_samples(&x, options.level),
        prediction,
        diagnostics: serde_json::Value::Null,
    })
}

/// Joint particle filter as an online estimator.
pub struct JointPf {
    pub aug: AugmentedModel,
    pub ensemble: ParticleEnsemble,
    pub config: PfConfig,
    pub step: usize,
    /// Steps at which the degeneracy floor was hit.
    pub degenerate_steps: Vec<usize>,
}

impl JointPf {
    /// Particles drawn from the product prior with `rng(seed).derive(7)`.
    pub fn new(model: Arc<dyn StateSpaceModel>, prior: &Prior, particles: usize, seed: u64) -> Result<Self> {
        let aug = AugmentedModel::new(model, PF_THETA_WALK, prior.theta.mean().clone())?;
        let ensemble = ParticleEnsemble::from_prior(&aug, prior, particles, &SeededRng::new(seed, 0).derive(7))?;
        Ok(Self {
            aug,
            ensemble,
            config: PfConfig::default(),
            step: 0,
            degenerate_steps: Vec::new(),
        })
    }
}

impl OnlineEstimator for JointPf {
    fn method(&self) -> &'static str {
        "jpf"
    }

    fn step_index(&self) -> usize {
        self.step
    }

    fn assimilate(&mut self, k: usize, y: &DVector<f64>, rng: &SeededRng) -> Result<serde_json::Value> {
        let (next, info) = joint_pf_step(&self.ensemble, &self.aug, y, k, &self.config, rng)?;
        self.ensemble = next;
        self.step = k;
        if info.degenerate {
            self.degenerate_steps.push(k);
        }
        Ok(serde_json::to_value(info)?)
    }

    fn summarize(&self, options: &SummaryOptions, rng: &SeededRng) -> Result<StepRecord> {
        let (n, d) = (self.aug.n(), self.aug.d());
        let mean = self.ensemble.weighted_mean();
        let cov = self.ensemble.weighted_cov();
        let x = self.ensemble.particles.rows(0, n).into_owned();
        let prediction = if options.predict {
            let idx = systematic_resample(&self.ensemble.weights, options.samples.max(1), &mut rng.derive(0));
            let z = self.ensemble.particles.select_columns(&idx);
            let (theta, xs) = theta_block(&self.aug, &z);
            let p = propagate_samples(self.aug.inner.as_ref(), &theta, &xs, &rng.derive(1))?;
            Some(PredictiveSummary::from_samples(&p.x, p.diverged))
        } else {
            None
        };
        Ok(StepRecord {
            step: self.step,
            theta_mean: mean.rows(n, d).iter().cloned().collect(),
            theta_cov: cov_rows(&cov.view((n, n), (d, d)).into_owned()),
            state: MarginalSummary::from_weighted(&x, &self.ensemble.weights, options.level),
            prediction,
            diagnostics: serde_json::Value::Null,
        })
    }
}

/// Joint UKF as an online estimator.
pub struct JointUkf {
    pub aug: AugmentedModel,
    pub posterior: Gaussian,
    pub step: usize,
}

impl JointUkf {
    pub fn new(model: Arc<dyn StateSpaceModel>, prior: &Prior) -> Result<Self> {
        let aug = AugmentedModel::new(model, GAUSSIAN_THETA_WALK, prior.theta.mean().clone())?;
        let posterior = aug.joint_prior(prior)?;
        Ok(Self { aug, posterior, step: 0 })
    }
}

impl OnlineEstimator for JointUkf {
    fn method(&self) -> &'static str {
        "jukf"
    }

    fn step_index(&self) -> usize {
        self.step
    }

    fn assimilate(&mut self, k: usize, y: &DVector<f64>, _rng: &SeededRng) -> Result<serde_json::Value> {
        self.posterior = joint_ukf_step(&self.posterior, &self.aug, y)?;
        self.step = k;
        Ok(serde_json::Value::Null)
    }

    fn summarize(&self, options: &SummaryOptions, rng: &SeededRng) -> Result<StepRecord> {
        let (n, d) = (self.aug.n(), self.aug.d());
        let theta = self.posterior.marginal(n, d)?;
        let state = self.posterior.marginal(0, n)?;
        let prediction = if options.predict {
            let z = self.posterior.sample(options.samples.max(2), &mut rng.derive(0))?;
            let (th, x) = theta_block(&self.aug, &z);
            let p = propagate_samples(self.aug.inner.as_ref(), &th, &x, &rng.derive(1))?;
            Some(PredictiveSummary::from_samples(&p.x, p.diverged))
        } else {
            None
        };
        Ok(StepRecord {
            step: self.step,
            theta_mean: theta.mean().iter().cloned().collect(),
            theta_cov: cov_rows(&theta.cov()),
            state: MarginalSummary::from_gaussian(&state, options.level),
            prediction,
            diagnostics: serde_json::Value::Null,
        })
    }
}

/// Joint EnKF as an online estimator.
pub struct JointEnkf {
    pub aug: AugmentedModel,
    pub members: DMatrix<f64>,
    pub step: usize,
}

impl JointEnkf {
    /// Members drawn from the product prior with `rng(seed).derive(7)`.
    pub fn new(model: Arc<dyn StateSpaceModel>, prior: &Prior, members: usize, seed: u64) -> Result<Self> {
        if members < 2 {
            return Err(AssimError::InvalidArgument("ensemble needs at least 2 members".into()));
        }
        let aug = AugmentedModel::new(model, GAUSSIAN_THETA_WALK, prior.theta.mean().clone())?;
        let members = aug
            .joint_prior(prior)?
            .sample(members, &mut SeededRng::new(seed, 0).derive(7))?;
        Ok(Self { aug, members, step: 0 })
    }
}

impl OnlineEstimator for JointEnkf {
    fn method(&self) -> &'static str {
        "jenkf"
    }

    fn step_index(&self) -> usize {
        self.step
    }

    fn assimilate(&mut self, k: usize, y: &DVector<f64>, rng: &SeededRng) -> Result<serde_json::Value> {
        self.members = joint_enkf_step(&self.members, &self.aug, y, rng)?;
        self.step = k;
        Ok(serde_json::Value::Null)
    }

    fn summarize(&self, options: &SummaryOptions, rng: &SeededRng) -> Result<StepRecord> {
        record_from_samples(&self.aug, self.step, &self.members, options, rng)
    }
}
