//! The recursive two-stage loop: per observation, fit `ν_k` (Stage 1), then
//! regress `ρ_k(· | θ)` onto θ-conditioned filter updates (Stage 2).

use std::sync::Arc;
use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::conditional::ConditionalState;
use crate::error::{AssimError, Result};
use crate::filters::FilterBackend;
use crate::metrics::{cov_rows, MarginalSummary, PredictiveSummary, StepRecord};
use crate::models::{noise_factor, ObservationSource, Prior, StateSpaceModel};
use crate::prob::{Gaussian, SeededRng};
use crate::regressor::{
    build_targets, eval_conditional, fit_conditional, pretrain_constant, Checkpoint, ConditionalGaussianState,
    InputScaling, LossKind, NetConfig, TrainConfig,
};
use crate::runner::{run_estimator, step_rng, OnlineEstimator, RunDir, RunOptions, RunOutcome, SummaryOptions};
use crate::vi::{fit_nu, ElboProblem, LikelihoodBackend, Stage1Config};

/// State dimension up to which the unscented backend and the KL loss are the
/// defaults.
pub const SMALL_STATE_DIM: usize = 12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FboviConfig {
    /// Stage-2 target filter; chosen from the model when absent.
    pub filter: Option<FilterBackend>,
    /// Stage-1 likelihood path; chosen from the model when absent.
    pub likelihood: Option<LikelihoodBackend>,
    /// Stage-2 loss; KL for small states, surrogate otherwise, when absent.
    pub loss: Option<LossKind>,
    /// θ-samples per Stage-2 batch (N).
    pub n_targets: usize,
    /// Ensemble size for the automatically chosen ensemble backend (M).
    pub ensemble_members: usize,
    pub stage1: Stage1Config,
    pub stage2: TrainConfig,
    pub net: NetConfig,
    pub pretrain_steps: usize,
    pub pretrain_samples: usize,
}

impl Default for FboviConfig {
    fn default() -> Self {
        Self {
            filter: None,
            likelihood: None,
            loss: None,
            n_targets: 256,
            ensemble_members: 100,
            stage1: Stage1Config::default(),
            stage2: TrainConfig::default(),
            net: NetConfig::default(),
            pretrain_steps: 500,
            pretrain_samples: 256,
        }
    }
}

/// Backends after automatic selection and compatibility checks.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ResolvedBackends {
    pub filter: FilterBackend,
    pub likelihood: LikelihoodBackend,
    pub loss: LossKind,
}

impl FboviConfig {
    pub fn resolve(&self, model: &dyn StateSpaceModel) -> Result<ResolvedBackends> {
        let n = model.state_dim();
        let filter = self.filter.unwrap_or(if model.is_linear() {
            FilterBackend::Kalman
        } else if n <= SMALL_STATE_DIM {
            FilterBackend::Unscented
        } else {
            FilterBackend::Enkf {
                members: self.ensemble_members,
            }
        });
        if filter == FilterBackend::Kalman && !model.is_linear() {
            return Err(AssimError::Config(format!(
                "kalman backend requires a linear model, {} is not",
                model.id()
            )));
        }
        if let FilterBackend::Enkf { members } = filter {
            if members < 2 {
                return Err(AssimError::Config("ensemble needs at least 2 members".into()));
            }
        }
        let likelihood = self.likelihood.unwrap_or_else(|| LikelihoodBackend::auto(model));
        likelihood.check(model)?;
        let loss = self
            .loss
            .unwrap_or(if n <= SMALL_STATE_DIM { LossKind::Kl } else { LossKind::Surrogate });
        if self.n_targets == 0 {
            return Err(AssimError::Config("n_targets must be >= 1".into()));
        }
        Ok(ResolvedBackends {
            filter,
            likelihood,
            loss,
        })
    }
}

/// Deterministic per-step diagnostics.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct StepDiagnostics {
    /// Terminal ELBO `ε_k`.
    pub terminal_elbo: f64,
    pub elbo_std_error: f64,
    pub initial_elbo: f64,
    pub stage1_degenerate: bool,
    pub stage1_flagged_iterations: usize,
    pub stage2_initial_loss: f64,
    pub stage2_loss: f64,
    pub stage2_lr_halvings: usize,
    pub targets_dropped: usize,
    pub rank_deficient: bool,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct StepTiming {
    pub stage1_seconds: f64,
    pub stage2_seconds: f64,
}

/// `q_k(X, θ) = ρ_k(X | θ)·ν_k(θ)`.
#[derive(Debug, Clone, PartialEq)]
pub struct ApproxJointPosterior {
    pub nu: Gaussian,
    pub cond: ConditionalGaussianState,
    pub step: usize,
    pub diagnostics: StepDiagnostics,
    pub timing: StepTiming,
}

impl ApproxJointPosterior {
    pub fn to_checkpoint(&self) -> Checkpoint {
        Checkpoint {
            step: self.step,
            nu: self.nu.clone(),
            state: self.cond.clone(),
            meta: serde_json::to_value(&self.diagnostics).unwrap_or_default(),
        }
    }

    pub fn from_checkpoint(c: Checkpoint) -> Self {
        Self {
            diagnostics: serde_json::from_value(c.meta).unwrap_or_default(),
            nu: c.nu,
            cond: c.state,
            step: c.step,
            timing: StepTiming::default(),
        }
    }
}

/// Step-0 approximation: `ν_0` is the θ-prior and `ρ_0(· | θ)` is trained
/// to the state prior for every θ.
pub fn initial_posterior(prior: &Prior, config: &FboviConfig, rng: &SeededRng) -> Result<ApproxJointPosterior> {
    let mut init_rng = rng.derive(0);
    let mut cond = ConditionalGaussianState::new(
        prior.theta.dim(),
        prior.state.dim(),
        InputScaling::from_gaussian(&prior.theta),
        &config.net,
        &mut init_rng,
    )?;
    pretrain_constant(
        &mut cond,
        &prior.state,
        &prior.theta,
        config.pretrain_samples,
        config.pretrain_steps,
        &rng.derive(1),
    )?;
    Ok(ApproxJointPosterior {
        nu: prior.theta.clone(),
        cond,
        step: 0,
        diagnostics: StepDiagnostics::default(),
        timing: StepTiming::default(),
    })
}

fn at_step(step: usize, e: AssimError) -> AssimError {
    if e.is_numerical() && !matches!(e, AssimError::StepFailure { .. }) {
        AssimError::StepFailure {
            step,
            reason: e.to_string(),
        }
    } else {
        e
    }
}

/// Assimilates `y` into `prev`: Stage 1 fits `ν_k` from `rng.derive(1)`,
/// Stage 2 draws targets from `rng.derive(2)` and trains with
/// `rng.derive(3)`.
pub fn fbovi_step(
    prev: &ApproxJointPosterior,
    y: &DVector<f64>,
    model: &dyn StateSpaceModel,
    config: &FboviConfig,
    rng: &SeededRng,
) -> Result<ApproxJointPosterior> {
    let backends = config.resolve(model)?;
    let step = prev.step + 1;
    if y.len() != model.obs_dim() {
        return Err(AssimError::DimensionMismatch {
            context: "observation",
            expected: model.obs_dim(),
            found: y.len(),
        });
    }

    let t0 = Instant::now();
    let problem = ElboProblem {
        model,
        prev_cond: &prev.cond,
        y,
        backend: backends.likelihood,
        fd_step: config.stage1.fd_step,
    };
    let fit = fit_nu(&prev.nu, &problem, &config.stage1, &rng.derive(1)).map_err(|e| at_step(step, e))?;
    let stage1_seconds = t0.elapsed().as_secs_f64();

    let t1 = Instant::now();
    let batch = build_targets(
        &fit.nu,
        &prev.cond,
        model,
        y,
        backends.filter,
        config.n_targets,
        &rng.derive(2),
    )
    .map_err(|e| at_step(step, e))?;
    let mut cond = prev.cond.clone();
    cond.step = step;
    let report = fit_conditional(&mut cond, &batch, backends.loss, &config.stage2, &rng.derive(3))
        .map_err(|e| at_step(step, e))?;
    let stage2_seconds = t1.elapsed().as_secs_f64();

    Ok(ApproxJointPosterior {
        nu: fit.nu,
        cond,
        step,
        diagnostics: StepDiagnostics {
            terminal_elbo: fit.terminal_elbo,
            elbo_std_error: fit.terminal_std_error,
            initial_elbo: fit.initial_elbo,
            stage1_degenerate: fit.degenerate,
            stage1_flagged_iterations: fit.flagged_iterations,
            stage2_initial_loss: report.initial_loss,
            stage2_loss: report.final_loss,
            stage2_lr_halvings: report.lr_halvings,
            targets_dropped: batch.dropped,
            rank_deficient: batch.rank_deficient,
        },
        timing: StepTiming {
            stage1_seconds,
            stage2_seconds,
        },
    })
}

/// Paired draws from `q_k`: column `i` of `x` is drawn from `ρ_k(· | θ_i)`.
#[derive(Debug, Clone, PartialEq)]
pub struct JointSamples {
    pub theta: DMatrix<f64>,
    pub x: DMatrix<f64>,
}

/// `θ ∼ ν_k` from `rng.derive(0)`, then `x_i ∼ ρ_k(· | θ_i)` from
/// `rng.derive2(1, i)`.
pub fn sample_joint(post: &ApproxJointPosterior, n: usize, rng: &SeededRng) -> Result<JointSamples> {
    let theta = post.nu.sample(n, &mut rng.derive(0))?;
    let cols: Vec<DVector<f64>> = (0..n)
        .into_par_iter()
        .map(|i| {
            let g = eval_conditional(&post.cond, &theta.column(i).into_owned())?;
            Ok(g.sample_one(&mut rng.derive2(1, i as u64)))
        })
        .collect::<Result<_>>()?;
    let x = if cols.is_empty() {
        DMatrix::zeros(post.cond.state_dim, 0)
    } else {
        DMatrix::from_columns(&cols)
    };
    Ok(JointSamples { theta, x })
}

/// One-step predictive sample `x̂_i = Φ(x_i; θ_i) + w_i` from joint draws;
/// non-finite propagations are dropped and counted.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictiveSamples {
    pub theta: DMatrix<f64>,
    pub x: DMatrix<f64>,
    pub diverged: usize,
}

/// Joint draws from `rng.derive(0)`; process noise of sample `i` from
/// `rng.derive2(2, i)`.
pub fn predict_next(
    post: &ApproxJointPosterior,
    model: &dyn StateSpaceModel,
    n: usize,
    rng: &SeededRng,
) -> Result<PredictiveSamples> {
    let joint = sample_joint(post, n, &rng.derive(0))?;
    propagate_samples(model, &joint.theta, &joint.x, rng)
}

pub(crate) fn propagate_samples(
    model: &dyn StateSpaceModel,
    theta: &DMatrix<f64>,
    x: &DMatrix<f64>,
    rng: &SeededRng,
) -> Result<PredictiveSamples> {
    let dim = model.state_dim();
    let out: Vec<Option<(DVector<f64>, DVector<f64>)>> = (0..x.ncols())
        .into_par_iter()
        .map(|i| {
            let th = theta.column(i).into_owned();
            let l = noise_factor(&model.process_cov(&th))?;
            let mut z = DVector::zeros(dim);
            rng.derive2(2, i as u64).fill_standard_normal(z.as_mut_slice());
            let next = model.transition(&x.column(i).into_owned(), &th) + l * z;
            Ok(next.iter().all(|v| v.is_finite()).then_some((th, next)))
        })
        .collect::<Result<_>>()?;
    let diverged = out.iter().filter(|o| o.is_none()).count();
    let (ths, xs): (Vec<_>, Vec<_>) = out.into_iter().flatten().unzip();
    Ok(PredictiveSamples {
        theta: if ths.is_empty() {
            DMatrix::zeros(theta.nrows(), 0)
        } else {
            DMatrix::from_columns(&ths)
        },
        x: if xs.is_empty() { DMatrix::zeros(dim, 0) } else { DMatrix::from_columns(&xs) },
        diverged,
    })
}

/// FBOVI as an [`OnlineEstimator`].
pub struct Fbovi {
    pub model: Arc<dyn StateSpaceModel>,
    pub config: FboviConfig,
    pub posterior: ApproxJointPosterior,
}

impl Fbovi {
    /// Starts from the prior; pretraining draws from `step_rng(seed, 0, 0)`.
    pub fn new(model: Arc<dyn StateSpaceModel>, prior: &Prior, config: FboviConfig, seed: u64) -> Result<Self> {
        config.resolve(model.as_ref())?;
        let posterior = initial_posterior(prior, &config, &step_rng(seed, 0, 0))?;
        Ok(Self {
            model,
            config,
            posterior,
        })
    }

    pub fn from_checkpoint(model: Arc<dyn StateSpaceModel>, config: FboviConfig, c: Checkpoint) -> Result<Self> {
        config.resolve(model.as_ref())?;
        Ok(Self {
            model,
            config,
            posterior: ApproxJointPosterior::from_checkpoint(c),
        })
    }
}

/// Summary of `q_k` and its one-step prediction.
pub fn summarize_posterior(
    post: &ApproxJointPosterior,
    model: &dyn StateSpaceModel,
    options: &SummaryOptions,
    rng: &SeededRng,
) -> Result<StepRecord> {
    let joint = sample_joint(post, options.samples.max(2), rng)?;
    let prediction = if options.predict {
        let p = propagate_samples(model, &joint.theta, &joint.x, rng)?;
        Some(PredictiveSummary::from_samples(&p.x, p.diverged))
    } else {
        None
    };
    Ok(StepRecord {
        step: post.step,
        theta_mean: post.nu.mean().iter().cloned().collect(),
        theta_cov: cov_rows(&post.nu.cov()),
        state: MarginalSummary::from_samples(&joint.x, options.level),
        prediction,
        diagnostics: serde_json::Value::Null,
    })
}

impl OnlineEstimator for Fbovi {
    fn method(&self) -> &'static str {
        "fbovi"
    }

    fn step_index(&self) -> usize {
        self.posterior.step
    }

    fn assimilate(&mut self, k: usize, y: &DVector<f64>, rng: &SeededRng) -> Result<serde_json::Value> {
        let mut next = fbovi_step(&self.posterior, y, self.model.as_ref(), &self.config, rng)?;
        next.step = k;
        next.cond.step = k;
        self.posterior = next;
        Ok(serde_json::to_value(&self.posterior.diagnostics)?)
    }

    fn summarize(&self, options: &SummaryOptions, rng: &SeededRng) -> Result<StepRecord> {
        summarize_posterior(&self.posterior, self.model.as_ref(), options, rng)
    }

    fn checkpoint(&self) -> Option<Checkpoint> {
        Some(self.posterior.to_checkpoint())
    }
}

/// Runs FBOVI over `source` from the prior, or from the latest checkpoint in
/// `dir` when `resume` is set.
pub fn run_stream(
    model: Arc<dyn StateSpaceModel>,
    prior: &Prior,
    config: &FboviConfig,
    source: &mut dyn ObservationSource,
    options: &RunOptions,
    dir: Option<&RunDir>,
    resume: bool,
) -> Result<(RunOutcome, ApproxJointPosterior)> {
    let checkpoint = match (resume, dir) {
        (true, Some(d)) => d.latest_checkpoint()?.map(|p| Checkpoint::load(&p)).transpose()?,
        _ => None,
    };
    let mut est = match checkpoint {
        Some(c) => Fbovi::from_checkpoint(model, config.clone(), c)?,
        None => Fbovi::new(model, prior, config.clone(), options.seed)?,
    };
    let outcome = run_estimator(&mut est, source, options, dir)?;
    Ok((outcome, est.posterior))
}

/// `ρ_k(· | θ)` as a [`ConditionalState`] view for callers that only need
/// the conditional.
pub fn conditional_view(post: &ApproxJointPosterior) -> &dyn ConditionalState {
    &post.cond
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::experiments::{experiment, ExperimentId};
    use crate::filters::kalman_predict;
    use crate::models::{CovOverride, ObservationStream};
    use crate::runner::OnlineEstimator;
    use std::cell::Cell;

    fn quick_config() -> FboviConfig {
        FboviConfig {
            n_targets: 128,
            stage1: Stage1Config {
                steps: 100,
                s_mc: 16,
                final_samples: 64,
                ..Stage1Config::default()
            },
            stage2: TrainConfig {
                epochs: 30,
                ..TrainConfig::default()
            },
            net: NetConfig {
                hidden: vec![16, 16],
                ..NetConfig::default()
            },
            pretrain_steps: 200,
            pretrain_samples: 64,
            ..FboviConfig::default()
        }
    }

    fn pendulum() -> crate::experiments::Experiment {
        experiment(ExperimentId::PendulumDyn, Some(6), &SeededRng::new(1, 0)).unwrap()
    }

    #[test]
    fn initial_conditional_is_the_state_prior() {
        let e = pendulum();
        let post = initial_posterior(&e.prior, &quick_config(), &SeededRng::new(2, 0)).unwrap();
        assert_eq!(post.nu, e.prior.theta);
        for th in [[0.0, 0.0], [1.0, -1.0], [-1.5, 0.7]] {
            let g = eval_conditional(&post.cond, &DVector::from_row_slice(&th)).unwrap();
            assert!(crate::prob::gaussian_kl(&g, &e.prior.state).unwrap() < 5e-3);
        }
    }

    #[test]
    fn uninformative_observation_gives_prediction_only() {
        let e = pendulum();
        let model = CovOverride::new(e.model.clone()).obs_scaled(1e10);
        let config = FboviConfig {
            n_targets: 256,
            stage2: TrainConfig::default(),
            net: NetConfig::default(),
            ..quick_config()
        };
        let prior = Prior {
            theta: Gaussian::isotropic(DVector::from_vec(vec![0.7, -0.6]), 0.04).unwrap(),
            state: e.prior.state.clone(),
        };
        let prev = initial_posterior(&prior, &config, &SeededRng::new(3, 0)).unwrap();
        let y = DVector::from_element(1, 0.7);
        let next = fbovi_step(&prev, &y, &model, &config, &SeededRng::new(4, 0)).unwrap();
        assert!((next.nu.mean() - prev.nu.mean()).amax() < 0.05);
        assert!((next.nu.cov() - prev.nu.cov()).amax() < 0.1);
        for th in [[0.6, -0.5], [0.9, -0.8]] {
            let th = DVector::from_row_slice(&th);
            let prior = eval_conditional(&prev.cond, &th).unwrap();
            let (m, c) = kalman_predict(&model, &th, &prior).unwrap();
            let expected = Gaussian::from_cov(m, &c).unwrap();
            let got = eval_conditional(&next.cond, &th).unwrap();
            let kl = crate::prob::gaussian_kl(&got, &expected).unwrap();
            assert!(kl < 0.05, "kl {kl}");
        }
    }

    #[test]
    fn one_step_is_deterministic() {
        let e = pendulum();
        let config = quick_config();
        let prev = initial_posterior(&e.prior, &config, &SeededRng::new(5, 0)).unwrap();
        let y = DVector::from_element(1, 0.4);
        let a = fbovi_step(&prev, &y, e.model.as_ref(), &config, &SeededRng::new(6, 0)).unwrap();
        let b = fbovi_step(&prev, &y, e.model.as_ref(), &config, &SeededRng::new(6, 0)).unwrap();
        assert_eq!(a.to_checkpoint().to_bytes().unwrap(), b.to_checkpoint().to_bytes().unwrap());
    }

    #[test]
    fn constant_conditional_gives_single_gaussian_marginal() {
        let e = pendulum();
        let post = initial_posterior(&e.prior, &quick_config(), &SeededRng::new(7, 0)).unwrap();
        let s = sample_joint(&post, 20_000, &SeededRng::new(8, 0)).unwrap();
        let mean = s.x.column_mean();
        assert!((mean - e.prior.state.mean()).amax() < 0.06);
        let theta_mean = s.theta.column_mean();
        assert!(theta_mean.amax() < 0.03);
    }

    #[test]
    fn theta_moments_match_nu() {
        let e = pendulum();
        let mut post = initial_posterior(&e.prior, &quick_config(), &SeededRng::new(9, 0)).unwrap();
        post.nu = Gaussian::from_cov(
            DVector::from_vec(vec![0.9, -0.8]),
            &DMatrix::from_row_slice(2, 2, &[0.04, 0.01, 0.01, 0.09]),
        )
        .unwrap();
        let s = sample_joint(&post, 100_000, &SeededRng::new(10, 0)).unwrap();
        let m = s.theta.column_mean();
        assert!((&m - post.nu.mean()).amax() < 0.02);
        let centered = &s.theta - &m * DVector::from_element(s.theta.ncols(), 1.0).transpose();
        let cov = &centered * centered.transpose() / (s.theta.ncols() as f64 - 1.0);
        assert!((cov - post.nu.cov()).amax() < 0.02);
        let again = sample_joint(&post, 100, &SeededRng::new(10, 0)).unwrap();
        assert_eq!(again, sample_joint(&post, 100, &SeededRng::new(10, 0)).unwrap());
    }

    #[test]
    fn identity_dynamics_without_noise_predict_the_samples() {
        let e = pendulum();
        let model = crate::models::AffineLinearModel::with_fixed_observation(
            "id",
            DMatrix::identity(2, 2),
            vec![DMatrix::zeros(2, 2), DMatrix::zeros(2, 2)],
            DMatrix::from_row_slice(1, 2, &[1.0, 0.0]),
            DMatrix::zeros(2, 2),
            DMatrix::identity(1, 1),
        );
        let post = initial_posterior(&e.prior, &quick_config(), &SeededRng::new(11, 0)).unwrap();
        let rng = SeededRng::new(12, 0);
        let p = predict_next(&post, &model, 50, &rng).unwrap();
        let joint = sample_joint(&post, 50, &rng.derive(0)).unwrap();
        assert_eq!(p.x, joint.x);
        assert_eq!(p.diverged, 0);
    }

    struct Counting<'a> {
        stream: &'a ObservationStream,
        next: usize,
        reads: &'a [Cell<usize>],
    }

    impl ObservationSource for Counting<'_> {
        fn next_observation(&mut self) -> Option<(usize, DVector<f64>)> {
            let rec = self.stream.observations.get(self.next)?;
            self.reads[self.next].set(self.reads[self.next].get() + 1);
            self.next += 1;
            Some((rec.k, DVector::from_column_slice(&rec.y)))
        }
    }

    #[test]
    fn each_observation_is_read_once() {
        let e = pendulum();
        let stream = e.generate(&SeededRng::new(13, 0)).unwrap();
        let reads: Vec<Cell<usize>> = (0..stream.len()).map(|_| Cell::new(0)).collect();
        let mut src = Counting {
            stream: &stream,
            next: 0,
            reads: &reads,
        };
        let options = RunOptions {
            summary: SummaryOptions {
                samples: 200,
                ..SummaryOptions::default()
            },
            ..RunOptions::default()
        };
        let (outcome, post) =
            run_stream(e.model.clone(), &e.prior, &quick_config(), &mut src, &options, None, false).unwrap();
        assert!(reads.iter().all(|c| c.get() == 1));
        assert_eq!(outcome.records.len(), stream.len() + 1);
        assert_eq!(post.step, stream.len());
    }

    #[test]
    fn empty_stream_echoes_the_prior() {
        let e = pendulum();
        let mut stream = e.generate(&SeededRng::new(14, 0)).unwrap();
        stream.observations.clear();
        stream.reference_states.clear();
        let options = RunOptions {
            summary: SummaryOptions {
                samples: 100,
                ..SummaryOptions::default()
            },
            ..RunOptions::default()
        };
        let (outcome, post) = run_stream(
            e.model.clone(),
            &e.prior,
            &quick_config(),
            &mut stream.source(),
            &options,
            None,
            false,
        )
        .unwrap();
        assert_eq!(outcome.records.len(), 1);
        assert_eq!(outcome.records[0].step, 0);
        assert_eq!(post.nu, e.prior.theta);
        assert_eq!(outcome.records[0].theta_mean, vec![0.0, 0.0]);
    }

    #[test]
    fn resume_reproduces_uninterrupted_run() {
        let e = pendulum();
        let stream = e.generate(&SeededRng::new(15, 0)).unwrap();
        let config = quick_config();
        let options = RunOptions {
            seed: 16,
            summary: SummaryOptions {
                samples: 100,
                ..SummaryOptions::default()
            },
            checkpoint_every: 2,
            stop_after: None,
        };
        let tmp = tempfile::tempdir().unwrap();
        let full_dir = RunDir::create(&tmp.path().join("full"), &config).unwrap();
        let (_, full) = run_stream(
            e.model.clone(),
            &e.prior,
            &config,
            &mut stream.source(),
            &options,
            Some(&full_dir),
            false,
        )
        .unwrap();

        let part_dir = RunDir::create(&tmp.path().join("part"), &config).unwrap();
        let halted = RunOptions {
            stop_after: Some(4),
            ..options.clone()
        };
        run_stream(e.model.clone(), &e.prior, &config, &mut stream.source(), &halted, Some(&part_dir), false)
            .unwrap();
        let (_, resumed) = run_stream(
            e.model.clone(),
            &e.prior,
            &config,
            &mut stream.source(),
            &options,
            Some(&part_dir),
            true,
        )
        .unwrap();
        assert_eq!(
            resumed.to_checkpoint().to_bytes().unwrap(),
            full.to_checkpoint().to_bytes().unwrap()
        );
        let a = std::fs::read(full_dir.root().join("steps.jsonl")).unwrap();
        let b = std::fs::read(part_dir.root().join("steps.jsonl")).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn kalman_backend_rejected_for_nonlinear_model() {
        let model = crate::models::lorenz96_model(crate::models::Integrator::Rk4, 0.5).unwrap();
        let config = FboviConfig {
            filter: Some(FilterBackend::Kalman),
            ..FboviConfig::default()
        };
        assert!(matches!(config.resolve(&model), Err(AssimError::Config(_))));
        let auto = FboviConfig::default().resolve(&model).unwrap();
        assert_eq!(auto.filter, FilterBackend::Unscented);
        assert_eq!(auto.loss, LossKind::Kl);
        let big = crate::models::convection_diffusion_model(crate::models::DiffScheme::Central);
        let auto = FboviConfig::default().resolve(&big).unwrap();
        assert_eq!(auto.filter, FilterBackend::Enkf { members: 100 });
        assert_eq!(auto.loss, LossKind::Surrogate);
    }

    #[test]
    fn estimator_reports_its_step() {
        let e = pendulum();
        let mut est = Fbovi::new(e.model.clone(), &e.prior, quick_config(), 1).unwrap();
        assert_eq!(est.step_index(), 0);
        est.assimilate(1, &DVector::from_element(1, 0.3), &SeededRng::new(1, 1)).unwrap();
        assert_eq!(est.step_index(), 1);
        assert_eq!(est.method(), "fbovi");
    }
}
