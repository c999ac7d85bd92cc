use std::fs;

use assim_core::baselines::{JointEnkf, JointPf, JointUkf};
use assim_core::bound::{assemble_bound, grid_distance_scalar, step_quantities, BoundInputs, BoundReport, BoundStep, Distance};
use assim_core::conditional::ConditionalState;
use assim_core::experiments::{experiment, Experiment, ExperimentId};
use assim_core::io::write_json_file;
use assim_core::mcmc::{oracle_posterior, DramOutput, DramStats};
use assim_core::metrics::{metric_rows, write_metrics_csv, RealizationResult};
use assim_core::models::ObservationStream;
use assim_core::orchestrator::{ApproxJointPosterior, Fbovi};
use assim_core::prob::{GridAxis, SeededRng};
use assim_core::regressor::Checkpoint;
use assim_core::runner::{run_estimator, OnlineEstimator, RunDir, RunFailure, RunOptions, RunSummary, SummaryOptions};
use assim_core::{AssimError, Result};
use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::{ExperimentConfig, MethodConfig};

/// What a command left behind that should change the exit status.
#[derive(Debug, Default)]
pub struct Report {
    pub numerical_failures: Vec<String>,
}

/// Model and prior of realization `i`; the data come from a separate stream
/// of the same seed.
fn build(config: &ExperimentConfig, i: usize) -> Result<Experiment> {
    experiment(config.experiment, config.steps, &SeededRng::new(config.seed_of(i), 0))
}

fn load_stream(config: &ExperimentConfig, i: usize) -> Result<ObservationStream> {
    let path = config.data_path(i);
    if !path.exists() {
        return Err(AssimError::Config(format!(
            "{} is missing; run `assim generate` first",
            path.display()
        )));
    }
    let stream = ObservationStream::read_json(&path)?;
    stream.validate()?;
    let seed = config.seed_of(i);
    if stream.header.seed != seed {
        return Err(AssimError::Config(format!(
            "{} was generated with seed {}, the config gives seed {seed}",
            path.display(),
            stream.header.seed
        )));
    }
    Ok(stream)
}

fn observations(stream: &ObservationStream) -> Vec<DVector<f64>> {
    stream
        .observations
        .iter()
        .map(|o| DVector::from_column_slice(&o.y))
        .collect()
}

fn require_linear(id: ExperimentId, what: &str) -> Result<()> {
    if id.is_linear() {
        Ok(())
    } else {
        Err(AssimError::Config(format!(
            "{what} needs a linear experiment and {id} is not linear"
        )))
    }
}

fn echo_config(config: &ExperimentConfig) -> Result<()> {
    fs::create_dir_all(&config.output_dir)?;
    write_json_file(&config.output_dir.join("config.json"), config)
}

fn realizations(config: &ExperimentConfig) -> Vec<usize> {
    (0..config.realizations).collect()
}

pub fn generate(config: &ExperimentConfig) -> Result<Report> {
    echo_config(config)?;
    fs::create_dir_all(config.output_dir.join("data"))?;
    realizations(config).into_par_iter().try_for_each(|i| -> Result<()> {
        let seed = config.seed_of(i);
        let stream = build(config, i)?.generate(&SeededRng::new(seed, 1))?;
        stream.write_json(&config.data_path(i))?;
        eprintln!("generated realization {i} (seed {seed}, {} steps)", stream.len());
        Ok(())
    })?;
    Ok(Report::default())
}

/// Provenance written into each run directory.
#[derive(Serialize)]
struct RunEcho<'a> {
    experiment: ExperimentId,
    realization: usize,
    seed: u64,
    steps: usize,
    method: &'a MethodConfig,
    summary: &'a SummaryOptions,
    checkpoint_every: usize,
}

fn estimator(
    method: &MethodConfig,
    exp: &Experiment,
    seed: u64,
    dir: &RunDir,
) -> Result<Box<dyn OnlineEstimator>> {
    let model = exp.model.clone();
    Ok(match method {
        MethodConfig::Fbovi(cfg) => {
            let est = Fbovi::new(model, &exp.prior, cfg.clone(), seed)?;
            est.posterior.to_checkpoint().save(&dir.checkpoint_path(0))?;
            Box::new(est)
        }
        MethodConfig::Jpf { particles } => Box::new(JointPf::new(model, &exp.prior, *particles, seed)?),
        MethodConfig::Jukf {} => Box::new(JointUkf::new(model, &exp.prior)?),
        MethodConfig::Jenkf { members } => Box::new(JointEnkf::new(model, &exp.prior, *members, seed)?),
    })
}

fn run_one(config: &ExperimentConfig, method: &MethodConfig, i: usize) -> Result<Option<RunFailure>> {
    let seed = config.seed_of(i);
    let exp = build(config, i)?;
    let stream = load_stream(config, i)?;
    let root = config.run_path(method.name(), i);
    if root.exists() {
        fs::remove_dir_all(&root)?;
    }
    let dir = RunDir::create(
        &root,
        &RunEcho {
            experiment: config.experiment,
            realization: i,
            seed,
            steps: stream.len(),
            method,
            summary: &config.summary,
            checkpoint_every: config.checkpoint_every,
        },
    )?;
    let options = RunOptions {
        seed,
        summary: config.summary.clone(),
        checkpoint_every: config.checkpoint_every,
        stop_after: None,
    };
    let failure = match estimator(method, &exp, seed, &dir) {
        Ok(mut est) => run_estimator(est.as_mut(), &mut stream.source(), &options, Some(&dir))?.failure,
        Err(e) if e.is_numerical() => {
            let f = RunFailure {
                step: 0,
                message: e.to_string(),
                numerical: true,
            };
            dir.write_summary(&RunSummary {
                method: method.name().into(),
                steps_completed: 0,
                failure: Some(f.clone()),
                final_record: None,
            })?;
            Some(f)
        }
        Err(e) => return Err(e),
    };
    match &failure {
        Some(f) => eprintln!("{} realization {i}: stopped at step {}: {}", method.name(), f.step, f.message),
        None => eprintln!("{} realization {i}: done", method.name()),
    }
    Ok(failure)
}

/// Baseline failures are recorded and tolerated; an FBOVI failure makes the
/// command report a numerical failure once every realization has run.
pub fn run(config: &ExperimentConfig, only: Option<&str>) -> Result<Report> {
    echo_config(config)?;
    let mut report = Report::default();
    for method in config.select_methods(only)? {
        let failures: Vec<(usize, Option<RunFailure>)> = realizations(config)
            .into_par_iter()
            .map(|i| Ok((i, run_one(config, &method, i)?)))
            .collect::<Result<_>>()?;
        for (i, f) in failures {
            if let (MethodConfig::Fbovi(_), Some(f)) = (&method, f) {
                report
                    .numerical_failures
                    .push(format!("fbovi realization {i} failed at step {}: {}", f.step, f.message));
            }
        }
    }
    Ok(report)
}

/// A realization left out of the aggregate and why.
#[derive(Debug, Serialize, Deserialize)]
struct Flag {
    realization: usize,
    reason: String,
}

/// Aggregates complete runs into `runs/<method>/metrics.csv`; incomplete or
/// missing runs are listed in `metrics-flags.json` beside it.
pub fn metrics(config: &ExperimentConfig, only: Option<&str>) -> Result<Report> {
    for method in config.select_methods(only)? {
        let name = method.name();
        let mut results = Vec::new();
        let mut flags = Vec::new();
        for i in realizations(config) {
            let root = config.run_path(name, i);
            let dir = match RunDir::open(&root) {
                Ok(d) if root.join("summary.json").exists() => d,
                _ => {
                    flags.push(Flag {
                        realization: i,
                        reason: "no completed run".into(),
                    });
                    continue;
                }
            };
            let summary = dir.read_summary()?;
            if let Some(f) = summary.failure {
                flags.push(Flag {
                    realization: i,
                    reason: format!("stopped at step {}: {}", f.step, f.message),
                });
                continue;
            }
            let stream = load_stream(config, i)?;
            results.push(RealizationResult {
                records: dir.read_steps()?,
                reference_states: stream.reference_states,
                true_params: stream.true_params,
            });
        }
        let true_theta = results.first().and_then(|r| r.true_params.clone());
        let rows = metric_rows(&results, true_theta.as_deref())?;
        let out = config.method_dir(name);
        fs::create_dir_all(&out)?;
        write_metrics_csv(&out.join("metrics.csv"), &rows)?;
        write_json_file(&out.join("metrics-flags.json"), &flags)?;
        for f in &flags {
            eprintln!("{name} realization {}: excluded ({})", f.realization, f.reason);
        }
        eprintln!("{name}: {} of {} realizations aggregated", results.len(), config.realizations);
    }
    Ok(Report::default())
}

/// Grid-quadrature distance between the exact posterior and `q_k` next to
/// the bound, for scalar experiments.
#[derive(Debug, Serialize, Deserialize)]
struct DominanceCheck {
    k: usize,
    grid_distance: f64,
    bound: f64,
    bound_std_error: f64,
    dominated: bool,
}

#[derive(Debug, Serialize, Deserialize)]
struct BoundFile {
    experiment: ExperimentId,
    realization: usize,
    seed: u64,
    distance: Distance,
    c_tilde: f64,
    reports: Vec<BoundReport>,
    dominance: Vec<DominanceCheck>,
}

fn elbo_of(diag: &serde_json::Value, step: usize) -> Result<(f64, f64)> {
    let elbo = diag.get("terminal_elbo").and_then(|v| v.as_f64()).ok_or_else(|| {
        AssimError::Config(format!("step {step} has no terminal ELBO; the bound needs an FBOVI run"))
    })?;
    let se = diag.get("elbo_std_error").and_then(|v| v.as_f64()).unwrap_or(0.0);
    Ok((elbo, se))
}

fn scalar_axes(exp: &Experiment, ys: &[DVector<f64>]) -> Result<(GridAxis, GridAxis)> {
    let t = exp.prior.theta.mean()[0];
    let ts = exp.prior.theta.cov()[(0, 0)].sqrt();
    let x = exp.prior.state.mean()[0];
    let xs = exp.prior.state.cov()[(0, 0)].sqrt();
    let (mut lo, mut hi) = (x - 6.0 * xs, x + 6.0 * xs);
    for y in ys {
        lo = lo.min(y[0] - 2.0);
        hi = hi.max(y[0] + 2.0);
    }
    Ok((GridAxis::new(t - 6.0 * ts, t + 6.0 * ts, 401)?, GridAxis::new(lo, hi, 401)?))
}

fn bound_one(config: &ExperimentConfig, i: usize) -> Result<()> {
    let exp = build(config, i)?;
    let stream = load_stream(config, i)?;
    let ys = observations(&stream);
    let dir = RunDir::open(&config.run_path("fbovi", i))?;
    let steps = dir.read_steps()?;
    let last = steps.iter().map(|r| r.step).max().unwrap_or(0);
    if last == 0 {
        return Err(AssimError::Config(format!("fbovi realization {i} has no assimilated steps")));
    }
    let mut posts = Vec::with_capacity(last + 1);
    for j in 0..=last {
        let path = dir.checkpoint_path(j);
        if !path.exists() {
            return Err(AssimError::Config(format!(
                "{} is missing; the bound needs an FBOVI run with checkpoint_every = 1",
                path.display()
            )));
        }
        posts.push(ApproxJointPosterior::from_checkpoint(Checkpoint::load(&path)?));
    }
    let mut bound_steps = Vec::with_capacity(last);
    for j in 1..=last {
        let rec = steps
            .iter()
            .find(|r| r.step == j)
            .ok_or_else(|| AssimError::Config(format!("step record {j} missing")))?;
        let (elbo, elbo_std_error) = elbo_of(&rec.diagnostics, j)?;
        bound_steps.push(BoundStep {
            nu: &posts[j].nu,
            cond: &posts[j].cond as &dyn ConditionalState,
            elbo,
            elbo_std_error,
            y: &ys[j - 1],
        });
    }
    let bc = &config.bound;
    let c_tilde = match bc.c_tilde {
        Some(c) => c,
        None => exp.model.obs_cov(exp.prior.theta.mean()).determinant(),
    };
    let inputs = BoundInputs {
        model: exp.model.as_ref(),
        nu0: &posts[0].nu,
        cond0: &posts[0].cond,
        steps: bound_steps,
        c_tilde,
        distance: bc.distance,
        psi_samples: bc.psi_samples,
        z_samples: bc.z_samples,
    };
    let seed = config.seed_of(i);
    let q = step_quantities(&inputs, &SeededRng::new(seed, 2))?;
    let horizons = bc.horizons.clone().unwrap_or_else(|| (1..=last).collect());
    let reports = horizons
        .iter()
        .map(|&k| assemble_bound(&q, k, bc.distance, exp.model.obs_dim(), c_tilde))
        .collect::<Result<Vec<_>>>()?;
    let scalar = exp.model.state_dim() == 1 && exp.model.param_dim() == 1;
    let mut dominance = Vec::new();
    if scalar {
        for rep in &reports {
            let k = rep.k;
            let (ta, xa) = scalar_axes(&exp, &ys[..k])?;
            let d = grid_distance_scalar(
                exp.model.as_ref(),
                &exp.prior,
                &ys[..k],
                &posts[k].nu,
                &posts[k].cond,
                ta,
                xa,
                bc.distance,
            )?;
            dominance.push(DominanceCheck {
                k,
                grid_distance: d,
                bound: rep.total,
                bound_std_error: rep.total_std_error,
                dominated: d <= rep.total + rep.total_std_error,
            });
        }
    }
    let file = BoundFile {
        experiment: config.experiment,
        realization: i,
        seed,
        distance: bc.distance,
        c_tilde,
        reports,
        dominance,
    };
    write_json_file(&dir.root().join("bound-report.json"), &file)?;
    eprintln!("bound realization {i}: {} horizons", file.reports.len());
    Ok(())
}

pub fn bound(config: &ExperimentConfig) -> Result<Report> {
    require_linear(config.experiment, "the error bound")?;
    realizations(config).into_par_iter().try_for_each(|i| bound_one(config, i))?;
    Ok(Report::default())
}

/// Independent prior draws in the oracle's layout: state rows, then θ.
fn prior_samples(exp: &Experiment, count: usize, rng: &SeededRng) -> Result<DramOutput> {
    let mut r = rng.clone();
    let x = exp.prior.state.sample(count, &mut r)?;
    let t = exp.prior.theta.sample(count, &mut r)?;
    let (n, d) = (x.nrows(), t.nrows());
    let mut samples = DMatrix::zeros(n + d, count);
    samples.rows_mut(0, n).copy_from(&x);
    samples.rows_mut(n, d).copy_from(&t);
    Ok(DramOutput {
        samples,
        stats: DramStats {
            draws: count,
            kept: count,
            accepted_tier1: count,
            accepted_tier2: 0,
            acceptance_rate: 1.0,
            adaptations: 0,
        },
    })
}

fn oracle_one(config: &ExperimentConfig, i: usize, k: usize, ys: &[DVector<f64>]) -> Result<Option<String>> {
    let exp = build(config, i)?;
    let rng = SeededRng::new(config.seed_of(i), 3).derive(k as u64);
    let out = if k == 0 {
        prior_samples(&exp, config.oracle.dram.kept_draws(), &rng)
    } else {
        oracle_posterior(exp.model.as_ref(), &exp.prior, &ys[..k], &config.oracle.dram, &rng)
    };
    match out {
        Ok(out) => {
            out.write(&config.oracle_path(i, k))?;
            eprintln!(
                "oracle realization {i} k = {k}: {} draws kept, acceptance {:.3}",
                out.stats.kept, out.stats.acceptance_rate
            );
            Ok(None)
        }
        Err(e) if e.is_numerical() => Ok(Some(format!("oracle realization {i} k = {k}: {e}"))),
        Err(e) => Err(e),
    }
}

/// Reference samples of `p(x_k, θ | y_1..y_k)` for the configured steps.
/// Steps past the end of the data are skipped with a note.
pub fn oracle(config: &ExperimentConfig) -> Result<Report> {
    require_linear(config.experiment, "the reference sampler")?;
    config.oracle.dram.validate()?;
    echo_config(config)?;
    let mut jobs = Vec::new();
    for &i in &config.oracle.realizations {
        if i >= config.realizations {
            return Err(AssimError::Config(format!(
                "oracle realization {i} outside 0..{}",
                config.realizations
            )));
        }
        let ys = observations(&load_stream(config, i)?);
        for &k in &config.oracle.steps {
            if k > ys.len() {
                eprintln!("oracle realization {i}: skipping k = {k}, the data end at {}", ys.len());
            } else {
                jobs.push((i, k, ys.clone()));
            }
        }
    }
    let failures: Vec<Option<String>> = jobs
        .into_par_iter()
        .map(|(i, k, ys)| oracle_one(config, i, k, &ys))
        .collect::<Result<_>>()?;
    Ok(Report {
        numerical_failures: failures.into_iter().flatten().collect(),
    })
}
