//! Uniform driver for online estimators: folds an estimator over an
//! observation source, records per-step summaries and writes the run
//! directory.

use std::fs::{self, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::error::{AssimError, Result};
use crate::io;
use crate::metrics::StepRecord;
use crate::models::ObservationSource;
use crate::prob::SeededRng;
use crate::regressor::Checkpoint;

/// An online joint estimator: consumes one observation at a time.
pub trait OnlineEstimator {
    fn method(&self) -> &'static str;

    /// Index of the last assimilated observation (0 before any).
    fn step_index(&self) -> usize;

    /// Assimilates `y_k`; returns step diagnostics.
    fn assimilate(&mut self, k: usize, y: &DVector<f64>, rng: &SeededRng) -> Result<serde_json::Value>;

    /// Marginal summaries of the current approximation and the one-step
    /// prediction from it.
    fn summarize(&self, options: &SummaryOptions, rng: &SeededRng) -> Result<StepRecord>;

    fn checkpoint(&self) -> Option<Checkpoint> {
        None
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SummaryOptions {
    /// Joint samples behind the state marginals and the prediction.
    pub samples: usize,
    pub level: f64,
    pub predict: bool,
}

impl Default for SummaryOptions {
    fn default() -> Self {
        Self {
            samples: 2000,
            level: 0.95,
            predict: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunOptions {
    pub seed: u64,
    pub summary: SummaryOptions,
    /// Write a checkpoint every this many steps (0 = never).
    pub checkpoint_every: usize,
    /// Stop after this step, as if the stream ended.
    pub stop_after: Option<usize>,
}

impl Default for RunOptions {
    fn default() -> Self {
        Self {
            seed: 0,
            summary: SummaryOptions::default(),
            checkpoint_every: 10,
            stop_after: None,
        }
    }
}

/// Why a run stopped early.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunFailure {
    pub step: usize,
    pub message: String,
    pub numerical: bool,
}

#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub records: Vec<StepRecord>,
    pub failure: Option<RunFailure>,
    /// Wall-clock seconds of each assimilated step, in order.
    pub step_seconds: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub method: String,
    pub steps_completed: usize,
    pub failure: Option<RunFailure>,
    pub final_record: Option<StepRecord>,
}

/// Step `k` of a run seeded with `seed` uses `rng(seed).derive2(k, 0)` to
/// assimilate and `derive2(k, 1)` to summarize.
pub fn step_rng(seed: u64, k: usize, purpose: u64) -> SeededRng {
    SeededRng::new(seed, 0).derive2(k as u64, purpose)
}

/// Folds `est` over `source`. Observations at or before the estimator's
/// current step are skipped, so a restored estimator resumes where it left
/// off. A numerical failure ends the run and is reported in the outcome;
/// other errors are returned.
pub fn run_estimator(
    est: &mut dyn OnlineEstimator,
    source: &mut dyn ObservationSource,
    options: &RunOptions,
    dir: Option<&RunDir>,
) -> Result<RunOutcome> {
    let mut outcome = RunOutcome {
        records: Vec::new(),
        failure: None,
        step_seconds: Vec::new(),
    };
    let start_step = est.step_index();
    if let Some(d) = dir {
        d.truncate_steps(start_step)?;
    }
    if start_step == 0 {
        let rec = est.summarize(&options.summary, &step_rng(options.seed, 0, 1))?;
        if let Some(d) = dir {
            d.append_step(&rec)?;
        }
        outcome.records.push(rec);
    }
    while let Some((k, y)) = source.next_observation() {
        if k <= est.step_index() {
            continue;
        }
        if options.stop_after.is_some_and(|s| k > s) {
            break;
        }
        let t0 = Instant::now();
        let result = est
            .assimilate(k, &y, &step_rng(options.seed, k, 0))
            .and_then(|diag| {
                let mut rec = est.summarize(&options.summary, &step_rng(options.seed, k, 1))?;
                rec.diagnostics = diag;
                Ok(rec)
            });
        let rec = match result {
            Ok(rec) => rec,
            Err(e) if e.is_numerical() => {
                outcome.failure = Some(RunFailure {
                    step: k,
                    message: e.to_string(),
                    numerical: true,
                });
                break;
            }
            Err(e) => return Err(e),
        };
        let secs = t0.elapsed().as_secs_f64();
        outcome.step_seconds.push(secs);
        if let Some(d) = dir {
            d.append_step(&rec)?;
            d.append_timing(k, secs)?;
            if options.checkpoint_every > 0 && k % options.checkpoint_every == 0 {
                if let Some(c) = est.checkpoint() {
                    c.save(&d.checkpoint_path(k))?;
                }
            }
        }
        outcome.records.push(rec);
    }
    if let Some(d) = dir {
        if outcome.failure.is_some() {
            if let Some(c) = est.checkpoint() {
                c.save(&d.checkpoint_path(c.step))?;
            }
        }
        d.write_summary(&RunSummary {
            method: est.method().into(),
            steps_completed: est.step_index(),
            failure: outcome.failure.clone(),
            final_record: outcome.records.last().cloned(),
        })?;
    }
    Ok(outcome)
}

/// Run record directory: `config.json`, `steps.jsonl`, `checkpoints/`,
/// `summary.json`, and the `timings.jsonl` sidecar (the only file whose
/// contents vary between identical runs).
#[derive(Debug, Clone)]
pub struct RunDir {
    root: PathBuf,
}

impl RunDir {
    /// Creates the directory and writes the config echo.
    pub fn create<C: Serialize>(root: &Path, config: &C) -> Result<Self> {
        fs::create_dir_all(root.join("checkpoints"))?;
        io::write_json_file(&root.join("config.json"), config)?;
        Ok(Self { root: root.to_path_buf() })
    }

    pub fn open(root: &Path) -> Result<Self> {
        if !root.join("config.json").exists() {
            return Err(AssimError::Config(format!("{} is not a run directory", root.display())));
        }
        Ok(Self { root: root.to_path_buf() })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn checkpoint_path(&self, step: usize) -> PathBuf {
        self.root.join("checkpoints").join(format!("step-{step:06}.ckpt"))
    }

    pub fn latest_checkpoint(&self) -> Result<Option<PathBuf>> {
        let dir = self.root.join("checkpoints");
        if !dir.exists() {
            return Ok(None);
        }
        let mut best: Option<(usize, PathBuf)> = None;
        for entry in fs::read_dir(dir)? {
            let path = entry?.path();
            let step = path
                .file_name()
                .and_then(|n| n.to_str())
                .and_then(|n| n.strip_prefix("step-")?.strip_suffix(".ckpt")?.parse::<usize>().ok());
            if let Some(s) = step {
                if best.as_ref().is_none_or(|(b, _)| s > *b) {
                    best = Some((s, path));
                }
            }
        }
        Ok(best.map(|(_, p)| p))
    }

    fn append_line(&self, name: &str, line: &str) -> Result<()> {
        let mut f = OpenOptions::new().create(true).append(true).open(self.root.join(name))?;
        writeln!(f, "{line}")?;
        Ok(())
    }

    pub fn append_step(&self, rec: &StepRecord) -> Result<()> {
        self.append_line("steps.jsonl", &io::to_json_line(rec)?)
    }

    fn append_timing(&self, step: usize, seconds: f64) -> Result<()> {
        self.append_line(
            "timings.jsonl",
            &serde_json::json!({"step": step, "seconds": seconds}).to_string(),
        )
    }

    pub fn read_steps(&self) -> Result<Vec<StepRecord>> {
        let path = self.root.join("steps.jsonl");
        if !path.exists() {
            return Ok(Vec::new());
        }
        BufReader::new(fs::File::open(path)?)
            .lines()
            .filter(|l| l.as_ref().map_or(true, |s| !s.trim().is_empty()))
            .map(|l| Ok(serde_json::from_str(&l?)?))
            .collect()
    }

    /// Drops step records after `step` (used when resuming).
    fn truncate_steps(&self, step: usize) -> Result<()> {
        let keep: Vec<StepRecord> = self.read_steps()?.into_iter().filter(|r| r.step <= step).collect();
        let mut f = fs::File::create(self.root.join("steps.jsonl"))?;
        for r in &keep {
            writeln!(f, "{}", io::to_json_line(r)?)?;
        }
        Ok(())
    }

    pub fn write_summary(&self, summary: &RunSummary) -> Result<()> {
        io::write_json_file(&self.root.join("summary.json"), summary)
    }

    pub fn read_summary(&self) -> Result<RunSummary> {
        io::read_json_file(&self.root.join("summary.json"))
    }
}
