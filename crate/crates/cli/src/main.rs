//! `assim`: twin-experiment harness. Generates data, runs the estimators,
//! aggregates metrics, evaluates the error bound and samples the reference
//! posterior, all driven by one JSON experiment config.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use assim_core::AssimError;
use clap::{Parser, Subcommand};

use crate::config::ExperimentConfig;

#[derive(Parser)]
#[command(name = "assim", version, about = "Online joint parameter-state estimation experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate twin data for every realization.
    Generate(Args),
    /// Run the configured methods on the generated data.
    Run(Args),
    /// Aggregate RMSE and coverage into metrics.csv per method.
    Metrics(Args),
    /// Evaluate the error bound on FBOVI runs (linear experiments only).
    Bound(Args),
    /// Sample the reference posterior with DRAM (linear experiments only).
    Oracle(Args),
}

#[derive(clap::Args)]
struct Args {
    #[arg(long)]
    config: PathBuf,
    /// Base seed; replaces the seeds in the config.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory; replaces `output_dir` in the config.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Restrict `run` and `metrics` to one of fbovi, jpf, jukf, jenkf.
    #[arg(long)]
    method: Option<String>,
    /// Worker threads for the realization fan-out.
    #[arg(long)]
    workers: Option<usize>,
}

impl Args {
    fn load(&self) -> assim_core::Result<ExperimentConfig> {
        let mut config = ExperimentConfig::load(&self.config)?;
        if let Some(seed) = self.seed {
            config.seed = seed;
            config.seeds = None;
        }
        if let Some(out) = &self.out {
            config.output_dir = out.clone();
        }
        if let Some(m) = &self.method {
            config::MethodConfig::default_for(m)?;
        }
        Ok(config)
    }
}

fn exit_code(e: &AssimError) -> u8 {
    match e {
        AssimError::Io(_) => 1,
        e if e.is_numerical() => 3,
        _ => 2,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let (Command::Generate(args)
    | Command::Run(args)
    | Command::Metrics(args)
    | Command::Bound(args)
    | Command::Oracle(args)) = &cli.command;
    let result = args.load().and_then(|config| {
        let mut pool = rayon::ThreadPoolBuilder::new();
        if let Some(w) = args.workers {
            if w == 0 {
                return Err(AssimError::Config("--workers must be positive".into()));
            }
            pool = pool.num_threads(w);
        }
        let pool = pool
            .build()
            .map_err(|e| AssimError::Config(format!("thread pool: {e}")))?;
        let method = args.method.as_deref();
        pool.install(|| match &cli.command {
            Command::Generate(_) => commands::generate(&config),
            Command::Run(_) => commands::run(&config, method),
            Command::Metrics(_) => commands::metrics(&config, method),
            Command::Bound(_) => commands::bound(&config),
            Command::Oracle(_) => commands::oracle(&config),
        })
    });
    match result {
        Ok(report) if report.numerical_failures.is_empty() => ExitCode::SUCCESS,
        Ok(report) => {
            for f in &report.numerical_failures {
                eprintln!("error: {f}");
            }
            ExitCode::from(3)
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
