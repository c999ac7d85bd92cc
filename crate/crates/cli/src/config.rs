use std::collections::HashSet;
use std::path::{Path, PathBuf};

use assim_core::bound::Distance;
use assim_core::experiments::ExperimentId;
use assim_core::mcmc::DramConfig;
use assim_core::orchestrator::FboviConfig;
use assim_core::runner::SummaryOptions;
use assim_core::{AssimError, Result};
use serde::{Deserialize, Serialize};

/// One experiment: which twin system, how many realizations, which methods.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub experiment: ExperimentId,
    #[serde(default = "one")]
    pub realizations: usize,
    /// Base seed; realization `i` uses `seed + i` unless `seeds` is given.
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub seeds: Option<Vec<u64>>,
    /// Overrides the experiment's default number of observations.
    #[serde(default)]
    pub steps: Option<usize>,
    #[serde(default = "default_methods")]
    pub methods: Vec<MethodConfig>,
    #[serde(default = "default_output")]
    pub output_dir: PathBuf,
    #[serde(default)]
    pub summary: SummaryOptions,
    /// FBOVI checkpoint interval; the bound needs every step.
    #[serde(default = "one")]
    pub checkpoint_every: usize,
    #[serde(default)]
    pub bound: BoundConfig,
    #[serde(default)]
    pub oracle: OracleConfig,
}

fn one() -> usize {
    1
}

fn default_methods() -> Vec<MethodConfig> {
    vec![MethodConfig::Fbovi(FboviConfig::default())]
}

fn default_output() -> PathBuf {
    PathBuf::from("out")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "method", rename_all = "kebab-case")]
pub enum MethodConfig {
    Fbovi(FboviConfig),
    Jpf {
        #[serde(default = "default_particles")]
        particles: usize,
    },
    Jukf {},
    Jenkf {
        #[serde(default = "default_members")]
        members: usize,
    },
}

fn default_particles() -> usize {
    10_000
}

fn default_members() -> usize {
    100
}

impl MethodConfig {
    pub fn name(&self) -> &'static str {
        match self {
            Self::Fbovi(_) => "fbovi",
            Self::Jpf { .. } => "jpf",
            Self::Jukf {} => "jukf",
            Self::Jenkf { .. } => "jenkf",
        }
    }

    pub fn default_for(name: &str) -> Result<Self> {
        match name {
            "fbovi" => Ok(Self::Fbovi(FboviConfig::default())),
            "jpf" => Ok(Self::Jpf {
                particles: default_particles(),
            }),
            "jukf" => Ok(Self::Jukf {}),
            "jenkf" => Ok(Self::Jenkf {
                members: default_members(),
            }),
            _ => Err(AssimError::Config(format!("unknown method {name:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BoundConfig {
    pub distance: Distance,
    /// `inf_θ |Γ(θ)|`; defaults to `|Γ|` at the prior mean of θ.
    pub c_tilde: Option<f64>,
    pub psi_samples: usize,
    pub z_samples: usize,
    /// Horizons to report; all assimilated steps when absent.
    pub horizons: Option<Vec<usize>>,
}

impl Default for BoundConfig {
    fn default() -> Self {
        Self {
            distance: Distance::TotalVariation,
            c_tilde: None,
            psi_samples: 2000,
            z_samples: 2000,
            horizons: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OracleConfig {
    pub steps: Vec<usize>,
    /// Realization indices to sample for.
    pub realizations: Vec<usize>,
    pub dram: DramConfig,
}

impl Default for OracleConfig {
    fn default() -> Self {
        Self {
            steps: vec![5, 25, 50],
            realizations: vec![0],
            dram: DramConfig::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| AssimError::Config(format!("cannot read {}: {e}", path.display())))?;
        let config: Self = serde_json::from_str(&text)
            .map_err(|e| AssimError::Config(format!("{}: {e}", path.display())))?;
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<()> {
        if self.realizations == 0 {
            return Err(AssimError::Config("at least one realization is required".into()));
        }
        if let Some(seeds) = &self.seeds {
            if seeds.len() != self.realizations {
                return Err(AssimError::Config(format!(
                    "{} seeds given for {} realizations",
                    seeds.len(),
                    self.realizations
                )));
            }
            if seeds.iter().collect::<HashSet<_>>().len() != seeds.len() {
                return Err(AssimError::Config("seeds must be unique per realization".into()));
            }
        }
        let mut names = HashSet::new();
        for m in &self.methods {
            if !names.insert(m.name()) {
                return Err(AssimError::Config(format!("method {} listed twice", m.name())));
            }
        }
        Ok(())
    }

    pub fn seed_of(&self, realization: usize) -> u64 {
        match &self.seeds {
            Some(s) => s[realization],
            None => self.seed.wrapping_add(realization as u64),
        }
    }

    pub fn data_path(&self, realization: usize) -> PathBuf {
        self.output_dir.join("data").join(format!("realization-{realization:03}.json"))
    }

    pub fn run_path(&self, method: &str, realization: usize) -> PathBuf {
        self.method_dir(method).join(format!("realization-{realization:03}"))
    }

    pub fn method_dir(&self, method: &str) -> PathBuf {
        self.output_dir.join("runs").join(method)
    }

    pub fn oracle_path(&self, realization: usize, step: usize) -> PathBuf {
        self.output_dir
            .join("oracle")
            .join(format!("realization-{realization:03}"))
            .join(format!("k-{step:03}"))
    }

    /// Methods selected on the command line, or all configured ones.
    pub fn select_methods(&self, only: Option<&str>) -> Result<Vec<MethodConfig>> {
        match only {
            None => Ok(self.methods.clone()),
            Some(name) => match self.methods.iter().find(|m| m.name() == name) {
                Some(m) => Ok(vec![m.clone()]),
                None => Ok(vec![MethodConfig::default_for(name)?]),
            },
        }
    }
}
