use std::path::Path;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use super::{noise_factor, StateSpaceModel};
use crate::error::{AssimError, Result};
use crate::io;
use crate::prob::SeededRng;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StreamHeader {
    pub model_id: String,
    pub n: usize,
    pub r: usize,
    pub d_theta: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObsRecord {
    pub k: usize,
    pub y: Vec<f64>,
}

/// Ordered observations plus the hidden reference trajectory used for scoring.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObservationStream {
    pub header: StreamHeader,
    pub observations: Vec<ObsRecord>,
    /// True `x_k`, aligned with `observations`.
    pub reference_states: Vec<Vec<f64>>,
    pub true_params: Option<Vec<f64>>,
    /// True state at k = 0 (after burn-in).
    #[serde(default)]
    pub initial_state: Option<Vec<f64>>,
}

impl ObservationStream {
    pub fn len(&self) -> usize {
        self.observations.len()
    }

    pub fn is_empty(&self) -> bool {
        self.observations.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        let mut last: Option<usize> = None;
        for rec in &self.observations {
            if let Some(prev) = last {
                if rec.k <= prev {
                    return Err(AssimError::InvalidArgument(format!(
                        "step indices not strictly increasing at k = {}",
                        rec.k
                    )));
                }
            }
            if rec.y.len() != self.header.r {
                return Err(AssimError::DimensionMismatch {
                    context: "observation record",
                    expected: self.header.r,
                    found: rec.y.len(),
                });
            }
            last = Some(rec.k);
        }
        if !self.reference_states.is_empty() && self.reference_states.len() != self.observations.len() {
            return Err(AssimError::InvalidArgument(
                "reference states not aligned with observations".into(),
            ));
        }
        Ok(())
    }

    pub fn reference_state(&self, idx: usize) -> DVector<f64> {
        DVector::from_column_slice(&self.reference_states[idx])
    }

    pub fn source(&self) -> StreamSource<'_> {
        StreamSource {
            stream: self,
            next: 0,
        }
    }

    pub fn write_json(&self, path: &Path) -> Result<()> {
        io::write_json_file(path, self)
    }

    pub fn read_json(path: &Path) -> Result<Self> {
        let s: ObservationStream = io::read_json_file(path)?;
        s.validate()?;
        Ok(s)
    }
}

/// Sequential access to observations; each record is handed out once.
pub trait ObservationSource {
    fn next_observation(&mut self) -> Option<(usize, DVector<f64>)>;
}

pub struct StreamSource<'a> {
    stream: &'a ObservationStream,
    next: usize,
}

impl ObservationSource for StreamSource<'_> {
    fn next_observation(&mut self) -> Option<(usize, DVector<f64>)> {
        let rec = self.stream.observations.get(self.next)?;
        self.next += 1;
        Some((rec.k, DVector::from_column_slice(&rec.y)))
    }
}

/// The data-generating system of a twin experiment.
#[derive(Clone)]
pub struct TruthSpec {
    pub model: Arc<dyn StateSpaceModel>,
    pub theta: DVector<f64>,
    pub x0: DVector<f64>,
    /// Inject `N(0, Σ)` process noise into the truth trajectory.
    pub process_noise: bool,
    /// Replaces the model's Γ for data generation (e.g. zero for noiseless).
    pub obs_cov: Option<DMatrix<f64>>,
    pub true_params: Option<Vec<f64>>,
    pub experiment_id: String,
}

/// Simulates the truth, discards `burn_in` transitions, then records
/// `steps` reference states and noisy observations.
pub fn generate_twin_data(
    truth: &TruthSpec,
    steps: usize,
    burn_in: usize,
    rng: &SeededRng,
) -> Result<ObservationStream> {
    if steps == 0 {
        return Err(AssimError::InvalidArgument("steps must be >= 1".into()));
    }
    let model = truth.model.as_ref();
    let theta = &truth.theta;
    let n = model.state_dim();
    let r = model.obs_dim();
    let process_l = if truth.process_noise {
        noise_factor(&model.process_cov(theta))?
    } else {
        DMatrix::zeros(n, n)
    };
    let obs_cov = truth.obs_cov.clone().unwrap_or_else(|| model.obs_cov(theta));
    let obs_l = noise_factor(&obs_cov)?;
    let mut process_rng = rng.derive(1);
    let mut obs_rng = rng.derive(2);

    let mut x = truth.x0.clone();
    let mut advance = |x: &DVector<f64>, step: usize| -> Result<DVector<f64>> {
        let mut next = model.transition(x, theta);
        if truth.process_noise {
            let mut z = DVector::zeros(n);
            process_rng.fill_standard_normal(z.as_mut_slice());
            next += &process_l * z;
        }
        if next.iter().any(|v| !v.is_finite()) {
            return Err(AssimError::BlowUp { step });
        }
        Ok(next)
    };
    for s in 0..burn_in {
        x = advance(&x, s + 1)?;
    }
    let initial = x.clone();
    let mut observations = Vec::with_capacity(steps);
    let mut reference_states = Vec::with_capacity(steps);
    for k in 1..=steps {
        x = advance(&x, burn_in + k)?;
        let mut z = DVector::zeros(r);
        obs_rng.fill_standard_normal(z.as_mut_slice());
        let y = model.observe(&x, theta) + &obs_l * z;
        observations.push(ObsRecord {
            k,
            y: y.iter().cloned().collect(),
        });
        reference_states.push(x.iter().cloned().collect());
    }
    Ok(ObservationStream {
        header: StreamHeader {
            model_id: truth.experiment_id.clone(),
            n,
            r,
            d_theta: truth.true_params.as_ref().map_or(model.param_dim(), |p| p.len()),
            seed: rng.id().seed,
        },
        observations,
        reference_states,
        true_params: truth.true_params.clone(),
        initial_state: Some(initial.iter().cloned().collect()),
    })
}
