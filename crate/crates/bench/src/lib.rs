//! Shared fixtures for the benchmarks.

use assim_core::experiments::{experiment, Experiment, ExperimentId};
use assim_core::prob::SeededRng;
use nalgebra::DVector;

/// An experiment with its observations, built from seed 0.
pub struct Fixture {
    pub exp: Experiment,
    pub ys: Vec<DVector<f64>>,
    pub theta: DVector<f64>,
}

pub fn fixture(id: ExperimentId) -> Fixture {
    let exp = experiment(id, None, &SeededRng::new(0, 0)).expect("experiment");
    let stream = exp.generate(&SeededRng::new(0, 1)).expect("data");
    let ys = stream
        .observations
        .iter()
        .map(|o| DVector::from_column_slice(&o.y))
        .collect();
    let theta = exp.prior.theta.mean().clone();
    Fixture { exp, ys, theta }
}
