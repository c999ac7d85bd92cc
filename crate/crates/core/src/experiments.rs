//! Registry of the twin experiments: learning model, prior, truth system and
//! horizon for each id.

use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::error::{AssimError, Result};
use crate::models::{
    convection_diffusion_model, generate_twin_data, lorenz96_model, pendulum_model, AffineLinearModel, DiffScheme,
    Integrator, ObservationStream, PendulumVariant, Prior, StateSpaceModel, TruthSpec, PENDULUM_TRUE_A,
};
use crate::prob::{Gaussian, SeededRng};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ExperimentId {
    /// Pendulum with unknown `A(θ) = [[θ₁, 0.0986], [θ₂, θ₁]]`, `H = [1, 0]`.
    PendulumDyn,
    /// Pendulum with unknown `A₁₂ = θ₁` and `H = diag(θ₂, 1)`.
    PendulumDynobs,
    /// Lorenz-96 learned with RK4, σ² = 0.5.
    LorenzCorrect,
    /// Lorenz-96 learned with forward Euler, σ² = 2.
    LorenzMisspec,
    /// Convection–diffusion: upwind truth, central-difference learning model.
    Convdiff,
    /// Scalar state, scalar θ linear toy small enough for grid quadrature.
    ScalarToy,
}

impl ExperimentId {
    pub const ALL: [ExperimentId; 6] = [
        Self::PendulumDyn,
        Self::PendulumDynobs,
        Self::LorenzCorrect,
        Self::LorenzMisspec,
        Self::Convdiff,
        Self::ScalarToy,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            Self::PendulumDyn => "pendulum-dyn",
            Self::PendulumDynobs => "pendulum-dynobs",
            Self::LorenzCorrect => "lorenz-correct",
            Self::LorenzMisspec => "lorenz-misspec",
            Self::Convdiff => "convdiff",
            Self::ScalarToy => "scalar-toy",
        }
    }

    /// Linear learning model (Kalman targets, closed-form likelihood, bound).
    pub fn is_linear(&self) -> bool {
        matches!(self, Self::PendulumDyn | Self::PendulumDynobs | Self::ScalarToy)
    }
}

impl fmt::Display for ExperimentId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ExperimentId {
    type Err = AssimError;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|id| id.as_str() == s)
            .ok_or_else(|| AssimError::Config(format!("unknown experiment id {s:?}")))
    }
}

/// A fully specified twin experiment.
#[derive(Clone)]
pub struct Experiment {
    pub id: ExperimentId,
    /// Model used by the estimators.
    pub model: Arc<dyn StateSpaceModel>,
    pub prior: Prior,
    pub truth: TruthSpec,
    pub steps: usize,
    /// Transitions simulated and discarded before the first observation.
    pub burn_in: usize,
}

impl Experiment {
    pub fn true_params(&self) -> Option<&[f64]> {
        self.truth.true_params.as_deref()
    }

    /// Twin data for one realization.
    pub fn generate(&self, rng: &SeededRng) -> Result<ObservationStream> {
        generate_twin_data(&self.truth, self.steps, self.burn_in, rng)
    }
}

/// Scalar toy: `x_k = θ·x_{k−1} + w`, `y_k = x_k + v`.
pub const TOY_PROCESS: f64 = 0.1;
pub const TOY_OBS: f64 = 0.1;
pub const TOY_THETA: f64 = 0.8;

/// Builds experiment `id`. `steps` overrides the default horizon; `rng`
/// draws any random prior ingredients (the convection–diffusion prior mean).
pub fn experiment(id: ExperimentId, steps: Option<usize>, rng: &SeededRng) -> Result<Experiment> {
    let v = |xs: &[f64]| DVector::from_column_slice(xs);
    let (model, prior, truth, default_steps, burn_in): (Arc<dyn StateSpaceModel>, Prior, TruthSpec, usize, usize) =
        match id {
            ExperimentId::PendulumDyn => {
                let model = Arc::new(pendulum_model(PendulumVariant::DynamicsOnly));
                let theta = v(&[PENDULUM_TRUE_A[0][0], PENDULUM_TRUE_A[1][0]]);
                let prior = Prior {
                    theta: Gaussian::standard(2),
                    state: Gaussian::isotropic(v(&[3.0, 4.5]), 4.0)?,
                };
                (model.clone(), prior, pendulum_truth(id, model, theta), 50, 0)
            }
            ExperimentId::PendulumDynobs => {
                let model = Arc::new(pendulum_model(PendulumVariant::DynamicsAndObservation));
                let theta = v(&[PENDULUM_TRUE_A[0][1], 1.0]);
                let prior = Prior {
                    theta: Gaussian::isotropic(v(&[1.0, 0.0]), 1.0)?,
                    state: Gaussian::isotropic(v(&[3.0, 4.5]), 4.0)?,
                };
                (model.clone(), prior, pendulum_truth(id, model, theta), 100, 0)
            }
            ExperimentId::LorenzCorrect | ExperimentId::LorenzMisspec => {
                let (integrator, sigma2) = if id == ExperimentId::LorenzCorrect {
                    (Integrator::Rk4, 0.5)
                } else {
                    (Integrator::Euler, 2.0)
                };
                let model: Arc<dyn StateSpaceModel> = Arc::new(lorenz96_model(integrator, sigma2)?);
                let truth_model = Arc::new(lorenz96_model(Integrator::Rk4, 0.5)?);
                let dim = truth_model.dim;
                let x0 = DVector::from_fn(dim, |i, _| {
                    (2.0 * std::f64::consts::PI * (i + 1) as f64 / dim as f64).cos()
                });
                let theta = v(&[1.1, 0.9]);
                let truth = TruthSpec {
                    model: truth_model,
                    true_params: Some(theta.iter().cloned().collect()),
                    theta,
                    x0,
                    process_noise: false,
                    obs_cov: None,
                    experiment_id: id.to_string(),
                };
                let prior = Prior {
                    theta: Gaussian::standard(2),
                    state: Gaussian::isotropic(DVector::from_element(dim, LORENZ_PRIOR_MEAN), LORENZ_PRIOR_VAR)?,
                };
                // 3000 simulation steps at 5 per transition
                (model, prior, truth, 150, 600)
            }
            ExperimentId::Convdiff => {
                let learn = convection_diffusion_model(DiffScheme::Central);
                let n = learn.nodes;
                let truth_model = Arc::new(convection_diffusion_model(DiffScheme::Upwind));
                let x0 = truth_model.reference_initial_condition();
                let mut r = rng.derive(0);
                let mu0 = DVector::from_fn(n, |_, _| 10.0 + 3.0 * r.standard_normal());
                let prior = Prior {
                    theta: Gaussian::isotropic(v(&[0.0, 1.0]), 4.0)?,
                    state: Gaussian::isotropic(mu0, 4.0)?,
                };
                let truth = TruthSpec {
                    model: truth_model,
                    theta: v(&[1.0, 0.01]),
                    x0,
                    process_noise: false,
                    obs_cov: None,
                    true_params: None,
                    experiment_id: id.to_string(),
                };
                (Arc::new(learn), prior, truth, 50, 0)
            }
            ExperimentId::ScalarToy => {
                let model = Arc::new(AffineLinearModel::scalar(id.as_str(), 0.0, 1.0, TOY_PROCESS, TOY_OBS));
                let prior = Prior {
                    theta: Gaussian::isotropic(v(&[0.5]), 0.25)?,
                    state: Gaussian::isotropic(v(&[1.0]), 0.5)?,
                };
                let truth = TruthSpec {
                    model: model.clone(),
                    theta: v(&[TOY_THETA]),
                    x0: v(&[1.5]),
                    process_noise: true,
                    obs_cov: None,
                    true_params: Some(vec![TOY_THETA]),
                    experiment_id: id.to_string(),
                };
                (model, prior, truth, 5, 0)
            }
        };
    Ok(Experiment {
        id,
        model,
        prior,
        truth,
        steps: steps.unwrap_or(default_steps),
        burn_in,
    })
}

/// Lorenz-96 state prior `N(c·1, s²·I)`.
pub const LORENZ_PRIOR_MEAN: f64 = 2.0;
pub const LORENZ_PRIOR_VAR: f64 = 9.0;

fn pendulum_truth(id: ExperimentId, model: Arc<AffineLinearModel>, theta: DVector<f64>) -> TruthSpec {
    TruthSpec {
        true_params: Some(theta.iter().cloned().collect()),
        model,
        theta,
        x0: DVector::from_vec(vec![0.5, 0.5]),
        process_noise: true,
        obs_cov: None,
        experiment_id: id.to_string(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::DMatrix;

    #[test]
    fn ids_round_trip() {
        for id in ExperimentId::ALL {
            assert_eq!(id.as_str().parse::<ExperimentId>().unwrap(), id);
            let json = serde_json::to_string(&id).unwrap();
            assert_eq!(json, format!("\"{id}\""));
        }
        assert!("pendulum".parse::<ExperimentId>().is_err());
    }

    #[test]
    fn pendulum_truth_uses_printed_matrix() {
        for id in [ExperimentId::PendulumDyn, ExperimentId::PendulumDynobs] {
            let e = experiment(id, None, &SeededRng::new(0, 0)).unwrap();
            let a = e.model.dynamics_matrix(&e.truth.theta).unwrap();
            for i in 0..2 {
                for j in 0..2 {
                    assert_eq!(a[(i, j)], PENDULUM_TRUE_A[i][j]);
                }
            }
        }
        let e = experiment(ExperimentId::PendulumDynobs, None, &SeededRng::new(0, 0)).unwrap();
        assert_eq!(e.model.observation_matrix(&e.truth.theta).unwrap(), DMatrix::identity(2, 2));
    }

    #[test]
    fn horizons_and_dimensions() {
        let rng = SeededRng::new(1, 0);
        let cases = [
            (ExperimentId::PendulumDyn, 50, 2, 1),
            (ExperimentId::PendulumDynobs, 100, 2, 2),
            (ExperimentId::LorenzCorrect, 150, 10, 5),
            (ExperimentId::Convdiff, 50, 51, 34),
            (ExperimentId::ScalarToy, 5, 1, 1),
        ];
        for (id, steps, n, r) in cases {
            let e = experiment(id, None, &rng).unwrap();
            assert_eq!((e.steps, e.model.state_dim(), e.model.obs_dim()), (steps, n, r), "{id}");
            assert_eq!(e.prior.state.dim(), n);
            assert_eq!(e.prior.theta.dim(), e.model.param_dim());
        }
    }

    #[test]
    fn generated_streams_are_finite() {
        let rng = SeededRng::new(2, 0);
        for id in ExperimentId::ALL {
            let e = experiment(id, None, &rng).unwrap();
            let s = e.generate(&rng).unwrap();
            assert_eq!(s.len(), e.steps);
            assert!(s.reference_states.iter().flatten().all(|v| v.is_finite()), "{id}");
        }
    }

    #[test]
    fn convdiff_prior_mean_depends_on_seed() {
        let a = experiment(ExperimentId::Convdiff, None, &SeededRng::new(3, 0)).unwrap();
        let b = experiment(ExperimentId::Convdiff, None, &SeededRng::new(4, 0)).unwrap();
        assert_ne!(a.prior.state.mean(), b.prior.state.mean());
        let m = a.prior.state.mean().mean();
        assert!((m - 10.0).abs() < 1.5);
    }
}
