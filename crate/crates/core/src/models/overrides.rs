use std::sync::Arc;

use nalgebra::{DMatrix, DVector};

use super::StateSpaceModel;

/// Replaces Σ and/or Γ of a wrapped model, e.g. to make an observation
/// uninformative (Γ → ∞) or the dynamics deterministic (Σ = 0).
#[derive(Clone)]
pub struct CovOverride {
    inner: Arc<dyn StateSpaceModel>,
    process: Option<DMatrix<f64>>,
    obs: Option<DMatrix<f64>>,
}

impl CovOverride {
    pub fn new(inner: Arc<dyn StateSpaceModel>) -> Self {
        Self {
            inner,
            process: None,
            obs: None,
        }
    }

    pub fn process(mut self, cov: DMatrix<f64>) -> Self {
        self.process = Some(cov);
        self
    }

    pub fn obs(mut self, cov: DMatrix<f64>) -> Self {
        self.obs = Some(cov);
        self
    }

    pub fn obs_scaled(self, variance: f64) -> Self {
        let r = self.inner.obs_dim();
        self.obs(DMatrix::identity(r, r) * variance)
    }

    pub fn process_scaled(self, variance: f64) -> Self {
        let n = self.inner.state_dim();
        self.process(DMatrix::identity(n, n) * variance)
    }
}

impl StateSpaceModel for CovOverride {
    fn id(&self) -> String {
        format!("{}+cov-override", self.inner.id())
    }

    fn state_dim(&self) -> usize {
        self.inner.state_dim()
    }

    fn obs_dim(&self) -> usize {
        self.inner.obs_dim()
    }

    fn param_dim(&self) -> usize {
        self.inner.param_dim()
    }

    fn transition(&self, x: &DVector<f64>, theta: &DVector<f64>) -> DVector<f64> {
        self.inner.transition(x, theta)
    }

    fn observe(&self, x: &DVector<f64>, theta: &DVector<f64>) -> DVector<f64> {
        self.inner.observe(x, theta)
    }

    fn process_cov(&self, theta: &DVector<f64>) -> DMatrix<f64> {
        self.process
            .clone()
            .unwrap_or_else(|| self.inner.process_cov(theta))
    }

    fn obs_cov(&self, theta: &DVector<f64>) -> DMatrix<f64> {
        self.obs.clone().unwrap_or_else(|| self.inner.obs_cov(theta))
    }

    fn dynamics_matrix(&self, theta: &DVector<f64>) -> Option<DMatrix<f64>> {
        self.inner.dynamics_matrix(theta)
    }

    fn observation_matrix(&self, theta: &DVector<f64>) -> Option<DMatrix<f64>> {
        self.inner.observation_matrix(theta)
    }

    fn is_linear_dynamics(&self) -> bool {
        self.inner.is_linear_dynamics()
    }

    fn is_linear_observation(&self) -> bool {
        self.inner.is_linear_observation()
    }
}
