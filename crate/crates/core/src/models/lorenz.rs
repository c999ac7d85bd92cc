use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use super::StateSpaceModel;
use crate::error::{AssimError, Result};

/// Generalized Lorenz-96 drift:
/// `dx_i/dt = α·x_{i−1}(x_{i+1} − x_{i−2}) − β·x_i + F`, cyclic indices.
pub fn lorenz96_drift(x: &DVector<f64>, alpha: f64, beta: f64, forcing: f64) -> Result<DVector<f64>> {
    let m = x.len();
    if m < 4 {
        return Err(AssimError::InvalidArgument(format!(
            "lorenz-96 needs at least 4 components, got {m}"
        )));
    }
    Ok(drift_unchecked(x, alpha, beta, forcing))
}

fn drift_unchecked(x: &DVector<f64>, alpha: f64, beta: f64, forcing: f64) -> DVector<f64> {
    let m = x.len();
    DVector::from_fn(m, |i, _| {
        let xm1 = x[(i + m - 1) % m];
        let xm2 = x[(i + m - 2) % m];
        let xp1 = x[(i + 1) % m];
        alpha * xm1 * (xp1 - xm2) - beta * x[i] + forcing
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Integrator {
    Rk4,
    Euler,
}

impl Integrator {
    pub fn step(
        self,
        x: &DVector<f64>,
        dt: f64,
        f: impl Fn(&DVector<f64>) -> DVector<f64>,
    ) -> DVector<f64> {
        match self {
            Integrator::Euler => x + f(x) * dt,
            Integrator::Rk4 => {
                let k1 = f(x);
                let k2 = f(&(x + &k1 * (0.5 * dt)));
                let k3 = f(&(x + &k2 * (0.5 * dt)));
                let k4 = f(&(x + &k3 * dt));
                x + (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (dt / 6.0)
            }
        }
    }
}

/// Lorenz-96 learning model with θ = (α, β): one transition spans
/// `substeps` integrator steps of length `dt`; odd-numbered components are
/// observed with unit noise.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Lorenz96 {
    pub integrator: Integrator,
    pub process_variance: f64,
    pub forcing: f64,
    pub dim: usize,
    pub dt: f64,
    pub substeps: usize,
    pub observed: Vec<usize>,
}

pub fn lorenz96_model(integrator: Integrator, process_variance: f64) -> Result<Lorenz96> {
    if !(process_variance > 0.0) {
        return Err(AssimError::InvalidArgument(format!(
            "process variance must be positive, got {process_variance}"
        )));
    }
    Ok(Lorenz96 {
        integrator,
        process_variance,
        forcing: 8.0,
        dim: 10,
        dt: 0.01,
        substeps: 5,
        observed: vec![0, 2, 4, 6, 8],
    })
}

impl Lorenz96 {
    pub fn with_forcing(mut self, forcing: f64) -> Self {
        self.forcing = forcing;
        self
    }

    pub fn selection_matrix(&self) -> DMatrix<f64> {
        let mut h = DMatrix::zeros(self.observed.len(), self.dim);
        for (row, &col) in self.observed.iter().enumerate() {
            h[(row, col)] = 1.0;
        }
        h
    }
}

impl StateSpaceModel for Lorenz96 {
    fn id(&self) -> String {
        match self.integrator {
            Integrator::Rk4 => "lorenz96-rk4".into(),
            Integrator::Euler => "lorenz96-euler".into(),
        }
    }

    fn state_dim(&self) -> usize {
        self.dim
    }

    fn obs_dim(&self) -> usize {
        self.observed.len()
    }

    fn param_dim(&self) -> usize {
        2
    }

    fn transition(&self, x: &DVector<f64>, theta: &DVector<f64>) -> DVector<f64> {
        let (alpha, beta, forcing) = (theta[0], theta[1], self.forcing);
        let mut state = x.clone();
        for _ in 0..self.substeps {
            state = self
                .integrator
                .step(&state, self.dt, |s| drift_unchecked(s, alpha, beta, forcing));
        }
        state
    }

    fn observe(&self, x: &DVector<f64>, _theta: &DVector<f64>) -> DVector<f64> {
        DVector::from_iterator(self.observed.len(), self.observed.iter().map(|&i| x[i]))
    }

    fn process_cov(&self, _theta: &DVector<f64>) -> DMatrix<f64> {
        DMatrix::identity(self.dim, self.dim) * self.process_variance
    }

    fn obs_cov(&self, _theta: &DVector<f64>) -> DMatrix<f64> {
        let r = self.observed.len();
        DMatrix::identity(r, r)
    }

    fn observation_matrix(&self, _theta: &DVector<f64>) -> Option<DMatrix<f64>> {
        Some(self.selection_matrix())
    }

    fn is_linear_observation(&self) -> bool {
        true
    }
}
