//! Conditional state distributions `ρ(X | θ)`.

use nalgebra::DVector;

use crate::error::{check_dim, Result};
use crate::prob::Gaussian;

/// A Gaussian over the state whose parameters depend on θ.
pub trait ConditionalState: Send + Sync {
    fn state_dim(&self) -> usize;
    fn eval(&self, theta: &DVector<f64>) -> Result<Gaussian>;
}

/// The same Gaussian for every θ, e.g. the state prior at k = 0.
#[derive(Debug, Clone)]
pub struct ConstantState(pub Gaussian);

impl ConditionalState for ConstantState {
    fn state_dim(&self) -> usize {
        self.0.dim()
    }

    fn eval(&self, _theta: &DVector<f64>) -> Result<Gaussian> {
        Ok(self.0.clone())
    }
}

/// Adapter for closures, mostly for tests and oracles.
pub struct FnState<F> {
    dim: usize,
    f: F,
}

impl<F> FnState<F>
where
    F: Fn(&DVector<f64>) -> Result<Gaussian> + Send + Sync,
{
    pub fn new(dim: usize, f: F) -> Self {
        Self { dim, f }
    }
}

impl<F> ConditionalState for FnState<F>
where
    F: Fn(&DVector<f64>) -> Result<Gaussian> + Send + Sync,
{
    fn state_dim(&self) -> usize {
        self.dim
    }

    fn eval(&self, theta: &DVector<f64>) -> Result<Gaussian> {
        let g = (self.f)(theta)?;
        check_dim("conditional state", self.dim, g.dim())?;
        Ok(g)
    }
}
