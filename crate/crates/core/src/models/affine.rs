use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use super::StateSpaceModel;

/// Printed pendulum transition matrix used as the data-generating truth.
pub const PENDULUM_TRUE_A: [[f64; 2]; 2] = [[0.9594, 0.0986], [-0.8056, 0.9594]];

/// Linear-Gaussian model whose matrices are affine in θ:
/// `A(θ) = A₀ + Σ θ_i A_i`, `H(θ) = H₀ + Σ θ_i H_i`, with fixed Σ and Γ.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AffineLinearModel {
    pub id: String,
    pub a0: DMatrix<f64>,
    pub a_terms: Vec<DMatrix<f64>>,
    pub h0: DMatrix<f64>,
    pub h_terms: Vec<DMatrix<f64>>,
    pub process: DMatrix<f64>,
    pub obs: DMatrix<f64>,
}

impl AffineLinearModel {
    /// Model without θ-dependence in `H`; `h_terms` are zero matrices.
    pub fn with_fixed_observation(
        id: impl Into<String>,
        a0: DMatrix<f64>,
        a_terms: Vec<DMatrix<f64>>,
        h: DMatrix<f64>,
        process: DMatrix<f64>,
        obs: DMatrix<f64>,
    ) -> Self {
        let zeros = vec![DMatrix::zeros(h.nrows(), h.ncols()); a_terms.len()];
        Self {
            id: id.into(),
            a0,
            a_terms,
            h0: h,
            h_terms: zeros,
            process,
            obs,
        }
    }

    /// Scalar-state, scalar-θ model `x_k = (a₀ + a₁θ)x_{k−1} + w`,
    /// `y_k = x_k + v`.
    pub fn scalar(id: impl Into<String>, a0: f64, a1: f64, process: f64, obs: f64) -> Self {
        let m = |v: f64| DMatrix::from_element(1, 1, v);
        Self::with_fixed_observation(id, m(a0), vec![m(a1)], m(1.0), m(process), m(obs))
    }

    fn combine(base: &DMatrix<f64>, terms: &[DMatrix<f64>], theta: &DVector<f64>) -> DMatrix<f64> {
        let mut out = base.clone();
        for (t, m) in theta.iter().zip(terms) {
            if *t != 0.0 {
                out += m * *t;
            }
        }
        out
    }

    pub fn a(&self, theta: &DVector<f64>) -> DMatrix<f64> {
        Self::combine(&self.a0, &self.a_terms, theta)
    }

    pub fn h(&self, theta: &DVector<f64>) -> DMatrix<f64> {
        Self::combine(&self.h0, &self.h_terms, theta)
    }
}

impl StateSpaceModel for AffineLinearModel {
    fn id(&self) -> String {
        self.id.clone()
    }

    fn state_dim(&self) -> usize {
        self.a0.nrows()
    }

    fn obs_dim(&self) -> usize {
        self.h0.nrows()
    }

    fn param_dim(&self) -> usize {
        self.a_terms.len()
    }

    fn transition(&self, x: &DVector<f64>, theta: &DVector<f64>) -> DVector<f64> {
        self.a(theta) * x
    }

    fn observe(&self, x: &DVector<f64>, theta: &DVector<f64>) -> DVector<f64> {
        self.h(theta) * x
    }

    fn process_cov(&self, _theta: &DVector<f64>) -> DMatrix<f64> {
        self.process.clone()
    }

    fn obs_cov(&self, _theta: &DVector<f64>) -> DMatrix<f64> {
        self.obs.clone()
    }

    fn dynamics_matrix(&self, theta: &DVector<f64>) -> Option<DMatrix<f64>> {
        Some(self.a(theta))
    }

    fn observation_matrix(&self, theta: &DVector<f64>) -> Option<DMatrix<f64>> {
        Some(self.h(theta))
    }

    fn is_linear_dynamics(&self) -> bool {
        true
    }

    fn is_linear_observation(&self) -> bool {
        true
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PendulumVariant {
    /// `A(θ) = [[θ₁, 0.0986], [θ₂, θ₁]]`, `H = [1, 0]`.
    DynamicsOnly,
    /// `A(θ) = [[0.9594, θ₁], [−0.8056, 0.9594]]`, `H(θ) = diag(θ₂, 1)`.
    DynamicsAndObservation,
}

pub fn pendulum_model(variant: PendulumVariant) -> AffineLinearModel {
    let m = |r: usize, c: usize, v: &[f64]| DMatrix::from_row_slice(r, c, v);
    let process = DMatrix::identity(2, 2) * 0.01;
    match variant {
        PendulumVariant::DynamicsOnly => AffineLinearModel::with_fixed_observation(
            "pendulum-dyn",
            m(2, 2, &[0.0, 0.0986, 0.0, 0.0]),
            vec![m(2, 2, &[1.0, 0.0, 0.0, 1.0]), m(2, 2, &[0.0, 0.0, 1.0, 0.0])],
            m(1, 2, &[1.0, 0.0]),
            process,
            DMatrix::from_element(1, 1, 0.01),
        ),
        PendulumVariant::DynamicsAndObservation => AffineLinearModel {
            id: "pendulum-dynobs".into(),
            a0: m(2, 2, &[0.9594, 0.0, -0.8056, 0.9594]),
            a_terms: vec![m(2, 2, &[0.0, 1.0, 0.0, 0.0]), DMatrix::zeros(2, 2)],
            h0: m(2, 2, &[0.0, 0.0, 0.0, 1.0]),
            h_terms: vec![DMatrix::zeros(2, 2), m(2, 2, &[1.0, 0.0, 0.0, 0.0])],
            process,
            obs: DMatrix::identity(2, 2) * 0.01,
        },
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::spot_check_linear;

    fn truth() -> DMatrix<f64> {
        DMatrix::from_fn(2, 2, |i, j| PENDULUM_TRUE_A[i][j])
    }

    #[test]
    fn dynamics_only_at_truth() {
        let m = pendulum_model(PendulumVariant::DynamicsOnly);
        let th = DVector::from_vec(vec![0.9594, -0.8056]);
        assert!((m.a(&th) - truth()).amax() < 1e-15);
        assert_eq!(m.h(&th), DMatrix::from_row_slice(1, 2, &[1.0, 0.0]));
        assert_eq!(m.obs_dim(), 1);
    }

    #[test]
    fn dynamics_only_at_zero() {
        let m = pendulum_model(PendulumVariant::DynamicsOnly);
        let a = m.a(&DVector::zeros(2));
        assert_eq!(a, DMatrix::from_row_slice(2, 2, &[0.0, 0.0986, 0.0, 0.0]));
    }

    #[test]
    fn dynobs_at_truth() {
        let m = pendulum_model(PendulumVariant::DynamicsAndObservation);
        let th = DVector::from_vec(vec![0.0986, 1.0]);
        assert!((m.a(&th) - truth()).amax() < 1e-15);
        assert_eq!(m.h(&th), DMatrix::identity(2, 2));
    }

    #[test]
    fn declared_linear() {
        for v in [PendulumVariant::DynamicsOnly, PendulumVariant::DynamicsAndObservation] {
            let m = pendulum_model(v);
            assert!(m.is_linear());
            assert!(spot_check_linear(&m, 20, 3) < 1e-12);
        }
    }
}
