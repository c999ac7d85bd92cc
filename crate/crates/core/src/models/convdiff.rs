use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use super::StateSpaceModel;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DiffScheme {
    /// First-order upwind in the direction of the local speed α·u.
    Upwind,
    Central,
}

/// Periodic 1-D convection–diffusion `u_t = −α·u·u_x + ν·u_xx` on `[0, 1]`,
/// θ = (α, ν), advanced by one forward-Euler step per transition.
///
/// The grid carries 51 entries with the first at x = 0 and the last at x = 1;
/// both are the same physical point. Stencils act on the 50 unique nodes and
/// the last entry is overwritten with the first after every step.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ConvectionDiffusion {
    pub scheme: DiffScheme,
    pub nodes: usize,
    pub dx: f64,
    pub dt: f64,
    pub process_variance: f64,
    pub observed: Vec<usize>,
}

pub fn convection_diffusion_model(scheme: DiffScheme) -> ConvectionDiffusion {
    // 1-based nodes 3n+1 and 3n+2, n = 0..16
    let observed = (0..17).flat_map(|n| [3 * n, 3 * n + 1]).collect();
    ConvectionDiffusion {
        scheme,
        nodes: 51,
        dx: 0.02,
        dt: 0.001,
        process_variance: 0.01,
        observed,
    }
}

impl ConvectionDiffusion {
    pub fn grid_points(&self) -> Vec<f64> {
        (0..self.nodes).map(|i| i as f64 * self.dx).collect()
    }

    /// `sin(2πx) + 0.5·cos(4πx) + 10` sampled on the grid.
    pub fn reference_initial_condition(&self) -> DVector<f64> {
        use std::f64::consts::PI;
        DVector::from_iterator(
            self.nodes,
            self.grid_points()
                .into_iter()
                .map(|x| (2.0 * PI * x).sin() + 0.5 * (4.0 * PI * x).cos() + 10.0),
        )
    }

    pub fn selection_matrix(&self) -> DMatrix<f64> {
        let mut h = DMatrix::zeros(self.observed.len(), self.nodes);
        for (row, &col) in self.observed.iter().enumerate() {
            h[(row, col)] = 1.0;
        }
        h
    }

    fn step(&self, u: &DVector<f64>, alpha: f64, nu: f64) -> DVector<f64> {
        let m = self.nodes - 1;
        let h = self.dx;
        let mut out = u.clone();
        for i in 0..m {
            let ui = u[i];
            let left = u[(i + m - 1) % m];
            let right = u[(i + 1) % m];
            let ux = match self.scheme {
                DiffScheme::Central => (right - left) / (2.0 * h),
                DiffScheme::Upwind => {
                    if alpha * ui >= 0.0 {
                        (ui - left) / h
                    } else {
                        (right - ui) / h
                    }
                }
            };
            let uxx = (right - 2.0 * ui + left) / (h * h);
            out[i] = ui + self.dt * (-alpha * ui * ux + nu * uxx);
        }
        out[m] = out[0];
        out
    }
}

impl StateSpaceModel for ConvectionDiffusion {
    fn id(&self) -> String {
        match self.scheme {
            DiffScheme::Upwind => "convdiff-upwind".into(),
            DiffScheme::Central => "convdiff-central".into(),
        }
    }

    fn state_dim(&self) -> usize {
        self.nodes
    }

    fn obs_dim(&self) -> usize {
        self.observed.len()
    }

    fn param_dim(&self) -> usize {
        2
    }

    fn transition(&self, x: &DVector<f64>, theta: &DVector<f64>) -> DVector<f64> {
        self.step(x, theta[0], theta[1])
    }

    fn observe(&self, x: &DVector<f64>, _theta: &DVector<f64>) -> DVector<f64> {
        DVector::from_iterator(self.observed.len(), self.observed.iter().map(|&i| x[i]))
    }

    fn process_cov(&self, _theta: &DVector<f64>) -> DMatrix<f64> {
        DMatrix::identity(self.nodes, self.nodes) * self.process_variance
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

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::PI;

    #[test]
    fn observation_layout() {
        let m = convection_diffusion_model(DiffScheme::Upwind);
        assert_eq!(m.obs_dim(), 34);
        assert_eq!(&m.observed[..4], &[0, 1, 3, 4]);
        assert_eq!(*m.observed.last().unwrap(), 49);
        assert_eq!(m.obs_cov(&DVector::zeros(2)), DMatrix::identity(34, 34));
        assert_eq!(m.process_cov(&DVector::zeros(2))[(50, 50)], 0.01);
    }

    #[test]
    fn constant_state_is_fixed_point() {
        for scheme in [DiffScheme::Upwind, DiffScheme::Central] {
            let m = convection_diffusion_model(scheme);
            let u = DVector::from_element(51, 3.7);
            let th = DVector::from_vec(vec![1.0, 0.01]);
            assert!((m.transition(&u, &th) - &u).amax() < 1e-12);
        }
    }

    #[test]
    fn upwind_matches_loop_reference() {
        let m = convection_diffusion_model(DiffScheme::Upwind);
        let u = m.reference_initial_condition();
        let (alpha, nu, h, dt) = (1.0, 0.01, 0.02, 0.001);
        let out = m.transition(&u, &DVector::from_vec(vec![alpha, nu]));
        // 1-based periodic indexing over the 50 unique nodes
        let n = 50usize;
        let val = |j: usize| u[j - 1];
        let mut expect = vec![0.0; 51];
        for j in 1..=n {
            let jm = if j == 1 { n } else { j - 1 };
            let jp = if j == n { 1 } else { j + 1 };
            let speed = alpha * val(j);
            let ux = if speed >= 0.0 {
                (val(j) - val(jm)) / h
            } else {
                (val(jp) - val(j)) / h
            };
            let uxx = (val(jp) - 2.0 * val(j) + val(jm)) / (h * h);
            expect[j - 1] = val(j) + dt * (-alpha * val(j) * ux + nu * uxx);
        }
        expect[50] = expect[0];
        for i in 0..51 {
            assert!((out[i] - expect[i]).abs() < 1e-12);
        }
    }

    #[test]
    fn pure_diffusion_dissipates() {
        let m = convection_diffusion_model(DiffScheme::Central);
        let u = DVector::from_iterator(51, m.grid_points().into_iter().map(|x| (2.0 * PI * x).sin()));
        let out = m.transition(&u, &DVector::from_vec(vec![0.0, 0.01]));
        let energy = |v: &DVector<f64>| v.rows(0, 50).norm_squared();
        assert!(energy(&out) < energy(&u));
        // single Fourier mode: every node scaled by the same factor < 1
        let ratio = out[5] / u[5];
        assert!(ratio < 1.0);
        for i in 1..50 {
            if u[i].abs() > 1e-6 {
                assert!((out[i] / u[i] - ratio).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn periodic_copy() {
        let m = convection_diffusion_model(DiffScheme::Upwind);
        let u = m.reference_initial_condition();
        let out = m.transition(&u, &DVector::from_vec(vec![1.0, 0.01]));
        assert_eq!(out[50], out[0]);
    }

    #[test]
    fn upwind_truth_stays_finite() {
        let m = convection_diffusion_model(DiffScheme::Upwind);
        let mut u = m.reference_initial_condition();
        let th = DVector::from_vec(vec![1.0, 0.01]);
        for _ in 0..50 {
            u = m.transition(&u, &th);
        }
        assert!(u.iter().all(|v| v.is_finite() && v.abs() < 20.0));
    }
}
