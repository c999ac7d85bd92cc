use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use super::mlp::{Mlp, Tape};
use crate::conditional::ConditionalState;
use crate::error::{check_dim, AssimError, Result};
use crate::prob::{Gaussian, SeededRng};

/// Floor added to every decoded factor diagonal.
pub const DIAG_FLOOR: f64 = 1e-6;

pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `softplus⁻¹(y)` for `y > 0`.
pub fn inverse_softplus(y: f64) -> f64 {
    y + (-(-y).exp_m1()).ln()
}

/// Affine map applied to θ before the networks: `(θ − center) / scale`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InputScaling {
    pub center: Vec<f64>,
    pub scale: Vec<f64>,
}

impl InputScaling {
    pub fn identity(d: usize) -> Self {
        Self {
            center: vec![0.0; d],
            scale: vec![1.0; d],
        }
    }

    /// Centers and scales by a Gaussian's mean and marginal standard deviations.
    pub fn from_gaussian(g: &Gaussian) -> Self {
        Self {
            center: g.mean().iter().cloned().collect(),
            scale: g.variances().iter().map(|v| v.sqrt()).collect(),
        }
    }

    pub fn apply(&self, theta: &DVector<f64>) -> Vec<f64> {
        theta
            .iter()
            .zip(self.center.iter().zip(&self.scale))
            .map(|(t, (c, s))| (t - c) / s)
            .collect()
    }
}

/// `θ ↦ m(θ) ∈ ℝⁿ`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CondMeanNet {
    pub mlp: Mlp,
}

/// `θ ↦ L(θ)`, the lower-triangular factor of `C(θ)`, from `n(n+1)/2`
/// outputs packed row by row; the diagonal passes through softplus plus
/// [`DIAG_FLOOR`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CondCovNet {
    pub mlp: Mlp,
}

pub fn tri_len(n: usize) -> usize {
    n * (n + 1) / 2
}

/// Index of entry `(i, j)`, `j ≤ i`, in the packed lower triangle.
pub fn tri_index(i: usize, j: usize) -> usize {
    i * (i + 1) / 2 + j
}

impl CondCovNet {
    pub fn decode(raw: &[f64], n: usize) -> DMatrix<f64> {
        let mut l = DMatrix::zeros(n, n);
        for i in 0..n {
            for j in 0..i {
                l[(i, j)] = raw[tri_index(i, j)];
            }
            l[(i, i)] = softplus(raw[tri_index(i, i)]) + DIAG_FLOOR;
        }
        l
    }

    /// Raw outputs that decode to `l` (inverse of [`CondCovNet::decode`]).
    pub fn encode(l: &DMatrix<f64>) -> Vec<f64> {
        let n = l.nrows();
        let mut raw = vec![0.0; tri_len(n)];
        for i in 0..n {
            for j in 0..i {
                raw[tri_index(i, j)] = l[(i, j)];
            }
            raw[tri_index(i, i)] = inverse_softplus((l[(i, i)] - DIAG_FLOOR).max(1e-300));
        }
        raw
    }
}

/// Network sizes shared by the mean and covariance nets.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NetConfig {
    pub hidden: Vec<usize>,
    /// Initial scale of the output layer relative to Glorot.
    pub output_scale: f64,
}

impl Default for NetConfig {
    fn default() -> Self {
        Self {
            hidden: vec![64, 64],
            output_scale: 0.1,
        }
    }
}

/// `ρ_k(X | θ) = N(m(θ), L(θ)L(θ)ᵀ)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConditionalGaussianState {
    pub mean_net: CondMeanNet,
    pub cov_net: CondCovNet,
    pub scaling: InputScaling,
    pub state_dim: usize,
    pub step: usize,
}

/// Everything a forward pass produces that training needs.
pub struct Evaluated {
    pub mean: DVector<f64>,
    pub factor: DMatrix<f64>,
    pub raw_cov: Vec<f64>,
    pub mean_tape: Tape,
    pub cov_tape: Tape,
}

impl ConditionalGaussianState {
    pub fn new(
        d_theta: usize,
        n: usize,
        scaling: InputScaling,
        net: &NetConfig,
        rng: &mut SeededRng,
    ) -> Result<Self> {
        check_dim("input scaling", d_theta, scaling.center.len())?;
        let sizes = |out: usize| {
            let mut s = vec![d_theta];
            s.extend(&net.hidden);
            s.push(out);
            s
        };
        Ok(Self {
            mean_net: CondMeanNet {
                mlp: Mlp::new(&sizes(n), net.output_scale, rng)?,
            },
            cov_net: CondCovNet {
                mlp: Mlp::new(&sizes(tri_len(n)), net.output_scale, rng)?,
            },
            scaling,
            state_dim: n,
            step: 0,
        })
    }

    pub fn param_dim(&self) -> usize {
        self.mean_net.mlp.input_dim()
    }

    pub fn eval_taped(&self, theta: &DVector<f64>) -> Evaluated {
        let x = self.scaling.apply(theta);
        let mean_tape = self.mean_net.mlp.forward_tape(&x);
        let cov_tape = self.cov_net.mlp.forward_tape(&x);
        let raw_cov = cov_tape.output().to_vec();
        Evaluated {
            mean: DVector::from_column_slice(mean_tape.output()),
            factor: CondCovNet::decode(&raw_cov, self.state_dim),
            raw_cov,
            mean_tape,
            cov_tape,
        }
    }

    /// Mean and factor without recording tapes.
    pub fn eval_parts(&self, theta: &DVector<f64>) -> (DVector<f64>, DMatrix<f64>) {
        let x = self.scaling.apply(theta);
        let mean = DVector::from_vec(self.mean_net.mlp.forward(&x));
        let raw = self.cov_net.mlp.forward(&x);
        (mean, CondCovNet::decode(&raw, self.state_dim))
    }

    /// Total number of trainable weights (mean net, then covariance net).
    pub fn weight_count(&self) -> usize {
        self.mean_net.mlp.params().len() + self.cov_net.mlp.params().len()
    }

    pub fn weights(&self) -> Vec<f64> {
        let mut w = self.mean_net.mlp.params().to_vec();
        w.extend_from_slice(self.cov_net.mlp.params());
        w
    }

    pub fn set_weights(&mut self, w: &[f64]) -> Result<()> {
        if w.len() != self.weight_count() {
            return Err(AssimError::DimensionMismatch {
                context: "conditional state weights",
                expected: self.weight_count(),
                found: w.len(),
            });
        }
        let k = self.mean_net.mlp.params().len();
        self.mean_net.mlp.params_mut().copy_from_slice(&w[..k]);
        self.cov_net.mlp.params_mut().copy_from_slice(&w[k..]);
        Ok(())
    }
}

/// Forward pass of both networks at θ.
pub fn eval_conditional(state: &ConditionalGaussianState, theta: &DVector<f64>) -> Result<Gaussian> {
    check_dim("conditional state θ", state.param_dim(), theta.len())?;
    let (mean, factor) = state.eval_parts(theta);
    Gaussian::new(mean, factor)
}

impl ConditionalState for ConditionalGaussianState {
    fn state_dim(&self) -> usize {
        self.state_dim
    }

    fn eval(&self, theta: &DVector<f64>) -> Result<Gaussian> {
        eval_conditional(self, theta)
    }
}
