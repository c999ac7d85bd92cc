use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::state::{sigmoid, tri_index, tri_len, ConditionalGaussianState, Evaluated};
use super::targets::{TargetBatch, TargetItem};
use crate::error::{AssimError, Result};
use crate::prob::linalg::solve_lower_mat;
use crate::prob::linalg::solve_lower;

/// Stage-2 training objective.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LossKind {
    /// Average `KL(ρ(·|θ) ‖ ρ*(·|θ))` over the batch.
    Kl,
    /// Squared mean error plus squared Frobenius covariance error.
    Surrogate,
}

/// `KL(N(m, LLᵀ) ‖ N(m*, C*))` for one target.
fn item_kl(mean: &DVector<f64>, l: &DMatrix<f64>, t: &TargetItem) -> f64 {
    let n = mean.len() as f64;
    let tr = solve_lower_mat(&t.factor, l).norm_squared();
    let quad = solve_lower(&t.factor, &(mean - &t.mean)).norm_squared();
    let logdet: f64 = 2.0 * (0..l.nrows()).map(|i| l[(i, i)].ln()).sum::<f64>();
    0.5 * (t.log_det - logdet - n + tr + quad)
}

/// Average KL divergence from the state's conditionals to the targets.
pub fn kl_loss(state: &ConditionalGaussianState, batch: &TargetBatch) -> Result<f64> {
    if batch.is_empty() {
        return Err(AssimError::InvalidArgument("empty target batch".into()));
    }
    let total: f64 = batch
        .items
        .iter()
        .map(|t| {
            let (m, l) = state.eval_parts(&t.theta);
            item_kl(&m, &l, t)
        })
        .sum();
    Ok(total / batch.len() as f64)
}

/// `((1/N)Σ‖m − m*‖², (1/N)Σ‖C − C*‖_F²)`.
pub fn surrogate_losses(state: &ConditionalGaussianState, batch: &TargetBatch) -> (f64, f64) {
    let mut mean_mse = 0.0;
    let mut cov_frob = 0.0;
    for t in &batch.items {
        let (m, l) = state.eval_parts(&t.theta);
        mean_mse += (m - &t.mean).norm_squared();
        cov_frob += (&l * l.transpose() - &t.cov).norm_squared();
    }
    let n = batch.len().max(1) as f64;
    (mean_mse / n, cov_frob / n)
}

/// Per-item loss and its gradient with respect to `(m, L)`.
fn item_terms(ev: &Evaluated, t: &TargetItem, kind: LossKind) -> (f64, DVector<f64>, DMatrix<f64>) {
    let l = &ev.factor;
    let n = l.nrows();
    match kind {
        LossKind::Kl => {
            let loss = item_kl(&ev.mean, l, t);
            let gm = &t.precision * (&ev.mean - &t.mean);
            let mut gl = &t.precision * l;
            for i in 0..n {
                gl[(i, i)] -= 1.0 / l[(i, i)];
            }
            (loss, gm, gl)
        }
        LossKind::Surrogate => {
            let delta = &ev.mean - &t.mean;
            let diff = l * l.transpose() - &t.cov;
            let loss = delta.norm_squared() + diff.norm_squared();
            (loss, delta * 2.0, diff * l * 4.0)
        }
    }
}

/// Gradient with respect to the raw covariance-net outputs.
fn raw_cov_grad(gl: &DMatrix<f64>, raw: &[f64]) -> Vec<f64> {
    let n = gl.nrows();
    let mut g = vec![0.0; tri_len(n)];
    for i in 0..n {
        for j in 0..i {
            g[tri_index(i, j)] = gl[(i, j)];
        }
        let k = tri_index(i, i);
        g[k] = gl[(i, i)] * sigmoid(raw[k]);
    }
    g
}

/// Items per parallel chunk. Fixed so the summation order, and hence the
/// result, does not depend on the number of threads.
const CHUNK: usize = 16;

/// Mean loss over `idx` and its gradient with respect to all weights
/// (mean net first, then covariance net).
pub(crate) fn loss_and_grad(
    state: &ConditionalGaussianState,
    batch: &TargetBatch,
    idx: &[usize],
    kind: LossKind,
) -> (f64, Vec<f64>) {
    let km = state.mean_net.mlp.params().len();
    let total = state.weight_count();
    let partial: Vec<(f64, Vec<f64>)> = idx
        .par_chunks(CHUNK)
        .map(|chunk| {
            let mut grad = vec![0.0; total];
            let mut loss = 0.0;
            for &i in chunk {
                let t = &batch.items[i];
                let ev = state.eval_taped(&t.theta);
                let (li, gm, gl) = item_terms(&ev, t, kind);
                loss += li;
                let (gmean, gcov) = grad.split_at_mut(km);
                state.mean_net.mlp.backward(&ev.mean_tape, gm.as_slice(), gmean);
                state
                    .cov_net
                    .mlp
                    .backward(&ev.cov_tape, &raw_cov_grad(&gl, &ev.raw_cov), gcov);
            }
            (loss, grad)
        })
        .collect();
    let scale = 1.0 / idx.len().max(1) as f64;
    let mut grad = vec![0.0; total];
    let mut loss = 0.0;
    for (l, g) in partial {
        loss += l;
        for (a, b) in grad.iter_mut().zip(g) {
            *a += b;
        }
    }
    for g in grad.iter_mut() {
        *g *= scale;
    }
    (loss * scale, grad)
}

/// Loss over the whole batch.
pub fn batch_loss(state: &ConditionalGaussianState, batch: &TargetBatch, kind: LossKind) -> Result<f64> {
    match kind {
        LossKind::Kl => kl_loss(state, batch),
        LossKind::Surrogate => {
            let (a, b) = surrogate_losses(state, batch);
            Ok(a + b)
        }
    }
}
