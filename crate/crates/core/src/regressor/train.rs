use nalgebra::DVector;
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::loss::{batch_loss, loss_and_grad, LossKind};
use super::state::{CondCovNet, ConditionalGaussianState};
use super::targets::{TargetBatch, TargetItem};
use crate::adam::Adam;
use crate::error::{AssimError, Result};
use crate::prob::{Gaussian, SeededRng};

/// Stage-2 optimizer settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    /// Shift the output biases so the batch-average residual is zero before
    /// training.
    pub recenter: bool,
    /// Learning-rate halvings allowed after a non-finite loss.
    pub max_lr_halvings: usize,
    /// Training is skipped when the warm start is already this close.
    pub tolerance: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 60,
            lr: 3e-3,
            batch_size: 64,
            recenter: true,
            max_lr_halvings: 3,
            tolerance: 1e-12,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainReport {
    /// Loss at the warm start, after re-centering.
    pub initial_loss: f64,
    pub final_loss: f64,
    pub optimizer_steps: usize,
    pub lr_halvings: usize,
    /// Mean minibatch loss in each epoch.
    pub epoch_losses: Vec<f64>,
    /// Standard error of that mean.
    pub epoch_loss_se: Vec<f64>,
}

/// Adds the batch-average output residual to both networks' output biases.
pub fn recenter_biases(state: &mut ConditionalGaussianState, batch: &TargetBatch) {
    if batch.is_empty() {
        return;
    }
    let n = state.state_dim;
    let inv = 1.0 / batch.len() as f64;
    let mut dm = DVector::zeros(n);
    let mut draw = vec![0.0; n * (n + 1) / 2];
    for t in &batch.items {
        let ev = state.eval_taped(&t.theta);
        dm += (&t.mean - &ev.mean) * inv;
        for (d, (target, cur)) in draw.iter_mut().zip(CondCovNet::encode(&t.factor).into_iter().zip(&ev.raw_cov)) {
            *d += (target - cur) * inv;
        }
    }
    let mo = state.mean_net.mlp.output_bias_offset();
    for (b, d) in state.mean_net.mlp.params_mut()[mo..].iter_mut().zip(dm.iter()) {
        *b += d;
    }
    let co = state.cov_net.mlp.output_bias_offset();
    for (b, d) in state.cov_net.mlp.params_mut()[co..].iter_mut().zip(&draw) {
        *b += d;
    }
}

/// Fits `state` (the warm start) to `batch` with minibatch Adam.
///
/// Epoch `e` shuffles with `rng.derive(e)`. A non-finite minibatch loss
/// restores the last finite weights and halves the learning rate.
pub fn fit_conditional(
    state: &mut ConditionalGaussianState,
    batch: &TargetBatch,
    kind: LossKind,
    config: &TrainConfig,
    rng: &SeededRng,
) -> Result<TrainReport> {
    if batch.is_empty() {
        return Err(AssimError::InvalidArgument("empty target batch".into()));
    }
    if config.batch_size == 0 {
        return Err(AssimError::Config("batch_size must be >= 1".into()));
    }
    if config.recenter {
        recenter_biases(state, batch);
    }
    let initial_loss = batch_loss(state, batch, kind)?;
    let mut weights = state.weights();
    let mut good = weights.clone();
    let mut adam = Adam::new(weights.len());
    let mut lr = config.lr;
    let mut halvings = 0;
    let mut steps = 0;
    let mut idx: Vec<usize> = (0..batch.len()).collect();
    let epochs = if initial_loss.abs() <= config.tolerance { 0 } else { config.epochs };

    let mut epoch_losses = Vec::with_capacity(epochs);
    let mut epoch_loss_se = Vec::with_capacity(epochs);

    for epoch in 0..epochs {
        idx.shuffle(&mut rng.derive(epoch as u64));
        let mut seen = Vec::new();
        for chunk in idx.chunks(config.batch_size) {
            let (loss, grad) = loss_and_grad(state, batch, chunk, kind);
            if !loss.is_finite() || grad.iter().any(|g| !g.is_finite()) {
                halvings += 1;
                if halvings > config.max_lr_halvings {
                    return Err(AssimError::NumericalDegeneracy(format!(
                        "stage-2 loss not finite after {} learning-rate halvings",
                        config.max_lr_halvings
                    )));
                }
                lr *= 0.5;
                weights.copy_from_slice(&good);
                state.set_weights(&weights)?;
                adam = Adam::new(weights.len());
                continue;
            }
            seen.push(loss);
            good.copy_from_slice(&weights);
            adam.descend(&mut weights, &grad, lr);
            state.set_weights(&weights)?;
            steps += 1;
        }
        let (mean, se) = mean_and_se(&seen);
        epoch_losses.push(mean);
        epoch_loss_se.push(se);
    }

    let mut final_loss = batch_loss(state, batch, kind)?;
    if !final_loss.is_finite() {
        state.set_weights(&good)?;
        final_loss = batch_loss(state, batch, kind)?;
    }
    Ok(TrainReport {
        initial_loss,
        final_loss,
        optimizer_steps: steps,
        lr_halvings: halvings,
        epoch_losses,
        epoch_loss_se,
    })
}

fn mean_and_se(v: &[f64]) -> (f64, f64) {
    if v.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    if v.len() < 2 {
        return (mean, 0.0);
    }
    let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

/// Trains `state` towards the θ-independent conditional `target`, with
/// inputs drawn from `theta_dist`. Used before the first observation so
/// that `ρ_0(· | θ)` is the state prior for every θ.
pub fn pretrain_constant(
    state: &mut ConditionalGaussianState,
    target: &Gaussian,
    theta_dist: &Gaussian,
    samples: usize,
    steps: usize,
    rng: &SeededRng,
) -> Result<TrainReport> {
    let thetas = theta_dist.sample(samples.max(1), &mut rng.derive(0))?;
    let items = thetas
        .column_iter()
        .map(|c| TargetItem::from_gaussian(c.into_owned(), target))
        .collect::<Result<Vec<_>>>()?;
    let batch = TargetBatch::new(items);
    let config = TrainConfig {
        epochs: steps,
        batch_size: batch.len(),
        ..TrainConfig::default()
    };
    fit_conditional(state, &batch, LossKind::Kl, &config, &rng.derive(1))
}
