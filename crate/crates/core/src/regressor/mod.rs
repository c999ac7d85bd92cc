//! Conditional state regressor: `ρ_k(X | θ) = N(m(θ), L(θ)L(θ)ᵀ)` with
//! both maps small MLPs, fitted to θ-conditioned filter outputs.

mod checkpoint;
mod loss;
mod mlp;
mod state;
mod targets;
mod train;

pub use checkpoint::Checkpoint;
pub use loss::{batch_loss, kl_loss, surrogate_losses, LossKind};
pub use mlp::{Mlp, Tape};
pub use state::{
    eval_conditional, inverse_softplus, softplus, CondCovNet, CondMeanNet, ConditionalGaussianState, InputScaling,
    NetConfig, DIAG_FLOOR,
};
pub use targets::{build_targets, TargetBatch, TargetItem, MAX_DROP_FRACTION};
pub use train::{fit_conditional, pretrain_constant, recenter_biases, TrainConfig, TrainReport};
