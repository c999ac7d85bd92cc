//! Online joint parameter–state estimation for stochastic dynamical systems.
//!
//! The joint posterior `p(X_k, θ | y_1..y_k)` is approximated recursively as
//! `q_k(X_k, θ) = ρ_k(X_k | θ)·ν_k(θ)`: a Gaussian `ν_k` over the parameters,
//! fitted by maximizing an evidence lower bound against the one-step Bayes
//! update of `ν_{k−1}`, and a conditional Gaussian `ρ_k` whose mean and
//! covariance are small neural networks in θ, regressed onto θ-conditioned
//! Kalman, unscented or ensemble filter outputs. Only `(ν_k, ρ_k)` are carried
//! between steps, so the cost per observation stays constant.

mod adam;
pub mod baselines;
pub mod bound;
pub mod conditional;
pub mod error;
pub mod experiments;
pub mod filters;
pub mod io;
pub mod mcmc;
pub mod metrics;
pub mod models;
pub mod orchestrator;
pub mod prob;
pub mod regressor;
pub mod runner;
pub mod vi;

pub use error::{AssimError, Result};
