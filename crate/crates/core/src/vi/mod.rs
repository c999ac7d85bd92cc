//! Stage 1: the parameter posterior `ν_k`, fitted by maximizing
//! `E_ν[log I(θ)] − KL(ν ‖ ν_{k−1})` over Gaussians.

mod elbo;
mod fit;
mod likelihood;

pub use elbo::{elbo_estimate, kl_gradient, ElboEstimate, ElboProblem, VariationalGaussian};
pub use fit::{fit_nu, NuFit, Stage1Config};
pub use likelihood::{
    log_i, log_i_gaussian_approx, log_i_linear, log_i_monte_carlo, predictive_moments_ut,
    LikelihoodBackend,
};
