//! Probability primitives: Gaussians, divergences, grid distances, seeded sampling.

pub mod gaussian;
pub mod grid;
pub mod linalg;
pub mod rng;

pub use gaussian::{gaussian_kl, normal_cdf, Gaussian, LN_2PI};
pub use grid::{hellinger_distance_grid, tv_distance_grid, DensityGrid, GridAxis};
pub use rng::SeededRng;
