//! Homogenization of discrete elliptic equations with log-normal coefficients.
//!
//! The pipeline samples a stationary Gaussian field `G` on a periodic lattice,
//! forms the coefficient `a = exp(G)` (optionally truncated), solves the
//! corrector equations, and measures the random quantities that control the
//! homogenization error: minimal radii, corrector growth, fluctuations of
//! spatial averages and of the commutator, and the two-scale expansion error.

pub mod balls;
pub mod correctors;
pub mod error;
pub mod experiment;
pub mod fft;
pub mod field;
pub mod fluctuations;
pub mod grid;
pub mod pde;
pub mod radii;
pub mod rng;
pub mod stats;
pub mod twoscale;

pub use error::{Error, Result};
pub use field::{CovarianceFamily, CovarianceSpec, LatticeField};
pub use grid::LatticeGrid;
