//! Predictive iterative learning control with quasi-periodic Gaussian
//! process error models.
//!
//! The crate is organised around the pieces of a learning-control
//! experiment:
//!
//! - [`kernels`]: covariance kernels and the projections used to turn an
//!   empirical covariance into a valid stationary kernel.
//! - [`qpgp`]: the quasi-periodic GP error model, its block and element-wise
//!   predictors, the two-stage estimator and a dense conditional-mean oracle.
//! - [`gp_baseline`]: full-history and sparse inducing-point GP predictors.
//! - [`ilc`]: update laws, gain schedules, contraction diagnostics and the
//!   iteration loop.
//! - [`sim`]: the vehicle and planar manipulator plants plus a lifted linear
//!   test plant.
//! - [`bench`]: configuration-driven experiment runner and result sinks.

pub mod bench;
pub mod error;
pub mod gp_baseline;
pub mod ilc;
pub mod kernels;
pub mod linalg;
pub mod qpgp;
pub mod sim;
pub mod trajectory;

pub use error::{Error, Result};
pub use trajectory::ErrorTrajectory;
