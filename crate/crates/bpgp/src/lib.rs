//! Asymptotically exact MCMC for variationally sparse Gaussian processes.
//!
//! The crate implements a signed, doubly stochastic block-Poisson
//! pseudo-marginal sampler for the whitened sparse variational posterior of a
//! two-level non-stationary GP regression model, together with a
//! Gauss-Hermite approximate baseline, the estimator tuning pipeline,
//! sign-corrected posterior summaries, and a CLI experiment harness.

pub mod analysis;
pub mod error;
pub mod estimator;
pub mod harness;
pub mod kernels;
pub mod math;
pub mod model;
pub mod quadrature;
pub mod samplers;
pub mod tuning;

pub use error::{Error, Result};
