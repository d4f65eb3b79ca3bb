//! Randomize-then-optimize (RTO) MCMC for hierarchical Bayesian inverse
//! problems.
//!
//! A problem couples a nonlinear forward map with a Gaussian random-field
//! prior whose precision `delta P_gamma` comes from an SPDE discretization,
//! and Gaussian or Poisson observations with precision/intensity `lambda`.
//! The hyperparameters `theta = (lambda, delta, gamma)` are sampled jointly
//! with the field `u` by
//!
//! * [`samplers::rto_mh`]: RTO Metropolis-Hastings at fixed `theta`,
//! * [`samplers::estimate_marginal_likelihood`]: RTO importance sampling of
//!   `p(y | theta)`,
//! * [`samplers::rto_within_gibbs`]: blocked Gibbs over `u`, `(lambda, delta)`
//!   and `gamma`,
//! * [`samplers::rto_pm`]: pseudo-marginal MCMC on `theta` with `u` drawn
//!   alongside.
//!
//! [`setup`] builds the two benchmark problems (a 1D elliptic PDE and 2D
//! emission tomography) with synthetic data.

// `!(x > 0.0)` is deliberate throughout: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod diagnostics;
pub mod error;
pub mod forward;
pub mod grid;
pub mod linalg;
pub mod parallel;
pub mod posterior;
pub mod prior;
pub mod rto;
pub mod samplers;
pub mod setup;

pub use error::{Error, Result};

pub const VERSION: &str = env!("CARGO_PKG_VERSION");
