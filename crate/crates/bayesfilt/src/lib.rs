//! Sequential Bayesian inference for nonlinear state-space models.
//!
//! The crate provides a family of recursive estimators — an unscented Kalman
//! filter, bootstrap / mutated / sigma-point / Gaussian-mixture particle
//! filters, a Rao-Blackwellised particle filter and a dual Kalman/unscented
//! scheme for unknown inputs — over a shared model abstraction, together with
//! a three-degree-of-freedom structural benchmark and a runner that scores
//! filters against simulated ground truth.
//!
//! The estimation problem is the usual one: a latent state `x_k` evolves
//! through a (possibly nonlinear) transition `x_k = G(x_{k-1}, p_{k-1}) + v`,
//! measurements arrive as `y_k = H(x_k, p_k) + w`, and each filter maintains
//! an approximation of `p(x_k | y_1..y_k)` that is updated one measurement at
//! a time. Parameters are estimated by state augmentation; unknown inputs by
//! the dual filter.

pub mod benchmark;
pub mod config;
pub mod dual;
pub mod error;
pub mod gaussian;
pub mod gmsppf;
pub mod model;
pub mod mpf;
pub mod particle;
pub mod rbpf;
pub mod rng;
pub mod runner;
pub mod sppf;
pub mod ukf;

pub use error::FilterError;
pub use gaussian::GaussianBelief;
pub use model::StateSpaceModel;

/// Crate-wide result alias.
pub type Result<T> = std::result::Result<T, FilterError>;
