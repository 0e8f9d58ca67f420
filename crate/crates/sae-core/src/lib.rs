//! Small area estimation with spatial priors.
//!
//! This crate fits multivariate Fay-Herriot models to direct survey
//! estimates over an areal graph. Spatial dependence enters through
//! conditional autoregressive (CAR) priors, either sampled exactly (full-rank
//! models) or emulated by a variational-autoencoder decoder trained once per
//! graph and reused across model fits. Posterior inference is Hamiltonian
//! Monte Carlo over hand-differentiated targets.

pub mod autodiff;
pub mod car;
pub mod dense;
pub mod graph;
pub mod hmc;
pub mod metrics;
pub mod models;
pub mod priors;
pub mod sparse;
pub mod study;
pub mod util;
pub mod vae;
