//! Uncertainty-aware optimal control from sparse, noisy output measurements.
//!
//! The pipeline: infer ODE parameters and the latent initial state with a
//! marginal Metropolis-Hastings sampler whose likelihood comes from numerical
//! integration ([`mmh`]), propagate the posterior samples to the start of the
//! control horizon, and plan one input trajectory that is feasible and cheap
//! across all of them ([`ocp`]). [`glucose`] holds the Bergman minimal-model
//! case study, [`ekf`] the nominal-model baseline and [`experiment`] the
//! Monte Carlo harness behind the CLI.

pub mod ode;
pub mod model;
pub mod glucose;
pub mod mmh;
pub mod ocp;
pub mod ekf;
pub mod experiment;

mod error;

pub use error::{Error, ErrorCategory};
