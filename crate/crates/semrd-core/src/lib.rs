//! Task-oriented semantic rate-distortion for discrete sources.
//!
//! The library centers on an alternating-minimization solver that trades off
//! coding rate, reconstruction distortion, and the information a reconstruction
//! retains about a downstream task variable. Around it sit the supporting
//! pieces of an end-to-end system: task-relevant distortion measures, exact
//! finite-alphabet probability routines, variational bounds, a sample-based
//! mutual-information estimator, an integer codec (Gaussian-mixture PMF plus
//! range coder), channel simulation, and a pipeline that sweeps the whole
//! chain over (lambda, beta, channel) grids.
//!
//! All information quantities are computed internally in nats; bits appear
//! only at reporting boundaries.

pub mod bounds;
pub mod channel;
pub mod codec;
pub mod distortion;
pub mod error;
pub mod estimators;
pub mod experiments;
mod par;
pub mod prob;
pub mod solver;

pub use error::{Error, Result};
