//! Monte Carlo simulation of a qubit whose own heterodyne-detected
//! fluorescence drives it back through analog feedback.
//!
//! * [`model`]: Bloch vectors, targets, device parameters.
//! * [`controller`]: the Rabi, FM and Drift boxes and the feedback law.
//! * [`sme`]: the single-trajectory stochastic integrator.
//! * [`ensemble`]: seeded Monte Carlo averages and exponential fits.
//! * [`oracle`]: the Markovian-limit affine generator and its steady state.
//! * [`experiments`]: the sweeps, optimizer and comparisons behind the CLI.

pub mod controller;
pub mod ensemble;
pub mod error;
pub mod experiments;
pub mod model;
pub mod oracle;
pub mod sme;

pub use error::{Error, Result};
