//! Simulation and finite-key analysis for a polarization-encoded three-state
//! (simplified BB84) decoy-state QKD link, together with estimators for the
//! source imperfections that matter at high clock rates: state-preparation
//! correlations, decoy-intensity correlations and residual phase coherence.

// `!(x > 0.0)` guards are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod bloch;
pub mod channel;
pub mod characterize;
pub mod config;
pub mod distill;
pub mod error;
pub mod fixtures;
pub mod labels;
pub mod optimize;
pub mod protocol;
pub mod source;
pub mod tally;

pub use error::{QkdError, Result};
pub use labels::{Basis, Detector, Intensity, PerIntensity, PerState, StateLabel};
