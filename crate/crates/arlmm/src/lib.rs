//! Approximate-ridge linear mixed models (arLMM): solvers for ℓ2-regularized
//! LMMs in the high-dimensional regime, built on SRHT-sketched kernel
//! estimators — dual and fast fixed-effects estimates, closed-form approximate
//! variance components, and a fast EM for grouped data — together with exact
//! small-scale oracles, synthetic data generation, evaluation metrics, and an
//! empirical harness that checks the method's probabilistic error bounds.

pub mod avc;
pub mod datagen;
pub mod em;
pub mod error;
pub mod estimators;
pub mod metrics;
pub mod model;
pub mod oracle;
pub mod sketch;
pub mod verify;

pub use error::{Error, Result};
