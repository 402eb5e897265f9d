//! Stochastic concept bottleneck models.
//!
//! Concept logits are modelled as a multivariate normal whose mean (and,
//! for the amortized variant, Cholesky factor) is predicted from the input.
//! Interventions on a subset of concepts propagate to the rest through the
//! conditional Gaussian.

pub mod error;
pub mod experiment;
pub mod format;
pub mod gauss;
pub mod intervention;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod rng;
pub mod synth;
pub mod tensor;

pub use error::{Error, FormatError, Result};
