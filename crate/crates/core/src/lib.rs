//! Controlled text generation: fused attribute priors for drafting and an
//! energy-guided rewrite loop for refinement.

pub mod backends;
pub mod correlation;
pub mod energy;
pub mod error;
pub mod fusion;
pub mod harness;
pub mod metrics;
pub mod ngram;
pub mod optimizer;
pub mod scoring;
pub mod text;

pub use error::{Error, Result};
