//! Combining a large confounded observational sample with a small
//! instrumental-variable sample to estimate conditional average treatment
//! effects.

pub mod bench;
pub mod data401k;
pub mod dgp;
pub mod error;
pub mod estimators;
pub mod learners;
pub mod tabular;

pub use error::{Error, Result};
