//! Structural estimation of factor-biased learning by exporting: nested CES
//! production with factor-augmenting productivity, two-step GMM, productivity
//! laws of motion, propensity-score matching and event studies.

pub mod ces;
pub mod estimate;
pub mod error;
pub mod exec;
pub mod numerics;
pub mod panel;
pub mod synth;
pub mod treatment;

pub use error::{Error, Result};
pub use exec::Execution;

pub const VERSION: &str = env!("CARGO_PKG_VERSION");
