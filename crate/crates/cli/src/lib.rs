//! Stage orchestration for the `lbe` command: configuration, artifact
//! persistence and manifests.

pub mod config;
pub mod error;
pub mod manifest;
pub mod stages;

pub use config::{Overrides, RunConfig};
pub use error::CliError;
pub use stages::{Outcome, Runner, Stage};
