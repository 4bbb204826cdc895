//! Std companion to `multiid-core`: run configuration, PNG files, the
//! benchmark builder and validator, evaluation reports and the `multiid`
//! command line.

pub mod bench;
pub mod cli;
pub mod config;
pub mod error;
pub mod eval;
pub mod imageio;
pub mod run;

pub use error::{AppError, AppResult};
