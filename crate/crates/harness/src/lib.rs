//! Training, evaluation, experiments and the command-line interface for the
//! multi-modal fusion laboratory.

pub mod cli;
pub mod config;
pub mod data;
pub mod error;
pub mod eval;
pub mod experiments;
pub mod metrics;
pub mod train;

pub use error::{HarnessError, Result};
