//! Experiment harness for tp-/gp-NICA: data generation, training,
//! evaluation and parameter sweeps.

pub mod commands;
pub mod config;
pub mod error;
pub mod svg;
pub mod sweep;

pub use error::{CliError, Result};
