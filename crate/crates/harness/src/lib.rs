//! Experiment harness around `varred-gp`: configs, datasets, the four
//! experiments and their CSV outputs.

pub mod cli;
pub mod config;
pub mod data;
pub mod error;
pub mod experiments;
pub mod output;

pub use error::{HarnessError, Result};
