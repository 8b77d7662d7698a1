//! Experiment layer: configuration, run directories and the validation suite.

pub mod config;
pub mod run;
pub mod store;
pub mod validate;
