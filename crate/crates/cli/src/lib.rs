//! Experiment runner behind the `fedgnn` binary.

pub mod commands;
pub mod config;
pub mod error;
pub mod experiment;
pub mod modelfile;
pub mod output;
