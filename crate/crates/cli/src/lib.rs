//! Experiment drivers behind the `sdex` binary.

pub mod commands;
pub mod config;
pub mod output;
