//! Experiment configuration and the batch runner behind the `scatsense` binary.

pub mod config;
pub mod runner;
