//! Reproducible command-line runs of the segmentation pipeline: phantom
//! generation, training, inference and evaluation driven by one YAML run
//! configuration with flag overrides.

pub mod args;
pub mod commands;
pub mod config;
pub mod experiment;
pub mod render;

pub use config::RunConfig;
