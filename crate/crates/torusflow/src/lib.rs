//! Host-side companion of `torusflow-core`: configuration, file formats,
//! run directories with checksummed manifests, SVG plots, a thread-pool
//! replica runner and the `torusflow` command-line driver.

pub mod commands;
pub mod config;
pub mod format;
pub mod manifest;
pub mod plot;
pub mod report;
pub mod runner;

pub use torusflow_core as core;
