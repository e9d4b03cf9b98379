//! Run configuration, persistence formats, and the sweep runner.

pub mod config;
pub mod runner;
pub mod snapshot;
