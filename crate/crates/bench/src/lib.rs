//! Experiment front-end for the polysim simulator: TOML config, the
//! experiment presets, sweep outputs and the scheduler microbenchmark.

pub mod analyze;
pub mod config;
pub mod runner;
pub mod sched_bench;
pub mod svg;

pub use config::{Config, ConfigError};
pub use runner::RunError;
