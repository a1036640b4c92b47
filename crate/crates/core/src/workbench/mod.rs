//! Experiment workbench: configuration, persistence, scoring and the
//! subcommands behind the `kma` binary.

pub mod commands;
pub mod config;
pub mod metrics;
pub mod persist;

pub use commands::{baselines, control, gen_data, predict, report, run, Task};
pub use config::ExperimentConfig;
