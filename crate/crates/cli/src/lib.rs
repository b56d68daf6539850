//! Library surface of the experiment runner; the binary is a thin wrapper so
//! integration tests can drive commands directly.

pub mod commands;
pub mod config;
pub mod plot;
pub mod pool;
pub mod report;

pub use config::ExperimentConfig;
pub use report::RunDir;
