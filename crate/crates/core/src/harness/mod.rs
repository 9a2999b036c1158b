//! Dataset ingestion, configuration, training, and evaluation runs.

pub mod checkpoint;
pub mod config;
pub mod evalrun;
pub mod gradcheckrun;
pub mod manifest;
pub mod synth;
pub mod train;
