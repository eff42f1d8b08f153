//! Runnable experiments around `tnn-core`: synthetic data, checkpoints,
//! throttle curves, controller evaluation and timing.

pub mod bench;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod eval;
pub mod experiment;
pub mod manifest;
