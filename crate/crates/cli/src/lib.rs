//! Experiment runner for the tensor-network quantum protocols in `qtn-core`.

pub mod config;
pub mod output;
pub mod pipeline;
pub mod plots;
