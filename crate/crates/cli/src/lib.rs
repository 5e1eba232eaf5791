//! Command-line front end: configuration, datasets, model stages, the end-to-end pipeline
//! and the ablation suite.

pub mod ablation;
pub mod commands;
pub mod config;
pub mod datasets;
pub mod eval;
pub mod models;
pub mod pipeline;
