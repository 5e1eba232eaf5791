//! Supervised training machinery shared by every learned stage.

mod augment;
pub mod checkpoint;
mod config;
mod trainer;

pub use augment::{augment, Augment, Transform};
pub use config::{lr_at, AugmentConfig, OptimizerConfig, TrainConfig};
pub use trainer::{split_indices, train, EpochLog, Evaluation, LossReport, TrainReport, Trainable};

#[cfg(test)]
mod tests;
