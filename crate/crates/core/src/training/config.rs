use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimizerConfig {
    /// Only "adam" is supported.
    pub name: String,
    pub beta1: f64,
    pub beta2: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self { name: "adam".into(), beta1: 0.9, beta2: 0.999 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentConfig {
    pub horizontal_flip: bool,
    /// Rotation angle drawn uniformly from this range, in degrees.
    pub rotation_degrees: (f64, f64),
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self { horizontal_flip: true, rotation_degrees: (-10.0, 10.0) }
    }
}

impl AugmentConfig {
    pub fn none() -> Self {
        Self { horizontal_flip: false, rotation_degrees: (0.0, 0.0) }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub optimizer: OptimizerConfig,
    pub initial_lr: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub lr_drop_epochs: Vec<usize>,
    pub lr_drop_factor: f64,
    pub augmentation: AugmentConfig,
    pub seed: u64,
    /// Fraction of samples held out for validation.
    pub val_fraction: f64,
    /// Random horizontal crop width used for training batches; `None` trains on full images.
    pub crop_width: Option<usize>,
    pub checkpoint_dir: Option<PathBuf>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            optimizer: OptimizerConfig::default(),
            initial_lr: 0.01,
            batch_size: 4,
            max_epochs: 300,
            lr_drop_epochs: vec![40, 80, 160, 240],
            lr_drop_factor: 0.1,
            augmentation: AugmentConfig::default(),
            seed: 0,
            val_fraction: 0.1,
            crop_width: None,
            checkpoint_dir: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |key: &str, msg: String| Err(Error::config(format!("train.{key}"), msg));
        if self.optimizer.name != "adam" {
            return bad("optimizer.name", format!("unsupported optimizer '{}'", self.optimizer.name));
        }
        for (k, b) in [("optimizer.beta1", self.optimizer.beta1), ("optimizer.beta2", self.optimizer.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return bad(k, format!("must lie in [0, 1), got {b}"));
            }
        }
        if !(self.initial_lr >= 0.0 && self.initial_lr.is_finite()) {
            return bad("initial_lr", format!("must be a finite non-negative number, got {}", self.initial_lr));
        }
        if self.batch_size == 0 {
            return bad("batch_size", "must be at least 1".into());
        }
        if !(self.lr_drop_factor > 0.0 && self.lr_drop_factor < 1.0) {
            return bad("lr_drop_factor", format!("must lie in (0, 1), got {}", self.lr_drop_factor));
        }
        if !(0.0..1.0).contains(&self.val_fraction) {
            return bad("val_fraction", format!("must lie in [0, 1), got {}", self.val_fraction));
        }
        let (lo, hi) = self.augmentation.rotation_degrees;
        if !(lo <= hi && lo.is_finite() && hi.is_finite()) {
            return bad("augmentation.rotation_degrees", format!("invalid range ({lo}, {hi})"));
        }
        if self.crop_width == Some(0) {
            return bad("crop_width", "must be positive".into());
        }
        Ok(())
    }
}

/// Learning rate after every drop epoch that is `<= epoch`.
pub fn lr_at(config: &TrainConfig, epoch: usize) -> f64 {
    let drops = config.lr_drop_epochs.iter().filter(|&&e| e <= epoch).count();
    config.initial_lr * config.lr_drop_factor.powi(drops as i32)
}
