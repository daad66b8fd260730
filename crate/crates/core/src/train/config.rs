use alloc::vec;
use alloc::vec::Vec;

use super::optim::{cosine_lr, step_lr};
use crate::data::AugmentConfig;
use crate::error::{config_err, Result};
use crate::nas::TemperatureSchedule;

#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields))]
pub enum LrSchedule {
    /// Cosine annealing to zero over the run, without restarts.
    Cosine {},
    /// Multiply by `decay` at every milestone epoch.
    Step { milestones: Vec<usize>, decay: f64 },
}

impl LrSchedule {
    pub fn lr(&self, epoch: usize, epochs: usize, base_lr: f64) -> f64 {
        match self {
            LrSchedule::Cosine {} => cosine_lr(epoch, epochs, base_lr),
            LrSchedule::Step { milestones, decay } => step_lr(epoch, milestones, *decay, base_lr),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(default, deny_unknown_fields))]
pub struct TrainConfig {
    pub batch_size: usize,
    pub epochs: usize,
    pub base_lr: f64,
    pub weight_decay: f64,
    pub momentum: f64,
    pub label_smoothing: f64,
    pub schedule: LrSchedule,
    /// Leading epochs during which only the classifier is updated.
    pub frozen_base_epochs: usize,
    pub augment: AugmentConfig,
    /// Save a checkpoint every this many epochs; 0 disables.
    pub checkpoint_interval: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 32,
            epochs: 60,
            base_lr: 0.065,
            weight_decay: 5e-4,
            momentum: 0.9,
            label_smoothing: 0.1,
            schedule: LrSchedule::Cosine {},
            frozen_base_epochs: 0,
            augment: AugmentConfig::default(),
            checkpoint_interval: 0,
            seed: 0,
        }
    }
}

impl TrainConfig {
    /// Training from scratch with step decay at epochs 150, 225 and 300.
    pub fn from_scratch() -> Self {
        TrainConfig {
            epochs: 350,
            schedule: LrSchedule::Step { milestones: vec![150, 225, 300], decay: 0.1 },
            ..Self::default()
        }
    }

    /// Fine-tuning preset: small learning rate with cosine annealing.
    pub fn fine_tune() -> Self {
        TrainConfig { base_lr: 0.0015, ..Self::default() }
    }

    pub fn lr(&self, epoch: usize) -> f64 {
        self.schedule.lr(epoch, self.epochs, self.base_lr)
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.label_smoothing) {
            return Err(config_err!("label smoothing must lie in [0, 1), got {}", self.label_smoothing));
        }
        if !(self.base_lr > 0.0) || !self.base_lr.is_finite() {
            return Err(config_err!("base_lr must be positive, got {}", self.base_lr));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(config_err!("weight_decay must be non-negative, got {}", self.weight_decay));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(config_err!("momentum must lie in [0, 1), got {}", self.momentum));
        }
        if self.batch_size < 2 {
            return Err(config_err!("batch size must be at least 2 for batch normalisation"));
        }
        if let LrSchedule::Step { decay, .. } = &self.schedule {
            if !(*decay > 0.0 && *decay <= 1.0) {
                return Err(config_err!("step decay must lie in (0, 1], got {decay}"));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(default, deny_unknown_fields))]
pub struct SearchConfig {
    pub train: TrainConfig,
    pub temperature: TemperatureSchedule,
    /// Monte-Carlo samples per gradient estimate.
    pub samples: usize,
    /// Weight decay on the architecture logits.
    pub arch_weight_decay: f64,
}

impl Default for SearchConfig {
    fn default() -> Self {
        SearchConfig {
            train: TrainConfig { base_lr: 0.1, epochs: 120, ..TrainConfig::default() },
            temperature: TemperatureSchedule::default(),
            samples: 1,
            arch_weight_decay: 0.0,
        }
    }
}

impl SearchConfig {
    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        if self.samples == 0 {
            return Err(config_err!("Monte-Carlo sample count must be at least 1"));
        }
        if !(self.temperature.floor > 0.0) {
            return Err(config_err!("temperature floor must be positive"));
        }
        if !(self.arch_weight_decay >= 0.0) {
            return Err(config_err!("arch_weight_decay must be non-negative"));
        }
        Ok(())
    }
}
