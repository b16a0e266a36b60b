use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::auxweight::StrategyConfig;
use crate::data::{BagSpec, DatasetManifest, SplitCounts};
use crate::error::{Error, Result};
use crate::model::EncoderConfig;

/// Where training data comes from: a directory written by `gen-data`, or
/// generated in memory from `seed`, `counts` and `spec`.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub dir: Option<PathBuf>,
    pub seed: u64,
    pub counts: SplitCounts,
    pub spec: BagSpec,
}

impl DataConfig {
    pub fn manifest(&self) -> DatasetManifest {
        DatasetManifest::new(self.seed, self.counts, self.spec.clone())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub lr: f64,
    /// The learning rate is divided by this factor after `decay_after` epochs.
    pub lr_decay_factor: f64,
    pub decay_after: u64,
    pub epochs: u64,
    /// Seeds weight initialisation and the per-epoch bag order.
    pub seed: u64,
    /// Save a checkpoint every this many epochs (0 = only the best one).
    pub checkpoint_every: u64,
    pub encoder: EncoderConfig,
    pub strategy: StrategyConfig,
    pub data: DataConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 0.0005,
            lr_decay_factor: 10.0,
            decay_after: 100,
            epochs: 200,
            seed: 0,
            checkpoint_every: 0,
            encoder: EncoderConfig::default(),
            strategy: StrategyConfig::default(),
            data: DataConfig::default(),
        }
    }
}

impl TrainConfig {
    /// Binary task at the scale a single core finishes in minutes.
    pub fn desk() -> Self {
        Self {
            encoder: EncoderConfig::desk(),
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::config(format!(
                "lr must be positive, got {}",
                self.lr
            )));
        }
        if !(self.lr_decay_factor >= 1.0 && self.lr_decay_factor.is_finite()) {
            return Err(Error::config(format!(
                "lr_decay_factor must be at least 1, got {}",
                self.lr_decay_factor
            )));
        }
        if self.epochs == 0 {
            return Err(Error::config("epochs must be at least 1"));
        }
        self.encoder.validate()?;
        self.strategy.validate()?;
        self.data.spec.validate()?;
        if self.encoder.main_classes != self.data.spec.classes() {
            return Err(Error::config(format!(
                "encoder has {} main classes, the {:?} label scheme has {}",
                self.encoder.main_classes,
                self.data.spec.scheme,
                self.data.spec.classes()
            )));
        }
        if self.encoder.aux_classes != 2 {
            return Err(Error::config(format!(
                "the component-count aux task has 2 classes, encoder has {}",
                self.encoder.aux_classes
            )));
        }
        Ok(())
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml(&fs::read_to_string(path)?)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Internal(e.to_string()))
    }
}

/// Learning rate for 1-based `epoch`: `lr` up to `decay_after`, then divided by the decay factor.
pub fn lr_schedule(epoch: u64, cfg: &TrainConfig) -> f64 {
    if epoch <= cfg.decay_after {
        cfg.lr
    } else {
        cfg.lr / cfg.lr_decay_factor
    }
}
