//! Training configuration as a flat TOML file.
//!
//! Keys match the field names of [`TrainConfig`] and [`LossConfig`]; loss
//! and architecture keys sit at the top level next to the optimiser ones.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{arg, Error, Result};
use crate::model::{DecoderKind, ModelConfig};
use crate::objectives::LossConfig;

/// Architecture hyperparameters that do not depend on the dataset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Architecture {
    pub decoder: DecoderKind,
    pub channels: [usize; 3],
    pub temporal_kernel: usize,
    pub decoder_channels: usize,
    pub embed_dim: usize,
    pub batch_norm: bool,
}

impl Default for Architecture {
    fn default() -> Self {
        Self {
            decoder: DecoderKind::Teu,
            channels: [8, 16, 16],
            temporal_kernel: 5,
            decoder_channels: 16,
            embed_dim: 16,
            batch_norm: true,
        }
    }
}

impl Architecture {
    pub fn model_config(&self, joints: usize, num_classes: usize) -> ModelConfig {
        ModelConfig {
            joints,
            num_classes,
            channels: self.channels,
            temporal_kernel: self.temporal_kernel,
            decoder: self.decoder,
            decoder_channels: self.decoder_channels,
            embed_dim: self.embed_dim,
            batch_norm: self.batch_norm,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub epochs: usize,
    pub lr0: f64,
    pub lr_decay: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub seed: u64,
    pub mixup_enabled: bool,
    pub tc_loss_enabled: bool,
    #[serde(flatten)]
    pub loss: LossConfig,
    #[serde(flatten)]
    pub arch: Architecture,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 4,
            epochs: 30,
            lr0: 0.025,
            lr_decay: 0.95,
            momentum: 0.9,
            weight_decay: 0.001,
            seed: 0,
            mixup_enabled: true,
            tc_loss_enabled: true,
            loss: LossConfig::default(),
            arch: Architecture::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return arg("batch_size must be >= 1");
        }
        if self.epochs == 0 {
            return arg("epochs must be >= 1");
        }
        if !(self.lr0 >= 0.0 && self.lr0.is_finite()) {
            return arg("lr0 must be finite and >= 0");
        }
        if !(self.lr_decay > 0.0 && self.lr_decay <= 1.0) {
            return arg("lr_decay must be in (0, 1]");
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return arg("momentum must be in [0, 1)");
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return arg("weight_decay must be finite and >= 0");
        }
        self.loss.validate()?;
        self.arch.model_config(1, 2).validate()
    }

    /// Learning rate during epoch `epoch` (0-based).
    pub fn lr_at(&self, epoch: usize) -> f64 {
        self.lr0 * self.lr_decay.powi(epoch as i32)
    }

    fn known_keys() -> Vec<String> {
        toml::Table::try_from(Self::default())
            .expect("default config serialises")
            .keys()
            .cloned()
            .collect()
    }

    /// Parses a flat TOML document; unknown keys are rejected and missing
    /// keys take their defaults.
    pub fn from_toml(text: &str) -> Result<Self> {
        let table: toml::Table = text.parse().map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        let known = Self::known_keys();
        if let Some(key) = table.keys().find(|k| !known.contains(k)) {
            return Err(Error::Config(format!("unknown config key '{key}'")));
        }
        let config: Self = table.try_into().map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        config.validate().map_err(|e| Error::Config(e.to_string()))?;
        Ok(config)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_toml(&std::fs::read_to_string(path)?)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serialises")
    }

    /// Sets one key from its TOML value text, e.g. `("epochs", "5")`.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let mut table = toml::Table::try_from(&*self).expect("config serialises");
        if !table.contains_key(key) {
            return Err(Error::Config(format!("unknown config key '{key}'")));
        }
        let parsed: toml::Table = format!("v = {value}")
            .parse()
            .or_else(|_| format!("v = {value:?}").parse())
            .map_err(|e: toml::de::Error| Error::Config(format!("{key}: {e}")))?;
        table.insert(key.to_string(), parsed["v"].clone());
        *self = table
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(format!("{key}: {e}")))?;
        self.validate().map_err(|e| Error::Config(e.to_string()))
    }

    /// SHA-256 of the canonical TOML rendering, hex encoded.
    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(self.to_toml().as_bytes()))
    }
}
