use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::SceneConfig;
use crate::loss::LossConfig;
use crate::model::{ModelConfig, Variant};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("bad config: {0}")]
    Parse(#[from] toml::de::Error),
    #[error("invalid config: {0}")]
    Invalid(String),
}

/// Where the training and evaluation scenes come from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub train_count: usize,
    pub eval_count: usize,
    /// Evaluation scenes start at this stream index, after the training ones.
    pub eval_offset: u64,
    pub scene: SceneConfig,
    /// Boundary jitter radius applied to training labels.
    pub noise_radius: usize,
    pub flip_prob: f64,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            train_count: 200,
            eval_count: 50,
            eval_offset: 100_000,
            scene: SceneConfig::default(),
            noise_radius: 0,
            flip_prob: 0.5,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub base_lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub poly_power: f64,
    pub warmup_iters: usize,
    pub max_iters: usize,
    pub clip_norm: f64,
    pub batch_size: usize,
    pub seed: u64,
    /// Evaluate every this many iterations; 0 evaluates only at the end.
    pub eval_interval: usize,
    pub log_interval: usize,
    /// Overrides the module flags in `model` when set.
    pub variant: Option<Variant>,
    pub model: ModelConfig,
    pub loss: LossConfig,
    pub data: DataConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            base_lr: 0.01,
            momentum: 0.9,
            weight_decay: 4e-5,
            poly_power: 0.9,
            warmup_iters: 100,
            max_iters: 2000,
            clip_norm: 35.0,
            batch_size: 4,
            seed: 0,
            eval_interval: 0,
            log_interval: 50,
            variant: None,
            model: ModelConfig::default(),
            loss: LossConfig::default(),
            data: DataConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn from_toml(text: &str) -> Result<Self, ConfigError> {
        let cfg: Self = toml::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("train config serialises")
    }

    /// The model configuration with the variant flags applied.
    pub fn model_config(&self) -> ModelConfig {
        match self.variant {
            Some(v) => self.model.clone().with_variant(v),
            None => self.model.clone(),
        }
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let bad = |m: &str| Err(ConfigError::Invalid(m.to_string()));
        // max_iters = 0 is an untrained run and has no schedule to speak of
        if self.max_iters > 0 && self.warmup_iters >= self.max_iters {
            return bad("warmup_iters must be below max_iters");
        }
        if !(self.base_lr > 0.0 && self.clip_norm > 0.0 && self.poly_power > 0.0) {
            return bad("base_lr, clip_norm and poly_power must be positive");
        }
        if !(0.0..1.0).contains(&self.momentum) || self.weight_decay < 0.0 {
            return bad("momentum must lie in [0, 1) and weight_decay must be non-negative");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be positive");
        }
        if self.data.train_count == 0 {
            return bad("the training set is empty");
        }
        if !(0.0..=1.0).contains(&self.data.flip_prob) {
            return bad("flip_prob must lie in [0, 1]");
        }
        let (h, w) = (self.data.scene.height, self.data.scene.width);
        if h % 16 != 0 || w % 16 != 0 || h < 32 || w < 32 {
            return bad("scene extents must be multiples of 16 and at least 32");
        }
        self.model_config()
            .validate()
            .map_err(|e| ConfigError::Invalid(e.to_string()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_roundtrip_through_toml() {
        let c = TrainConfig::default();
        assert_eq!(TrainConfig::from_toml(&c.to_toml()).unwrap(), c);
    }

    #[test]
    fn partial_files_fill_defaults() {
        let c = TrainConfig::from_toml(
            "max_iters = 300\nvariant = \"baseline\"\n[loss]\nlambda_band = 0.0\n",
        )
        .unwrap();
        assert_eq!(c.max_iters, 300);
        assert_eq!(c.loss.lambda_band, 0.0);
        assert_eq!(c.loss.lambda_point, 1.0);
        assert!(!c.model_config().gltr);
    }

    #[test]
    fn invalid_settings_are_rejected() {
        assert!(TrainConfig::from_toml("warmup_iters = 10\nmax_iters = 10").is_err());
        assert!(TrainConfig::from_toml("base_lr = 0.0").is_err());
        assert!(TrainConfig::from_toml("unknown = 1").is_err());
        assert!(TrainConfig::from_toml("max_iters = 0").is_ok());
    }
}
