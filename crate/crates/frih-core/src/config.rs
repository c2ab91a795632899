//! Run configuration: one structured file covering model, clustering, and
//! training, with command-line overrides layered on top.

use crate::error::{Error, Result};
use crate::model::{BaseNetConfig, CascadeConfig, ModelConfig};
use crate::train::TrainConfig;
use serde::{Deserialize, Serialize};
use std::path::Path;

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Network input side length (power of two).
    pub resolution: usize,
    pub seed: u64,
    /// Clustering cutoff distance.
    pub dc: f64,
    /// Worker threads; 0 means the runtime default.
    pub threads: usize,
    pub base_channels: Vec<usize>,
    pub cascade_channels: Vec<usize>,
    pub fusion_head_channels: usize,
    pub train: TrainConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        let base = BaseNetConfig::default();
        let cascade = CascadeConfig::default();
        RunConfig {
            resolution: base.input_resolution,
            seed: 0,
            dc: 0.1,
            threads: 0,
            base_channels: base.encoder_channels,
            cascade_channels: cascade.encoder_channels,
            fusion_head_channels: cascade.fusion_head_channels,
            train: TrainConfig::default(),
        }
    }
}

impl RunConfig {
    /// CPU-friendly preset: quarter-width channels at 128 squared. The full
    /// widths remain available through the config file.
    pub fn desk() -> Self {
        RunConfig {
            resolution: 128,
            base_channels: vec![16, 32, 64, 128, 256, 256, 256],
            cascade_channels: vec![8, 8, 16, 16, 16, 16, 16],
            fusion_head_channels: 16,
            ..RunConfig::default()
        }
    }

    pub fn from_file(path: &Path) -> Result<RunConfig> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::data(path.display().to_string(), e.to_string()))?;
        let cfg: RunConfig = toml::from_str(&text).map_err(|e| Error::Config {
            key: path.display().to_string(),
            reason: e.to_string(),
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            base: BaseNetConfig {
                input_resolution: self.resolution,
                encoder_channels: self.base_channels.clone(),
            },
            cascade: CascadeConfig {
                encoder_channels: self.cascade_channels.clone(),
                fusion_head_channels: self.fusion_head_channels,
            },
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.dc > 0.0 && self.dc <= 1.0) {
            return Err(Error::Config {
                key: "dc".into(),
                reason: format!("{} not in (0, 1]", self.dc),
            });
        }
        self.model_config().validate()?;
        self.train.validate()?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_and_desk_configs_validate() {
        RunConfig::default().validate().unwrap();
        RunConfig::desk().validate().unwrap();
    }

    #[test]
    fn toml_round_trip() {
        let cfg = RunConfig::desk();
        let text = toml::to_string(&cfg).unwrap();
        let back: RunConfig = toml::from_str(&text).unwrap();
        assert_eq!(cfg, back);
    }

    #[test]
    fn partial_file_fills_defaults() {
        let cfg: RunConfig = toml::from_str("resolution = 128\ndc = 0.2\n").unwrap();
        assert_eq!(cfg.resolution, 128);
        assert_eq!(cfg.dc, 0.2);
        assert_eq!(cfg.train.lr, 0.008);
    }

    #[test]
    fn bad_values_name_the_key() {
        let cfg = RunConfig {
            dc: 0.0,
            ..RunConfig::default()
        };
        match cfg.validate() {
            Err(Error::Config { key, .. }) => assert_eq!(key, "dc"),
            other => panic!("unexpected {other:?}"),
        }
        let cfg = RunConfig {
            resolution: 48,
            ..RunConfig::default()
        };
        match cfg.validate() {
            Err(Error::Config { key, .. }) => assert_eq!(key, "resolution"),
            other => panic!("unexpected {other:?}"),
        }
        // 64 cannot be downsampled 7 times
        let cfg = RunConfig {
            resolution: 64,
            ..RunConfig::default()
        };
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let err = toml::from_str::<RunConfig>("not_a_key = 1\n").unwrap_err();
        assert!(err.to_string().contains("not_a_key"));
    }
}
