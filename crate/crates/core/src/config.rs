//! Run configuration: one JSON document holding every knob of a
//! pre-training run and its evaluation.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::cluster::ClusterOptions;
use crate::datagen::PriorConfig;
use crate::encoder::EncoderConfig;
use crate::objective::LossConfig;
use crate::trainer::TrainConfig;

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("cannot read config: {0}")]
    Io(#[from] std::io::Error),
    #[error("cannot parse config: {0}")]
    Json(#[from] serde_json::Error),
    #[error("invalid config: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub prior: PriorConfig,
    pub encoder: EncoderConfig,
    pub loss: LossConfig,
    pub train: TrainConfig,
    pub eval: ClusterOptions,
}

impl RunConfig {
    pub fn validate(&self) -> Result<(), ConfigError> {
        let inv = |e: &dyn std::fmt::Display| ConfigError::Invalid(e.to_string());
        self.prior.validate().map_err(|e| inv(&e))?;
        self.encoder.validate().map_err(|e| inv(&e))?;
        self.loss.validate().map_err(|e| inv(&e))?;
        self.train.validate().map_err(|e| inv(&e))?;
        if self.eval.kmeans_n_init == 0 || self.eval.gmm_n_init == 0 {
            return Err(ConfigError::Invalid("eval restarts must be positive".into()));
        }
        Ok(())
    }

    pub fn from_json(s: &str) -> Result<Self, ConfigError> {
        let cfg: Self = serde_json::from_str(s)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate_and_round_trip() {
        let cfg = RunConfig::default();
        cfg.validate().unwrap();
        let json = serde_json::to_string(&cfg).unwrap();
        assert_eq!(RunConfig::from_json(&json).unwrap(), cfg);
    }

    #[test]
    fn unknown_keys_and_bad_values_are_rejected() {
        assert!(matches!(RunConfig::from_json(r#"{"trian": {}}"#), Err(ConfigError::Json(_))));
        assert!(matches!(
            RunConfig::from_json(r#"{"encoder": {"token_dim": 10, "n_heads": 3}}"#),
            Err(ConfigError::Invalid(_))
        ));
        let partial = RunConfig::from_json(r#"{"train": {"total_steps": 50, "warmup_steps": 5}}"#).unwrap();
        assert_eq!(partial.train.total_steps, 50);
        assert_eq!(partial.encoder, EncoderConfig::default());
    }
}
