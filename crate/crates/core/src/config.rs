//! Experiment configuration files.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::read_text;
use crate::model::ModelConfig;
use crate::synth::SynthConfig;
use crate::training::TrainConfig;

/// Environment variable that overrides the configured seed.
pub const SEED_ENV: &str = "MAHGCN_SEED";

pub const DEFAULT_SEED: u64 = 42;

/// Everything a run needs; every field has a default.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub synth: SynthConfig,
    pub seed: u64,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            synth: SynthConfig::default(),
            seed: DEFAULT_SEED,
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        self.synth.validate()
    }

    /// Parses JSON text, fills defaults and validates.
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Loads `path`, then applies the seed override from the environment.
    pub fn load(path: Option<&Path>) -> Result<Self> {
        let mut cfg = match path {
            Some(p) => Self::from_json(&read_text(p)?)
                .map_err(|e| Error::Config(format!("{}: {}", p.display(), strip_prefix(&e))))?,
            None => Self::default(),
        };
        if let Ok(v) = std::env::var(SEED_ENV) {
            cfg.seed = parse_seed(&v)?;
        }
        Ok(cfg)
    }

    pub fn to_json(&self) -> serde_json::Value {
        serde_json::to_value(self).expect("config serialises")
    }
}

fn strip_prefix(e: &Error) -> String {
    match e {
        Error::Config(m) => m.clone(),
        other => other.to_string(),
    }
}

pub fn parse_seed(v: &str) -> Result<u64> {
    v.trim()
        .parse()
        .map_err(|_| Error::Config(format!("{SEED_ENV}: {v:?} is not an unsigned 64-bit integer")))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::atlas::PoolingScheme;

    #[test]
    fn empty_object_gives_defaults() {
        let c = ExperimentConfig::from_json("{}").unwrap();
        assert_eq!(c, ExperimentConfig::default());
        assert_eq!(c.model.scales, vec![500, 400, 300, 200, 100]);
        assert_eq!((c.train.epochs, c.train.learning_rate, c.train.batch_size), (100, 0.001, 30));
        assert_eq!((c.train.weight_decay, c.train.repeats, c.train.test_fraction), (0.01, 5, 0.2));
        assert_eq!((c.model.dropout_rate, c.model.th, c.model.skip_connections), (0.3, 0.0, true));
    }

    #[test]
    fn pooling_is_selected_by_name() {
        let c = ExperimentConfig::from_json(r#"{"model":{"pooling_scheme":"max"}}"#).unwrap();
        assert_eq!(c.model.pooling_scheme, PoolingScheme::Max);
    }

    #[test]
    fn errors_name_the_key() {
        let e = ExperimentConfig::from_json(r#"{"model":{"th":1.5}}"#).unwrap_err();
        assert!(matches!(e, Error::Config(_)));
        assert!(e.to_string().contains("th"), "{e}");
        let e = ExperimentConfig::from_json(r#"{"train":{"epochz":3}}"#).unwrap_err();
        assert!(e.to_string().contains("epochz"), "{e}");
        let e = ExperimentConfig::from_json(r#"{"model":{"dropout_rate":"x"}}"#).unwrap_err();
        assert!(matches!(e, Error::Config(_)));
        assert!(parse_seed("12a").is_err());
        assert_eq!(parse_seed(" 7 ").unwrap(), 7);
    }
}
