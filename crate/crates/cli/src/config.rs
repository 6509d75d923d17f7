//! `--config` TOML file.
//!
//! ```toml
//! [split]
//! test = 0.2
//! validation = 0.1
//!
//! [model]
//! embed_dim = 64
//! num_layers = 3
//!
//! [train]
//! learning_rate = 0.001
//! weight_decay = 0.0001
//! max_epochs = 400
//! ```
//!
//! The number of aspects always comes from the graphs, and `--seed` overrides
//! any seed in the file.

use std::path::Path;

use anyhow::{Context, Result};
use serde::{Deserialize, Serialize};

use sagcn::{ModelConfig, TrainConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SplitConfig {
    pub test: f64,
    pub validation: f64,
}

impl Default for SplitConfig {
    fn default() -> Self {
        Self {
            test: 0.2,
            validation: 0.1,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Config {
    pub split: SplitConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
}

impl Config {
    pub fn load(path: Option<&Path>, seed: u64) -> Result<Self> {
        let mut cfg: Config = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
                toml::from_str(&text).with_context(|| format!("parsing {}", p.display()))?
            }
            None => Config::default(),
        };
        cfg.model.seed = seed;
        cfg.train.seed = seed;
        Ok(cfg)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn partial_file_keeps_defaults() {
        let cfg: Config = toml::from_str("[train]\nlearning_rate = 0.01\n[model]\nnum_layers = 2\n").unwrap();
        assert_eq!(cfg.train.learning_rate, 0.01);
        assert_eq!(cfg.train.batch_size, 1024);
        assert_eq!(cfg.train.patience, 20);
        assert_eq!(cfg.model.num_layers, 2);
        assert_eq!(cfg.model.embed_dim, 64);
        assert_eq!(cfg.split.test, 0.2);
    }

    #[test]
    fn unknown_split_key_is_rejected() {
        assert!(toml::from_str::<Config>("[split]\ntset = 0.2\n").is_err());
    }
}
