//! Model configuration files.
//!
//! A config is a TOML table with any of the keys `num_layers`,
//! `num_experts`, `top_k`, `model_dim`, `hidden_dim`, `vocab_size` and
//! `seed`. Missing keys take the desk-scale defaults; unknown keys are
//! rejected.

use std::fs;
use std::path::Path;

use routelens_core::model::ModelConfig;
use serde::{Deserialize, Serialize};

use crate::error::{CliError, CliResult};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfigFile {
    pub num_layers: usize,
    pub num_experts: usize,
    pub top_k: usize,
    pub model_dim: usize,
    pub hidden_dim: usize,
    pub vocab_size: usize,
    pub seed: u64,
}

impl Default for ModelConfigFile {
    fn default() -> Self {
        ModelConfigFile::from(ModelConfig::default())
    }
}

impl From<ModelConfig> for ModelConfigFile {
    fn from(c: ModelConfig) -> Self {
        ModelConfigFile {
            num_layers: c.num_layers,
            num_experts: c.num_experts,
            top_k: c.top_k,
            model_dim: c.model_dim,
            hidden_dim: c.hidden_dim,
            vocab_size: c.vocab_size,
            seed: c.seed,
        }
    }
}

impl From<ModelConfigFile> for ModelConfig {
    fn from(c: ModelConfigFile) -> Self {
        ModelConfig {
            num_layers: c.num_layers,
            num_experts: c.num_experts,
            top_k: c.top_k,
            model_dim: c.model_dim,
            hidden_dim: c.hidden_dim,
            vocab_size: c.vocab_size,
            seed: c.seed,
        }
    }
}

pub fn parse_model_config(text: &str) -> CliResult<ModelConfig> {
    let file: ModelConfigFile =
        toml::from_str(text).map_err(|e| CliError::Validation(format!("model config: {e}")))?;
    let config = ModelConfig::from(file);
    config
        .validate()
        .map_err(|e| CliError::invalid("model config", e))?;
    Ok(config)
}

/// Reads `path`, or returns the defaults when no path is given. `seed`
/// overrides the file's seed.
pub fn load_model_config(path: Option<&Path>, seed: Option<u64>) -> CliResult<ModelConfig> {
    let mut config = match path {
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| CliError::io(p, e))?;
            parse_model_config(&text).map_err(|e| CliError::Validation(format!("{}: {e}", p.display())))?
        }
        None => ModelConfig::default(),
    };
    if let Some(s) = seed {
        config.seed = s;
    }
    Ok(config)
}

pub fn render_model_config(config: &ModelConfig) -> String {
    toml::to_string(&ModelConfigFile::from(*config)).expect("plain integers serialize")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn partial_file_uses_defaults() {
        let c = parse_model_config("num_layers = 2\nseed = 9\n").unwrap();
        assert_eq!(c.num_layers, 2);
        assert_eq!(c.seed, 9);
        assert_eq!(c.num_experts, ModelConfig::default().num_experts);
    }

    #[test]
    fn unknown_key_and_bad_values_rejected() {
        assert!(parse_model_config("layers = 2").is_err());
        assert!(parse_model_config("top_k = 9\nnum_experts = 8").is_err());
        assert!(parse_model_config("num_layers = -1").is_err());
    }

    #[test]
    fn render_round_trips() {
        let c = ModelConfig {
            seed: 7,
            ..ModelConfig::default()
        };
        assert_eq!(parse_model_config(&render_model_config(&c)).unwrap(), c);
    }
}
