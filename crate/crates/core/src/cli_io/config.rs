use std::path::Path;

use crate::error::{Error, Result};
use crate::evaluation::ExperimentConfig;

/// Parses a TOML experiment config; unknown keys are errors.
pub fn parse_config(text: &str) -> Result<ExperimentConfig> {
    let cfg: ExperimentConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
    cfg.validate()?;
    Ok(cfg)
}

pub fn config_to_string(cfg: &ExperimentConfig) -> Result<String> {
    toml::to_string(cfg).map_err(|e| Error::Config(e.to_string()))
}

/// Reads and parses a config file. A relative `[data] path` is resolved
/// against the config file's directory.
pub fn load_config(path: &Path) -> Result<ExperimentConfig> {
    let text = std::fs::read_to_string(path)?;
    let mut cfg = parse_config(&text)?;
    if let Some(data) = cfg.data.as_mut() {
        if data.path.is_relative() {
            if let Some(dir) = path.parent() {
                data.path = dir.join(&data.path);
            }
        }
    }
    Ok(cfg)
}
