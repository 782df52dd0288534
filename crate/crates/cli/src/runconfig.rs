//! Flat `key = value` run configuration files with `#` comments.
//!
//! Omitted keys take the documented defaults: published model values for
//! `model.*`, desk-scale training values for `train.*`. Unknown keys are
//! rejected by name. The chunk hop is always half the chunk size.

use std::fs;
use std::path::Path;

use dprcnet_core::separator::ModelConfig;
use dprcnet_core::signal::DEFAULT_SAMPLE_RATE;
use dprcnet_core::train::TrainConfig;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("{0}")]
    Io(#[from] std::io::Error),
    #[error("line {line}: unknown key `{key}`")]
    UnknownKey { line: usize, key: String },
    #[error("line {line}: expected `key = value`")]
    BadSyntax { line: usize },
    #[error("line {line}: bad value for `{key}`: {message}")]
    BadValue { line: usize, key: String, message: String },
    #[error("invalid configuration: {0}")]
    Invalid(String),
}

/// Everything a run needs: architecture, training recipe, and data defaults.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub sample_rate: u32,
    pub duration_s: f64,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            model: ModelConfig::paper(),
            train: TrainConfig::default(),
            sample_rate: DEFAULT_SAMPLE_RATE,
            duration_s: 4.0,
        }
    }
}

pub fn parse_file(path: &Path) -> Result<RunConfig, ConfigError> {
    parse_str(&fs::read_to_string(path)?)
}

pub fn parse_str(text: &str) -> Result<RunConfig, ConfigError> {
    let mut cfg = RunConfig::default();
    for (i, raw) in text.lines().enumerate() {
        let line_no = i + 1;
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (key, value) = line
            .split_once('=')
            .ok_or(ConfigError::BadSyntax { line: line_no })?;
        let key = key.trim();
        let value = value.trim();
        if value.is_empty() {
            return Err(ConfigError::BadSyntax { line: line_no });
        }
        apply(&mut cfg, key, value, line_no)?;
    }
    cfg.model.hop = (cfg.model.chunk_size / 2).max(1);
    cfg.model
        .validate()
        .map_err(|e| ConfigError::Invalid(e.to_string()))?;
    Ok(cfg)
}

fn apply(cfg: &mut RunConfig, key: &str, value: &str, line: usize) -> Result<(), ConfigError> {
    fn parse<T: std::str::FromStr>(key: &str, value: &str, line: usize) -> Result<T, ConfigError>
    where
        T::Err: std::fmt::Display,
    {
        value.parse().map_err(|e: T::Err| ConfigError::BadValue {
            line,
            key: key.into(),
            message: e.to_string(),
        })
    }
    fn parse_list(key: &str, value: &str, line: usize) -> Result<Vec<usize>, ConfigError> {
        value
            .split(',')
            .map(|v| parse::<usize>(key, v.trim(), line))
            .collect()
    }
    match key {
        "model.L" => cfg.model.frame_len = parse(key, value, line)?,
        "model.N" => cfg.model.encoder_dim = parse(key, value, line)?,
        "model.B" => cfg.model.bottleneck_dim = parse(key, value, line)?,
        "model.I" => cfg.model.chunk_size = parse(key, value, line)?,
        "model.D" => cfg.model.stage_dims = parse_list(key, value, line)?,
        "model.blocks" => cfg.model.stage_blocks = parse_list(key, value, line)?,
        "model.hidden" => cfg.model.lstm_hidden = parse(key, value, line)?,
        "model.S" => cfg.model.num_speakers = parse(key, value, line)?,
        "model.layerscale_init" => cfg.model.layerscale_init = parse(key, value, line)?,
        "model.droppath_max" => cfg.model.droppath_max = parse(key, value, line)?,
        "train.epochs" => cfg.train.epochs = parse(key, value, line)?,
        "train.lr0" => cfg.train.lr0 = parse(key, value, line)?,
        "train.batch_size" => cfg.train.batch_size = parse(key, value, line)?,
        "train.patience" => cfg.train.patience = parse(key, value, line)?,
        "train.seed" => cfg.train.seed = parse(key, value, line)?,
        "data.sample_rate" => cfg.sample_rate = parse(key, value, line)?,
        "data.duration_s" => cfg.duration_s = parse(key, value, line)?,
        _ => return Err(ConfigError::UnknownKey { line, key: key.into() }),
    }
    // The stride follows the frame length at 50%.
    cfg.model.stride = (cfg.model.frame_len / 2).max(1);
    Ok(())
}
