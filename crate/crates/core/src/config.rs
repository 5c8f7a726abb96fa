//! Key=value run configuration.
//!
//! One `key=value` per line; blank lines and lines starting with `#` are
//! ignored. Every value records where it came from so manifests can tell
//! built-in defaults apart from overrides.

use std::collections::BTreeMap;
use std::fmt;
use std::fmt::Write as _;
use std::path::Path;

use thiserror::Error;

use crate::trainer::TrainConfig;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ConfigError {
    #[error("line {line}: expected key=value, got '{text}'")]
    Syntax { line: usize, text: String },
    #[error("unknown config key '{0}'")]
    UnknownKey(String),
    #[error("invalid value '{value}' for '{key}': {reason}")]
    InvalidValue { key: String, value: String, reason: String },
    #[error("cannot read config file {path}: {message}")]
    Io { path: String, message: String },
}

pub type Result<T> = std::result::Result<T, ConfigError>;

/// Where an effective value came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Source {
    Default,
    /// Inferred from the dataset (model dimensions).
    Data,
    Config,
    Flag,
}

impl fmt::Display for Source {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Source::Default => "default",
            Source::Data => "data",
            Source::Config => "config",
            Source::Flag => "flag",
        })
    }
}

/// Every recognised key, in manifest order.
pub const KEYS: &[&str] = &[
    "model.n_blocks",
    "model.in_channels_per_block",
    "model.spatial",
    "model.stream_out_channels",
    "model.attn_hidden_channels",
    "model.fc_sizes",
    "model.seed",
    "loss.alpha_mu",
    "loss.alpha_sigma",
    "loss.lambda",
    "loss.tau",
    "loss.z",
    "train.initial_lr",
    "train.lr_decay_every",
    "train.lr_decay_factor",
    "train.batch_size",
    "train.epochs",
    "train.beta1",
    "train.beta2",
    "train.eps",
    "train.seed",
    "eval.cutoff",
];

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T>
where
    T::Err: fmt::Display,
{
    value.trim().parse::<T>().map_err(|e| ConfigError::InvalidValue {
        key: key.to_string(),
        value: value.to_string(),
        reason: e.to_string(),
    })
}

/// Sets one key on `cfg`. Values are parsed but not range-checked.
pub fn set_value(cfg: &mut TrainConfig, key: &str, value: &str) -> Result<()> {
    let m = &mut cfg.model;
    let l = &mut cfg.loss;
    match key {
        "model.n_blocks" => m.n_blocks = parse(key, value)?,
        "model.in_channels_per_block" => m.in_channels_per_block = parse(key, value)?,
        "model.spatial" => m.spatial = parse(key, value)?,
        "model.stream_out_channels" => m.stream_out_channels = parse(key, value)?,
        "model.attn_hidden_channels" => m.attn_hidden_channels = parse(key, value)?,
        "model.fc_sizes" => {
            let parts: Vec<usize> = value.split(',').map(|p| parse(key, p)).collect::<Result<_>>()?;
            m.fc_sizes = parts.try_into().map_err(|_| ConfigError::InvalidValue {
                key: key.to_string(),
                value: value.to_string(),
                reason: "expected three comma-separated widths".to_string(),
            })?;
        }
        "model.seed" => m.seed = parse(key, value)?,
        "loss.alpha_mu" => l.alpha_mu = parse(key, value)?,
        "loss.alpha_sigma" => l.alpha_sigma = parse(key, value)?,
        "loss.lambda" => l.lambda = parse(key, value)?,
        "loss.tau" => l.tau = parse(key, value)?,
        "loss.z" => l.z = parse(key, value)?,
        "train.initial_lr" => cfg.initial_lr = parse(key, value)?,
        "train.lr_decay_every" => cfg.lr_decay_every = parse(key, value)?,
        "train.lr_decay_factor" => cfg.lr_decay_factor = parse(key, value)?,
        "train.batch_size" => cfg.batch_size = parse(key, value)?,
        "train.epochs" => cfg.epochs = parse(key, value)?,
        "train.beta1" => cfg.beta1 = parse(key, value)?,
        "train.beta2" => cfg.beta2 = parse(key, value)?,
        "train.eps" => cfg.eps = parse(key, value)?,
        "train.seed" => cfg.seed = parse(key, value)?,
        "eval.cutoff" => cfg.cutoff = parse(key, value)?,
        _ => return Err(ConfigError::UnknownKey(key.to_string())),
    }
    Ok(())
}

/// Current value of `key` in its textual form.
pub fn get_value(cfg: &TrainConfig, key: &str) -> Option<String> {
    let m = &cfg.model;
    let l = &cfg.loss;
    Some(match key {
        "model.n_blocks" => m.n_blocks.to_string(),
        "model.in_channels_per_block" => m.in_channels_per_block.to_string(),
        "model.spatial" => m.spatial.to_string(),
        "model.stream_out_channels" => m.stream_out_channels.to_string(),
        "model.attn_hidden_channels" => m.attn_hidden_channels.to_string(),
        "model.fc_sizes" => {
            let [a, b, c] = m.fc_sizes;
            format!("{a},{b},{c}")
        }
        "model.seed" => m.seed.to_string(),
        "loss.alpha_mu" => l.alpha_mu.to_string(),
        "loss.alpha_sigma" => l.alpha_sigma.to_string(),
        "loss.lambda" => l.lambda.to_string(),
        "loss.tau" => l.tau.to_string(),
        "loss.z" => l.z.to_string(),
        "train.initial_lr" => cfg.initial_lr.to_string(),
        "train.lr_decay_every" => cfg.lr_decay_every.to_string(),
        "train.lr_decay_factor" => cfg.lr_decay_factor.to_string(),
        "train.batch_size" => cfg.batch_size.to_string(),
        "train.epochs" => cfg.epochs.to_string(),
        "train.beta1" => cfg.beta1.to_string(),
        "train.beta2" => cfg.beta2.to_string(),
        "train.eps" => cfg.eps.to_string(),
        "train.seed" => cfg.seed.to_string(),
        "eval.cutoff" => cfg.cutoff.to_string(),
        _ => return None,
    })
}

/// Parses `key=value` lines into `(line number, key, value)`.
pub fn parse_lines(text: &str) -> Result<Vec<(usize, String, String)>> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line.split_once('=').ok_or_else(|| ConfigError::Syntax {
            line: i + 1,
            text: raw.to_string(),
        })?;
        out.push((i + 1, k.trim().to_string(), v.trim().to_string()));
    }
    Ok(out)
}

/// Full configuration as `key=value` lines (every key, in [`KEYS`] order).
pub fn to_kv(cfg: &TrainConfig) -> String {
    let mut out = String::new();
    for key in KEYS {
        writeln!(out, "{key}={}", get_value(cfg, key).expect("listed key")).unwrap();
    }
    out
}

/// Inverse of [`to_kv`]; unspecified keys keep their defaults.
pub fn from_kv(text: &str) -> Result<TrainConfig> {
    let mut cfg = TrainConfig::default();
    for (_, k, v) in parse_lines(text)? {
        set_value(&mut cfg, &k, &v)?;
    }
    Ok(cfg)
}

/// A configuration together with the source of each value.
#[derive(Debug, Clone, PartialEq)]
pub struct EffectiveConfig {
    pub config: TrainConfig,
    sources: BTreeMap<String, Source>,
}

impl Default for EffectiveConfig {
    fn default() -> Self {
        Self::new(TrainConfig::default())
    }
}

impl EffectiveConfig {
    /// Treats every value of `base` as a default.
    pub fn new(base: TrainConfig) -> Self {
        EffectiveConfig {
            config: base,
            sources: KEYS.iter().map(|k| (k.to_string(), Source::Default)).collect(),
        }
    }

    pub fn set(&mut self, key: &str, value: &str, source: Source) -> Result<()> {
        set_value(&mut self.config, key, value)?;
        self.sources.insert(key.to_string(), source);
        Ok(())
    }

    pub fn apply_text(&mut self, text: &str, source: Source) -> Result<()> {
        for (_, k, v) in parse_lines(text)? {
            self.set(&k, &v, source)?;
        }
        Ok(())
    }

    pub fn apply_file(&mut self, path: &Path) -> Result<()> {
        let text = std::fs::read_to_string(path).map_err(|e| ConfigError::Io {
            path: path.display().to_string(),
            message: e.to_string(),
        })?;
        self.apply_text(&text, Source::Config)
    }

    pub fn source(&self, key: &str) -> Option<Source> {
        self.sources.get(key).copied()
    }

    /// `key=value` and `key.source=...` for every key.
    pub fn manifest(&self) -> String {
        let mut out = String::new();
        for key in KEYS {
            let value = get_value(&self.config, key).expect("listed key");
            let source = self.source(key).unwrap_or(Source::Default);
            writeln!(out, "{key}={value}").unwrap();
            writeln!(out, "{key}.source={source}").unwrap();
        }
        out
    }
}

/// Reads a manifest back into `key -> value`, skipping `.source` lines.
pub fn manifest_values(text: &str) -> Result<BTreeMap<String, String>> {
    Ok(parse_lines(text)?
        .into_iter()
        .filter(|(_, k, _)| !k.ends_with(".source"))
        .map(|(_, k, v)| (k, v))
        .collect())
}
