//! Flat key=value configuration with environment overrides and a stable
//! hash of the resolved settings.
//!
//! Precedence: command-line flag > environment variable (CONVOHER2_<KEY>)
//! > config file > default.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};

use crate::ingest::StainModality;
use crate::trainer::{Monitor, TrainConfig};
use crate::{Error, Result};

pub const ENV_PREFIX: &str = "CONVOHER2_";

/// Training hyperparameters plus pipeline settings.
#[derive(Debug, Clone, PartialEq)]
pub struct PipelineConfig {
    pub train: TrainConfig,
    pub data_root: Option<PathBuf>,
    pub out_dir: PathBuf,
    pub pattern: String,
    pub train_fraction: f64,
    pub augment: bool,
    pub use_cached_features: bool,
    pub backbone_seed: u64,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            train: TrainConfig::default(),
            data_root: None,
            out_dir: PathBuf::from("out"),
            pattern: crate::ingest::DEFAULT_LABEL_PATTERN.to_string(),
            train_fraction: 0.8,
            augment: true,
            use_cached_features: false,
            backbone_seed: 0,
        }
    }
}

const KNOWN_KEYS: [&str; 16] = [
    "learning_rate",
    "batch_size",
    "epochs",
    "seed",
    "beta1",
    "beta2",
    "adam_eps",
    "checkpoint_monitor",
    "modality",
    "data_root",
    "out_dir",
    "pattern",
    "train_fraction",
    "augment",
    "use_cached_features",
    "backbone_seed",
];

impl PipelineConfig {
    fn apply(&mut self, key: &str, value: &str) -> Result<()> {
        let bad = || Error::BadConfigValue { key: key.to_string(), value: value.to_string() };
        match key {
            "learning_rate" => self.train.learning_rate = value.parse().map_err(|_| bad())?,
            "batch_size" => self.train.batch_size = value.parse().map_err(|_| bad())?,
            "epochs" => self.train.epochs = value.parse().map_err(|_| bad())?,
            "seed" => self.train.seed = value.parse().map_err(|_| bad())?,
            "beta1" => self.train.beta1 = value.parse().map_err(|_| bad())?,
            "beta2" => self.train.beta2 = value.parse().map_err(|_| bad())?,
            "adam_eps" => self.train.adam_eps = value.parse().map_err(|_| bad())?,
            "checkpoint_monitor" => {
                self.train.checkpoint_monitor = Monitor::parse(value).ok_or_else(bad)?
            }
            "modality" => {
                self.train.modality = Some(StainModality::parse(value).ok_or_else(bad)?)
            }
            "data_root" => self.data_root = Some(PathBuf::from(value)),
            "out_dir" => self.out_dir = PathBuf::from(value),
            "pattern" => self.pattern = value.to_string(),
            "train_fraction" => self.train_fraction = value.parse().map_err(|_| bad())?,
            "augment" => self.augment = parse_bool(value).ok_or_else(bad)?,
            "use_cached_features" => {
                self.use_cached_features = parse_bool(value).ok_or_else(bad)?
            }
            "backbone_seed" => self.backbone_seed = value.parse().map_err(|_| bad())?,
            _ => return Err(Error::UnknownKey(key.to_string())),
        }
        Ok(())
    }

    /// The resolved configuration as sorted key=value lines. Stable across
    /// source ordering, so equal resolved settings hash equally.
    pub fn echo(&self) -> String {
        let mut map = BTreeMap::new();
        map.insert("learning_rate", self.train.learning_rate.to_string());
        map.insert("batch_size", self.train.batch_size.to_string());
        map.insert("epochs", self.train.epochs.to_string());
        map.insert("seed", self.train.seed.to_string());
        map.insert("beta1", self.train.beta1.to_string());
        map.insert("beta2", self.train.beta2.to_string());
        map.insert("adam_eps", self.train.adam_eps.to_string());
        map.insert(
            "checkpoint_monitor",
            self.train.checkpoint_monitor.as_str().to_string(),
        );
        map.insert(
            "modality",
            self.train
                .modality
                .map(|m| m.as_str().to_string())
                .unwrap_or_else(|| "unset".into()),
        );
        map.insert(
            "data_root",
            self.data_root
                .as_ref()
                .map(|p| p.display().to_string())
                .unwrap_or_else(|| "unset".into()),
        );
        map.insert("out_dir", self.out_dir.display().to_string());
        map.insert("pattern", self.pattern.clone());
        map.insert("train_fraction", self.train_fraction.to_string());
        map.insert("augment", self.augment.to_string());
        map.insert("use_cached_features", self.use_cached_features.to_string());
        map.insert("backbone_seed", self.backbone_seed.to_string());
        let mut out = String::new();
        for (k, v) in map {
            out.push_str(&format!("{k}={v}\n"));
        }
        out
    }

    pub fn config_hash(&self) -> String {
        let mut hasher = Sha256::new();
        hasher.update(self.echo().as_bytes());
        hasher
            .finalize()
            .iter()
            .map(|b| format!("{b:02x}"))
            .collect()
    }
}

fn parse_bool(v: &str) -> Option<bool> {
    match v {
        "true" | "1" | "yes" => Some(true),
        "false" | "0" | "no" => Some(false),
        _ => None,
    }
}

/// Resolve the configuration from file, environment, and flag overrides.
pub fn load_config(
    path: Option<&Path>,
    env: &dyn Fn(&str) -> Option<String>,
    flag_overrides: &[(String, String)],
) -> Result<PipelineConfig> {
    let mut config = PipelineConfig::default();
    if let Some(path) = path {
        let text = std::fs::read_to_string(path)?;
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::BadConfigValue {
                    key: format!("line {}", lineno + 1),
                    value: line.to_string(),
                }
            })?;
            config.apply(key.trim(), value.trim())?;
        }
    }
    for key in KNOWN_KEYS {
        let env_key = format!("{ENV_PREFIX}{}", key.to_uppercase());
        if let Some(value) = env(&env_key) {
            config.apply(key, &value)?;
        }
    }
    for (key, value) in flag_overrides {
        config.apply(key, value)?;
    }
    Ok(config)
}
