//! Run configuration files.
//!
//! Flat `key = value` lines; `#` starts a comment. Every key is optional:
//!
//! | key               | default          | values                     |
//! |-------------------|------------------|----------------------------|
//! | `clients`         | 3                | 1..=3                      |
//! | `rounds`          | 20               | >= 1                       |
//! | `local_epochs`    | 5                | >= 1, forced to 1 by fedsgd |
//! | `batch_size`      | 16               | >= 1 or `full`             |
//! | `lr`              | 0.05             | > 0                        |
//! | `algorithm`       | fedavg           | `fedsgd`, `fedavg`         |
//! | `aggregation`     | weighted         | `mean`, `weighted`         |
//! | `mask`            | all              | `all`, `classifier`        |
//! | `init`            | common           | `common`, `independent`    |
//! | `seed`            | 42               | u64                        |
//! | `client_fraction` | 1.0              | (0, 1]                     |
//! | `transport`       | sim              | `sim`, `dir`, `net`        |
//! | `dir_path`        | fedx             | directory                  |
//! | `net_address`     | 127.0.0.1:7878   | host:port                  |
//! | `round_timeout_s` | 300              | > 0, seconds               |
//! | `split_ratio`     | 0.8              | (0, 1)                     |
//! | `out_dir`         | runs/default     | directory                  |
//!
//! Relative paths are taken relative to the working directory.

use std::collections::HashSet;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Duration;

use thiserror::Error;

use crate::data::DataSpec;
use crate::federation::{
    Aggregation, Algorithm, BatchSize, FederationConfig, InitPolicy, MaskMode, Transport,
};

pub const KEYS: [&str; 17] = [
    "clients",
    "rounds",
    "local_epochs",
    "batch_size",
    "lr",
    "algorithm",
    "aggregation",
    "mask",
    "init",
    "seed",
    "client_fraction",
    "transport",
    "dir_path",
    "net_address",
    "round_timeout_s",
    "split_ratio",
    "out_dir",
];

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("line {line}: expected `key = value`")]
    Syntax { line: usize },
    #[error("line {line}: unknown key `{key}`")]
    UnknownKey { line: usize, key: String },
    #[error("line {line}: key `{key}` given twice")]
    DuplicateKey { line: usize, key: String },
    #[error("line {line}: invalid {key} `{value}`: {reason}")]
    InvalidValue {
        line: usize,
        key: String,
        value: String,
        reason: String,
    },
    #[error("invalid configuration: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TransportKind {
    Sim,
    Dir,
    Net,
}

impl TransportKind {
    pub fn name(self) -> &'static str {
        match self {
            Self::Sim => "sim",
            Self::Dir => "dir",
            Self::Net => "net",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub clients: usize,
    pub rounds: u32,
    pub local_epochs: u32,
    pub batch_size: BatchSize,
    pub lr: f64,
    pub algorithm: Algorithm,
    pub aggregation: Aggregation,
    pub mask: MaskMode,
    pub init: InitPolicy,
    pub seed: u64,
    pub client_fraction: f64,
    pub transport: TransportKind,
    pub dir_path: PathBuf,
    pub net_address: String,
    pub round_timeout_s: f64,
    pub split_ratio: f64,
    pub out_dir: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            clients: 3,
            rounds: 20,
            local_epochs: 5,
            batch_size: BatchSize::Size(16),
            lr: 0.05,
            algorithm: Algorithm::FedAvg,
            aggregation: Aggregation::SampleWeighted,
            mask: MaskMode::All,
            init: InitPolicy::CommonSeed,
            seed: 42,
            client_fraction: 1.0,
            transport: TransportKind::Sim,
            dir_path: PathBuf::from("fedx"),
            net_address: "127.0.0.1:7878".into(),
            round_timeout_s: 300.0,
            split_ratio: 0.8,
            out_dir: PathBuf::from("runs/default"),
        }
    }
}

fn parse_number<T: FromStr>(line: usize, key: &str, value: &str) -> Result<T, ConfigError>
where
    T::Err: std::fmt::Display,
{
    value.parse().map_err(|e: T::Err| ConfigError::InvalidValue {
        line,
        key: key.into(),
        value: value.into(),
        reason: e.to_string(),
    })
}

fn parse_choice<T: Copy>(line: usize, key: &str, value: &str, choices: &[(&str, T)]) -> Result<T, ConfigError> {
    choices
        .iter()
        .find(|(name, _)| *name == value)
        .map(|&(_, v)| v)
        .ok_or_else(|| ConfigError::InvalidValue {
            line,
            key: key.into(),
            value: value.into(),
            reason: format!(
                "expected one of {}",
                choices.iter().map(|(n, _)| *n).collect::<Vec<_>>().join(", ")
            ),
        })
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::parse(&text)
    }

    /// Parses and validates a configuration text.
    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let mut cfg = Self::default();
        let mut seen = HashSet::new();
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let content = raw.split('#').next().unwrap_or("").trim();
            if content.is_empty() {
                continue;
            }
            let (key, value) = content.split_once('=').ok_or(ConfigError::Syntax { line })?;
            let (key, value) = (key.trim(), value.trim());
            if key.is_empty() {
                return Err(ConfigError::Syntax { line });
            }
            if !KEYS.contains(&key) {
                return Err(ConfigError::UnknownKey { line, key: key.into() });
            }
            if !seen.insert(key.to_string()) {
                return Err(ConfigError::DuplicateKey { line, key: key.into() });
            }
            cfg.set(line, key, value)?;
        }
        if cfg.algorithm == Algorithm::FedSgd {
            cfg.local_epochs = 1;
            cfg.batch_size = BatchSize::Full;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    fn set(&mut self, line: usize, key: &str, value: &str) -> Result<(), ConfigError> {
        match key {
            "clients" => self.clients = parse_number(line, key, value)?,
            "rounds" => self.rounds = parse_number(line, key, value)?,
            "local_epochs" => self.local_epochs = parse_number(line, key, value)?,
            "batch_size" => {
                self.batch_size = if value == "full" {
                    BatchSize::Full
                } else {
                    BatchSize::Size(parse_number(line, key, value)?)
                }
            }
            "lr" => self.lr = parse_number(line, key, value)?,
            "algorithm" => {
                self.algorithm = parse_choice(
                    line,
                    key,
                    value,
                    &[("fedsgd", Algorithm::FedSgd), ("fedavg", Algorithm::FedAvg)],
                )?
            }
            "aggregation" => {
                self.aggregation = parse_choice(
                    line,
                    key,
                    value,
                    &[("mean", Aggregation::PlainMean), ("weighted", Aggregation::SampleWeighted)],
                )?
            }
            "mask" => {
                self.mask = parse_choice(
                    line,
                    key,
                    value,
                    &[("all", MaskMode::All), ("classifier", MaskMode::ClassifierOnly)],
                )?
            }
            "init" => {
                self.init = parse_choice(
                    line,
                    key,
                    value,
                    &[("common", InitPolicy::CommonSeed), ("independent", InitPolicy::Independent)],
                )?
            }
            "seed" => self.seed = parse_number(line, key, value)?,
            "client_fraction" => self.client_fraction = parse_number(line, key, value)?,
            "transport" => {
                self.transport = parse_choice(
                    line,
                    key,
                    value,
                    &[("sim", TransportKind::Sim), ("dir", TransportKind::Dir), ("net", TransportKind::Net)],
                )?
            }
            "dir_path" => self.dir_path = PathBuf::from(value),
            "net_address" => self.net_address = value.to_string(),
            "round_timeout_s" => self.round_timeout_s = parse_number(line, key, value)?,
            "split_ratio" => self.split_ratio = parse_number(line, key, value)?,
            "out_dir" => self.out_dir = PathBuf::from(value),
            _ => unreachable!("key list checked by the caller"),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if !(1..=3).contains(&self.clients) {
            return Err(ConfigError::Invalid(format!(
                "clients must be between 1 and 3, got {}",
                self.clients
            )));
        }
        if !(self.split_ratio > 0.0 && self.split_ratio < 1.0) {
            return Err(ConfigError::Invalid(format!(
                "split_ratio must lie in (0, 1), got {}",
                self.split_ratio
            )));
        }
        if !(self.round_timeout_s > 0.0 && self.round_timeout_s.is_finite()) {
            return Err(ConfigError::Invalid(format!(
                "round_timeout_s must be positive, got {}",
                self.round_timeout_s
            )));
        }
        if self.dir_path.as_os_str().is_empty() || self.out_dir.as_os_str().is_empty() {
            return Err(ConfigError::Invalid("paths must not be empty".into()));
        }
        self.federation()
            .validate()
            .map_err(|e| ConfigError::Invalid(e.to_string()))?;
        self.data_spec().map(|_| ())
    }

    pub fn federation(&self) -> FederationConfig {
        FederationConfig {
            clients: self.clients,
            rounds: self.rounds,
            local_epochs: self.local_epochs,
            batch_size: self.batch_size,
            lr: self.lr,
            client_fraction: self.client_fraction,
            aggregation: self.aggregation,
            mask: self.mask,
            init: self.init,
            algorithm: self.algorithm,
            seed: self.seed,
            transport: match self.transport {
                TransportKind::Sim => Transport::Sim,
                TransportKind::Dir => Transport::Dir(self.dir_path.clone()),
                TransportKind::Net => Transport::Net(self.net_address.clone()),
            },
            round_timeout: Duration::from_secs_f64(self.round_timeout_s),
            eval_each_round: true,
            ..FederationConfig::default()
        }
    }

    pub fn data_spec(&self) -> Result<DataSpec, ConfigError> {
        DataSpec::default_for(self.clients, self.seed, self.split_ratio).map_err(|e| ConfigError::Invalid(e.to_string()))
    }
}
