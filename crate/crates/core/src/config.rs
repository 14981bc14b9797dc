//! Flat `key = value` run configuration with per-model defaults.

use crate::agent::ModelKind;
use crate::grid::EnvConfig;
use crate::oracle::OracleMode;
use crate::training::TrainConfig;
use std::path::PathBuf;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("line {line}: unknown key {key:?}")]
    UnknownKey { key: String, line: usize },
    #[error("line {line}: expected key=value, got {text:?}")]
    BadLine { text: String, line: usize },
    #[error("key {key:?}: invalid value {value:?} ({reason})")]
    BadValue { key: String, value: String, reason: String },
    #[error("cannot read {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

const KEYS: [&str; 18] = [
    "model", "env", "oracle", "alpha", "eps_clip", "gamma", "lambda", "c1", "c2", "c3", "c4",
    "c5", "mi_enabled", "mi_samples", "mi_weight", "episodes", "seed", "out_dir",
];

/// Ordered key/value pairs from a config file or command line, validated
/// against the known key set.
#[derive(Clone, Debug, Default)]
pub struct RawConfig {
    pairs: Vec<(String, String)>,
}

impl RawConfig {
    pub fn parse(text: &str) -> Result<RawConfig, ConfigError> {
        let mut pairs = Vec::new();
        for (i, raw_line) in text.lines().enumerate() {
            let line = i + 1;
            let trimmed = raw_line.trim();
            if trimmed.is_empty() || trimmed.starts_with('#') {
                continue;
            }
            let Some((k, v)) = trimmed.split_once('=') else {
                return Err(ConfigError::BadLine { text: trimmed.to_string(), line });
            };
            let key = k.trim().to_string();
            if !KEYS.contains(&key.as_str()) {
                return Err(ConfigError::UnknownKey { key, line });
            }
            pairs.push((key, v.trim().to_string()));
        }
        Ok(RawConfig { pairs })
    }

    pub fn read(path: &std::path::Path) -> Result<RawConfig, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.display().to_string(),
            source,
        })?;
        RawConfig::parse(&text)
    }

    /// Appends an override; later values win.
    pub fn set(&mut self, key: &str, value: String) {
        self.pairs.push((key.to_string(), value));
    }

    fn last(&self, key: &str) -> Option<&str> {
        self.pairs
            .iter()
            .rev()
            .find(|(k, _)| k == key)
            .map(|(_, v)| v.as_str())
    }
}

/// Fully resolved run settings.
#[derive(Clone, Debug)]
pub struct RunConfig {
    pub model: ModelKind,
    pub env: EnvConfig,
    pub oracle: OracleMode,
    pub train: TrainConfig,
    pub episodes: usize,
    pub seed: u64,
    pub out_dir: Option<PathBuf>,
}

impl RunConfig {
    /// Resolves raw pairs against the chosen model's defaults. `default_env`
    /// and `default_oracle` come from the subcommand (training runs in the
    /// small world with a train-mode oracle, transfer in the large one with
    /// a test-mode oracle).
    pub fn resolve(
        raw: &RawConfig,
        default_env: &str,
        default_oracle: OracleMode,
    ) -> Result<RunConfig, ConfigError> {
        let bad = |key: &str, value: &str, reason: &str| ConfigError::BadValue {
            key: key.to_string(),
            value: value.to_string(),
            reason: reason.to_string(),
        };

        let model = match raw.last("model") {
            Some(v) => ModelKind::parse(v)
                .ok_or_else(|| bad("model", v, "expected main|film|baseline"))?,
            None => ModelKind::Main,
        };
        let env_name = raw.last("env").unwrap_or(default_env);
        let env = EnvConfig::parse_name(env_name)
            .map_err(|e| bad("env", env_name, &e.to_string()))?;
        let oracle = match raw.last("oracle") {
            Some("train") => OracleMode::Train,
            Some("test") => OracleMode::Test,
            Some("random") => OracleMode::Random,
            Some(v) => return Err(bad("oracle", v, "expected train|test|random")),
            None => default_oracle,
        };

        let mut train = TrainConfig::defaults(model);
        let fetch_f64 = |key: &str, slot: &mut f64| -> Result<(), ConfigError> {
            if let Some(v) = raw.last(key) {
                *slot = v.parse::<f64>().map_err(|e| bad(key, v, &e.to_string()))?;
            }
            Ok(())
        };
        fetch_f64("alpha", &mut train.alpha)?;
        fetch_f64("eps_clip", &mut train.eps_clip)?;
        fetch_f64("gamma", &mut train.gamma)?;
        fetch_f64("lambda", &mut train.lambda)?;
        fetch_f64("c1", &mut train.c1)?;
        fetch_f64("c2", &mut train.c2)?;
        fetch_f64("c3", &mut train.c3)?;
        fetch_f64("c4", &mut train.c4)?;
        fetch_f64("c5", &mut train.c5)?;
        fetch_f64("mi_weight", &mut train.mi_weight)?;
        if let Some(v) = raw.last("mi_enabled") {
            train.mi_enabled = v
                .parse::<bool>()
                .map_err(|e| bad("mi_enabled", v, &e.to_string()))?;
        }
        if let Some(v) = raw.last("mi_samples") {
            train.mi_samples = v
                .parse::<usize>()
                .map_err(|e| bad("mi_samples", v, &e.to_string()))?;
        }
        if train.alpha <= 0.0 {
            return Err(bad("alpha", &train.alpha.to_string(), "must be positive"));
        }

        let episodes = match raw.last("episodes") {
            Some(v) => v.parse::<usize>().map_err(|e| bad("episodes", v, &e.to_string()))?,
            None => 30_000,
        };
        let seed = match raw.last("seed") {
            Some(v) => v.parse::<u64>().map_err(|e| bad("seed", v, &e.to_string()))?,
            None => 0,
        };
        let out_dir = raw.last("out_dir").map(PathBuf::from);

        Ok(RunConfig { model, env, oracle, train, episodes, seed, out_dir })
    }
}
