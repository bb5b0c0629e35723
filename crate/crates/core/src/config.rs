//! Flat `key = value` configuration.
//!
//! One setting per line; `#` starts a comment line; blank lines are ignored.
//! Keys are the long command-line flag names with `-` replaced by `_`, so
//! every flag can also be set from a file and a flag overrides the file.
//!
//! ```text
//! # run.conf
//! index = data/wiki.abix
//! dataset = data/dev.jsonl
//! kind = shortform
//! endpoint = http://localhost:8000/v1/chat/completions
//! model = qwen2-7b-instruct
//! max_iter = 3
//! top_k = 5
//! ```

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Duration;

use crate::eval::DatasetKind;
use crate::llm::{GenerationSettings, RetryPolicy, DEFAULT_CONCURRENCY, DEFAULT_MAX_TOKENS};
use crate::pipeline::LoopConfig;

/// Every accepted key.
pub const KEYS: &[&str] = &[
    "corpus",
    "index",
    "dataset",
    "kind",
    "prompts",
    "endpoint",
    "score_endpoint",
    "model",
    "mock",
    "cache_dir",
    "max_iter",
    "top_k",
    "stop_on_no_improvement",
    "concurrency",
    "temperature",
    "max_tokens",
    "retries",
    "timeout_secs",
    "trace",
    "trace_dir",
    "window",
    "k1",
    "b",
    "measure",
    "threshold",
    "out",
    "report",
];

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("config line {line}: expected `key = value`")]
    Syntax { line: usize },
    #[error("unknown config key `{0}`")]
    UnknownKey(String),
    #[error("config key `{0}` set twice")]
    Duplicate(String),
    #[error("invalid value for `{key}`: {message}")]
    Invalid { key: String, message: String },
    #[error("missing required setting `{0}`")]
    Missing(&'static str),
    #[error("`{key}` points to {path}, which does not exist")]
    NotFound { key: &'static str, path: PathBuf },
    #[error("{0}")]
    Backend(String),
}

/// Raw settings, validated only for known keys.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ConfigMap {
    entries: BTreeMap<String, String>,
}

impl ConfigMap {
    pub fn parse(source: &str) -> Result<Self, ConfigError> {
        let mut map = Self::default();
        for (i, line) in source.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or(ConfigError::Syntax { line: i + 1 })?;
            let key = key.trim();
            if map.entries.contains_key(key) {
                return Err(ConfigError::Duplicate(key.to_string()));
            }
            map.set(key, value.trim())?;
        }
        Ok(map)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let source = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::parse(&source)
    }

    /// Sets or overrides `key`.
    pub fn set(&mut self, key: &str, value: impl Into<String>) -> Result<(), ConfigError> {
        if !KEYS.contains(&key) {
            return Err(ConfigError::UnknownKey(key.to_string()));
        }
        self.entries.insert(key.to_string(), value.into());
        Ok(())
    }

    /// Sets `key` only when it is still unset.
    pub fn set_default(&mut self, key: &str, value: impl Into<String>) -> Result<(), ConfigError> {
        if !self.entries.contains_key(key) {
            self.set(key, value)?;
        }
        Ok(())
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.entries.get(key).map(String::as_str)
    }

    pub fn path(&self, key: &str) -> Option<PathBuf> {
        self.get(key).map(PathBuf::from)
    }

    /// Parses `key`, falling back to `default` when unset.
    pub fn parsed<T: FromStr>(&self, key: &str, default: T) -> Result<T, ConfigError>
    where
        T::Err: std::fmt::Display,
    {
        match self.get(key) {
            None => Ok(default),
            Some(v) => v.parse().map_err(|e: T::Err| ConfigError::Invalid {
                key: key.to_string(),
                message: format!("{v:?}: {e}"),
            }),
        }
    }

    /// An input path that must exist.
    pub fn existing_path(&self, key: &'static str) -> Result<Option<PathBuf>, ConfigError> {
        match self.path(key) {
            Some(p) if !p.exists() => Err(ConfigError::NotFound { key, path: p }),
            other => Ok(other),
        }
    }

    pub fn required_path(&self, key: &'static str) -> Result<PathBuf, ConfigError> {
        self.existing_path(key)?.ok_or(ConfigError::Missing(key))
    }

    /// `key=value` lines in key order.
    pub fn to_text(&self) -> String {
        self.entries
            .iter()
            .map(|(k, v)| format!("{k}={v}\n"))
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum BackendConfig {
    Http {
        endpoint: String,
        score_endpoint: Option<String>,
    },
    Mock {
        script: PathBuf,
    },
}

/// Validated settings shared by the commands that talk to a model.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub backend: BackendConfig,
    pub generation: GenerationSettings,
    pub retry: RetryPolicy,
    pub timeout: Duration,
    pub prompts: Option<PathBuf>,
    pub cache_dir: Option<PathBuf>,
    pub concurrency: usize,
}

impl ModelConfig {
    pub fn from_map(map: &ConfigMap) -> Result<Self, ConfigError> {
        let backend = match (map.get("endpoint"), map.path("mock")) {
            (Some(_), Some(_)) => {
                return Err(ConfigError::Backend(
                    "configure exactly one backend: `endpoint` or `mock`, not both".into(),
                ))
            }
            (None, None) => {
                return Err(ConfigError::Backend(
                    "no backend configured: set `endpoint` and `model`, or `mock`".into(),
                ))
            }
            (Some(endpoint), None) => {
                if map.get("model").is_none() {
                    return Err(ConfigError::Missing("model"));
                }
                BackendConfig::Http {
                    endpoint: endpoint.to_string(),
                    score_endpoint: map.get("score_endpoint").map(str::to_string),
                }
            }
            (None, Some(_)) => BackendConfig::Mock {
                script: map.required_path("mock")?,
            },
        };
        let mut generation = GenerationSettings::new(map.get("model").unwrap_or("mock"));
        generation.temperature = map.parsed("temperature", 0.0)?;
        generation.max_tokens = map.parsed("max_tokens", DEFAULT_MAX_TOKENS)?;
        let retry = RetryPolicy {
            max_retries: map.parsed("retries", RetryPolicy::default().max_retries)?,
            ..RetryPolicy::default()
        };
        let concurrency: usize = map.parsed("concurrency", DEFAULT_CONCURRENCY)?;
        if concurrency == 0 {
            return Err(invalid("concurrency", "must be at least 1"));
        }
        Ok(Self {
            backend,
            generation,
            retry,
            timeout: Duration::from_secs_f64(map.parsed("timeout_secs", 120.0)?),
            prompts: map.existing_path("prompts")?,
            cache_dir: map.path("cache_dir"),
            concurrency,
        })
    }
}

fn invalid(key: &str, message: &str) -> ConfigError {
    ConfigError::Invalid {
        key: key.to_string(),
        message: message.to_string(),
    }
}

/// Settings for a pipeline run over a dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub index: Option<PathBuf>,
    pub corpus: Option<PathBuf>,
    pub dataset: PathBuf,
    pub kind: DatasetKind,
    pub model: ModelConfig,
    pub loop_config: LoopConfig,
    pub trace: PathBuf,
    pub trace_dir: Option<PathBuf>,
}

impl RunConfig {
    pub fn from_map(map: &ConfigMap) -> Result<Self, ConfigError> {
        let index = map.existing_path("index")?;
        let corpus = map.existing_path("corpus")?;
        if index.is_none() && corpus.is_none() {
            return Err(ConfigError::Missing("index"));
        }
        let defaults = LoopConfig::default();
        let loop_config = LoopConfig {
            max_iter: map.parsed("max_iter", defaults.max_iter)?,
            top_k: map.parsed("top_k", defaults.top_k)?,
            stop_on_no_improvement: map
                .parsed("stop_on_no_improvement", defaults.stop_on_no_improvement)?,
        };
        if loop_config.max_iter == 0 {
            return Err(invalid("max_iter", "must be at least 1"));
        }
        if loop_config.top_k == 0 {
            return Err(invalid("top_k", "must be at least 1"));
        }
        Ok(Self {
            index,
            corpus,
            dataset: map.required_path("dataset")?,
            kind: map.parsed("kind", DatasetKind::Shortform)?,
            model: ModelConfig::from_map(map)?,
            loop_config,
            trace: map.path("trace").ok_or(ConfigError::Missing("trace"))?,
            trace_dir: map.path("trace_dir"),
        })
    }
}
