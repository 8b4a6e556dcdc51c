//! Service configuration: a TOML file plus `LOSTFOUND_*` environment overrides.
//!
//! ```toml
//! bind_address = "127.0.0.1:8080"
//! auto_approve = false
//! tau = 0.6
//! data_dir = "data"
//! citizens_path = "fixtures/citizens.json"
//! stations_path = "fixtures/police_stations.json"
//! # static_dir = "webui/dist"
//!
//! [embedding]
//! provider = "synthetic"     # or "http"
//! dimension = 128
//! # seed = 5506778137514062190
//! # endpoint = "http://127.0.0.1:9000"
//! # timeout_ms = 5000
//!
//! # [smtp]
//! # host = "127.0.0.1"
//! # port = 25
//! # from = "lostfound <noreply@lostfound.example>"
//! # username = "..."
//! # password = "..."
//! # interval_secs = 30
//! ```
//!
//! Relative paths are resolved against the directory holding the config file.

use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Duration;

use serde::Deserialize;

use crate::embedding::{
    EmbeddingError, EmbeddingProvider, HttpProvider, MatchThreshold, SyntheticProvider, DEFAULT_DIMENSION,
    DEFAULT_SYNTHETIC_SEED, DEFAULT_TAU,
};
use crate::matching::PipelineConfig;

pub const ENV_PREFIX: &str = "LOSTFOUND_";

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Read {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("invalid config {path}: {message}")]
    Parse { path: PathBuf, message: String },
    #[error("invalid value for {key}: {message}")]
    Invalid { key: String, message: String },
    #[error("{what} not found: {path}")]
    MissingPath { what: &'static str, path: PathBuf },
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ProviderKind {
    Synthetic,
    Http,
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EmbeddingConfig {
    #[serde(default = "default_provider")]
    pub provider: ProviderKind,
    #[serde(default = "default_dimension")]
    pub dimension: usize,
    #[serde(default = "default_seed")]
    pub seed: u64,
    #[serde(default)]
    pub endpoint: Option<String>,
    #[serde(default = "default_timeout_ms")]
    pub timeout_ms: u64,
}

impl Default for EmbeddingConfig {
    fn default() -> Self {
        Self {
            provider: default_provider(),
            dimension: default_dimension(),
            seed: default_seed(),
            endpoint: None,
            timeout_ms: default_timeout_ms(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SmtpConfig {
    pub host: String,
    #[serde(default = "default_smtp_port")]
    pub port: u16,
    pub from: String,
    #[serde(default)]
    pub username: Option<String>,
    #[serde(default)]
    pub password: Option<String>,
    #[serde(default = "default_interval")]
    pub interval_secs: u64,
}

/// Everything `serve` needs.
#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ApiConfig {
    #[serde(default = "default_bind")]
    pub bind_address: String,
    #[serde(default)]
    pub auto_approve: bool,
    #[serde(default = "default_tau")]
    pub tau: f64,
    #[serde(default = "default_data_dir")]
    pub data_dir: PathBuf,
    #[serde(default = "default_citizens")]
    pub citizens_path: PathBuf,
    #[serde(default = "default_stations")]
    pub stations_path: PathBuf,
    #[serde(default)]
    pub static_dir: Option<PathBuf>,
    #[serde(default)]
    pub embedding: EmbeddingConfig,
    #[serde(default)]
    pub smtp: Option<SmtpConfig>,
}

fn default_provider() -> ProviderKind {
    ProviderKind::Synthetic
}
fn default_dimension() -> usize {
    DEFAULT_DIMENSION
}
fn default_seed() -> u64 {
    DEFAULT_SYNTHETIC_SEED
}
fn default_timeout_ms() -> u64 {
    5000
}
fn default_smtp_port() -> u16 {
    25
}
fn default_interval() -> u64 {
    30
}
fn default_bind() -> String {
    "127.0.0.1:8080".into()
}
fn default_tau() -> f64 {
    DEFAULT_TAU
}
fn default_data_dir() -> PathBuf {
    "data".into()
}
fn default_citizens() -> PathBuf {
    "fixtures/citizens.json".into()
}
fn default_stations() -> PathBuf {
    "fixtures/police_stations.json".into()
}

impl Default for ApiConfig {
    fn default() -> Self {
        toml::from_str("").expect("defaults deserialize")
    }
}

impl ApiConfig {
    /// Reads `path`, applies environment overrides and validates.
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Read {
            path: path.to_path_buf(),
            source,
        })?;
        let mut cfg = Self::from_toml(&text).map_err(|e| match e {
            ConfigError::Parse { message, .. } => ConfigError::Parse {
                path: path.to_path_buf(),
                message,
            },
            other => other,
        })?;
        cfg.apply_env(std::env::vars())?;
        if let Some(base) = path.parent() {
            cfg.resolve_relative(base);
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_toml(text: &str) -> Result<Self, ConfigError> {
        toml::from_str(text).map_err(|e| ConfigError::Parse {
            path: PathBuf::new(),
            message: e.to_string(),
        })
    }

    /// Applies `LOSTFOUND_<KEY>` overrides from `vars`.
    pub fn apply_env(&mut self, vars: impl IntoIterator<Item = (String, String)>) -> Result<(), ConfigError> {
        for (key, value) in vars {
            let Some(name) = key.strip_prefix(ENV_PREFIX) else {
                continue;
            };
            let invalid = |message: String| ConfigError::Invalid {
                key: key.clone(),
                message,
            };
            match name {
                "BIND_ADDRESS" => self.bind_address = value,
                "AUTO_APPROVE" => {
                    self.auto_approve = match value.to_ascii_lowercase().as_str() {
                        "1" | "true" | "yes" | "on" => true,
                        "0" | "false" | "no" | "off" => false,
                        other => return Err(invalid(format!("not a boolean: {other:?}"))),
                    }
                }
                "TAU" => self.tau = value.parse().map_err(|e| invalid(format!("{e}")))?,
                "DATA_DIR" => self.data_dir = value.into(),
                "CITIZENS_PATH" => self.citizens_path = value.into(),
                "STATIONS_PATH" => self.stations_path = value.into(),
                "STATIC_DIR" => self.static_dir = Some(value.into()),
                "EMBEDDING_ENDPOINT" => {
                    self.embedding.provider = ProviderKind::Http;
                    self.embedding.endpoint = Some(value);
                }
                "SMTP_PASSWORD" => {
                    if let Some(smtp) = self.smtp.as_mut() {
                        smtp.password = Some(value);
                    }
                }
                "SMTP_USERNAME" => {
                    if let Some(smtp) = self.smtp.as_mut() {
                        smtp.username = Some(value);
                    }
                }
                _ => {}
            }
        }
        Ok(())
    }

    fn resolve_relative(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        fix(&mut self.data_dir);
        fix(&mut self.citizens_path);
        fix(&mut self.stations_path);
        if let Some(s) = self.static_dir.as_mut() {
            fix(s);
        }
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        MatchThreshold::new(self.tau).map_err(|e| ConfigError::Invalid {
            key: "tau".into(),
            message: e.to_string(),
        })?;
        if self.embedding.dimension == 0 {
            return Err(ConfigError::Invalid {
                key: "embedding.dimension".into(),
                message: "must be positive".into(),
            });
        }
        if self.embedding.provider == ProviderKind::Http && self.embedding.endpoint.is_none() {
            return Err(ConfigError::Invalid {
                key: "embedding.endpoint".into(),
                message: "required for the http provider".into(),
            });
        }
        for (what, path) in [
            ("citizens fixture", &self.citizens_path),
            ("police stations fixture", &self.stations_path),
        ] {
            if !path.is_file() {
                return Err(ConfigError::MissingPath {
                    what,
                    path: path.clone(),
                });
            }
        }
        Ok(())
    }

    pub fn pipeline_config(&self) -> PipelineConfig {
        PipelineConfig {
            threshold: MatchThreshold::new(self.tau).unwrap_or_default(),
            auto_approve: self.auto_approve,
        }
    }

    /// Builds the configured provider. The HTTP provider owns a blocking
    /// client, so call this outside any async runtime.
    pub fn provider(&self) -> Result<Arc<dyn EmbeddingProvider>, EmbeddingError> {
        let e = &self.embedding;
        Ok(match e.provider {
            ProviderKind::Synthetic => Arc::new(SyntheticProvider::new(e.dimension, e.seed)),
            ProviderKind::Http => Arc::new(HttpProvider::new(
                e.endpoint.clone().unwrap_or_default(),
                e.dimension,
                Duration::from_millis(e.timeout_ms),
            )?),
        })
    }
}
