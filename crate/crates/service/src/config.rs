use std::net::SocketAddr;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("config file {path}: {source}")]
    Read { path: PathBuf, source: std::io::Error },
    #[error("config file {path}: {source}")]
    Parse { path: PathBuf, source: toml::de::Error },
    #[error("environment variable {name}={value:?}: {reason}")]
    Env { name: &'static str, value: String, reason: String },
}

/// Server settings. Read from a TOML file, then overridden by `XIL_LISTEN`,
/// `XIL_DATA_ROOT`, `XIL_STATE_DIR`, `XIL_SESSION_TTL` and
/// `XIL_CORS_ORIGIN`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ServiceConfig {
    pub listen: SocketAddr,
    /// Base directory for dataset manifest paths.
    pub data_root: PathBuf,
    /// Each session persists into `state_dir/<id>`.
    pub state_dir: PathBuf,
    /// Idle sessions are dropped from memory after this many seconds; their
    /// directories stay and can be resumed.
    pub session_ttl_secs: u64,
    /// Allowed browser origin; any origin when unset.
    pub cors_origin: Option<String>,
}

impl Default for ServiceConfig {
    fn default() -> Self {
        Self {
            listen: SocketAddr::from(([127, 0, 0, 1], 8080)),
            data_root: PathBuf::from("."),
            state_dir: PathBuf::from("xil-sessions"),
            session_ttl_secs: 3600,
            cors_origin: None,
        }
    }
}

impl ServiceConfig {
    pub fn load(path: Option<&Path>) -> Result<Self, ConfigError> {
        let base = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|source| ConfigError::Read {
                    path: p.to_path_buf(),
                    source,
                })?;
                toml::from_str(&text).map_err(|source| ConfigError::Parse {
                    path: p.to_path_buf(),
                    source,
                })?
            }
            None => Self::default(),
        };
        base.with_env(|k| std::env::var(k).ok())
    }

    /// Applies overrides from `get` (the process environment in
    /// [`ServiceConfig::load`]).
    pub fn with_env(mut self, get: impl Fn(&str) -> Option<String>) -> Result<Self, ConfigError> {
        if let Some(v) = get("XIL_LISTEN") {
            self.listen = v.parse().map_err(|e: std::net::AddrParseError| ConfigError::Env {
                name: "XIL_LISTEN",
                value: v.clone(),
                reason: e.to_string(),
            })?;
        }
        if let Some(v) = get("XIL_DATA_ROOT") {
            self.data_root = v.into();
        }
        if let Some(v) = get("XIL_STATE_DIR") {
            self.state_dir = v.into();
        }
        if let Some(v) = get("XIL_SESSION_TTL") {
            self.session_ttl_secs = v.parse().map_err(|e: std::num::ParseIntError| ConfigError::Env {
                name: "XIL_SESSION_TTL",
                value: v.clone(),
                reason: e.to_string(),
            })?;
        }
        if let Some(v) = get("XIL_CORS_ORIGIN") {
            self.cors_origin = Some(v);
        }
        Ok(self)
    }
}
