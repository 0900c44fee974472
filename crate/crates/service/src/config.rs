use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::time::Duration;

use icount::session::SessionConfig;
use serde::{Deserialize, Serialize};

/// Environment variable that overrides the listen address from the file.
pub const ADDR_ENV: &str = "ICOUNT_ADDR";

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("reading {path}: {source}")]
    Read { path: PathBuf, source: std::io::Error },
    #[error("parsing {path}: {source}")]
    Parse { path: PathBuf, source: toml::de::Error },
    #[error("{ADDR_ENV}={value:?} is not a socket address")]
    Addr { value: String },
    #[error("invalid session defaults: {0}")]
    Session(#[from] icount::Error),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ServiceConfig {
    pub addr: SocketAddr,
    /// Sessions untouched for this long are dropped, together with their snapshot.
    pub idle_ttl_secs: u64,
    /// Where session snapshots are written after every mutation; off when unset.
    pub snapshot_dir: Option<PathBuf>,
    /// Static UI bundle served for paths outside the API.
    pub static_dir: Option<PathBuf>,
    /// Largest accepted scene or grid side, in pixels.
    pub max_grid_side: usize,
    pub max_body_bytes: usize,
    /// Session settings used when a create request does not bring its own.
    pub session: SessionConfig,
}

impl Default for ServiceConfig {
    fn default() -> Self {
        Self {
            addr: SocketAddr::from(([127, 0, 0, 1], 8080)),
            idle_ttl_secs: 30 * 60,
            snapshot_dir: None,
            static_dir: None,
            max_grid_side: 1024,
            max_body_bytes: 16 << 20,
            session: SessionConfig::default(),
        }
    }
}

impl ServiceConfig {
    /// Reads an optional TOML file, then applies `ICOUNT_ADDR`.
    pub fn load(path: Option<&Path>) -> Result<Self, ConfigError> {
        let mut config = match path {
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
        if let Ok(value) = std::env::var(ADDR_ENV) {
            config.apply_addr_override(&value)?;
        }
        config.session.validate()?;
        Ok(config)
    }

    pub fn apply_addr_override(&mut self, value: &str) -> Result<(), ConfigError> {
        self.addr = value.parse().map_err(|_| ConfigError::Addr {
            value: value.to_string(),
        })?;
        Ok(())
    }

    pub fn idle_ttl(&self) -> Duration {
        Duration::from_secs(self.idle_ttl_secs)
    }
}
