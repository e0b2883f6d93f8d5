use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::ApiError;

/// Environment variable naming the config file when `--config` is absent.
pub const CONFIG_ENV: &str = "AFN_SERVICE_CONFIG";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelEntry {
    pub id: String,
    pub bundle_path: PathBuf,
    /// Optional CSV of stored series that requests may reference by id.
    #[serde(default)]
    pub series_path: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ServiceConfig {
    pub models: Vec<ModelEntry>,
    #[serde(default = "default_host")]
    pub host: String,
    #[serde(default = "default_port")]
    pub port: u16,
}

fn default_host() -> String {
    "127.0.0.1".into()
}

fn default_port() -> u16 {
    8080
}

impl ServiceConfig {
    /// Reads the config and resolves relative paths against its directory.
    pub fn load(path: &Path) -> Result<Self, ApiError> {
        let text = std::fs::read_to_string(path).map_err(|e| ApiError::Config(format!("{}: {e}", path.display())))?;
        let mut cfg: ServiceConfig =
            serde_json::from_str(&text).map_err(|e| ApiError::Config(format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new("."));
        for m in &mut cfg.models {
            m.bundle_path = resolve(base, &m.bundle_path);
            m.series_path = m.series_path.as_ref().map(|p| resolve(base, p));
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), ApiError> {
        let mut seen = std::collections::BTreeSet::new();
        for m in &self.models {
            if m.id.is_empty() || !seen.insert(m.id.as_str()) {
                return Err(ApiError::Config(format!("model ids must be unique and non-empty (`{}`)", m.id)));
            }
        }
        Ok(())
    }

    /// Explicit path first, then the environment variable.
    pub fn locate(explicit: Option<PathBuf>) -> Result<PathBuf, ApiError> {
        explicit
            .or_else(|| std::env::var_os(CONFIG_ENV).map(PathBuf::from))
            .ok_or_else(|| ApiError::Config(format!("no config given; pass --config or set {CONFIG_ENV}")))
    }
}

fn resolve(base: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}
