use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sketchcage_core::guidance::GuidanceConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ServiceConfig {
    pub bind: String,
    /// Root of the on-disk store for scenes, cages, jobs and animations.
    pub workspace: PathBuf,
    /// Allow any origin, for the browser front end served elsewhere.
    pub cors_permissive: bool,
    /// Largest accepted request body in bytes.
    pub max_body_bytes: usize,
    pub guidance: GuidanceConfig,
}

impl Default for ServiceConfig {
    fn default() -> Self {
        Self {
            bind: "127.0.0.1:8765".into(),
            workspace: PathBuf::from("sketchcage-workspace"),
            cors_permissive: true,
            max_body_bytes: 512 << 20,
            guidance: GuidanceConfig::default(),
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("reading {0}: {1}")]
    Read(PathBuf, std::io::Error),
    #[error("parsing {0}: {1}")]
    Parse(PathBuf, toml::de::Error),
    #[error("bad value for {0}: {1}")]
    Env(&'static str, String),
}

impl ServiceConfig {
    /// Defaults, then the TOML file if given, then environment overrides.
    pub fn load(path: Option<&Path>) -> Result<Self, ConfigError> {
        let base = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| ConfigError::Read(p.into(), e))?;
                toml::from_str(&text).map_err(|e| ConfigError::Parse(p.into(), e))?
            }
            None => Self::default(),
        };
        base.with_env(|k| std::env::var(k).ok())
    }

    /// Applies `SKETCHCAGE_BIND`, `SKETCHCAGE_WORKSPACE`, `SKETCHCAGE_CORS`
    /// and the guidance variables, reading them through `get`.
    pub fn with_env(mut self, get: impl Fn(&str) -> Option<String>) -> Result<Self, ConfigError> {
        if let Some(v) = get("SKETCHCAGE_BIND") {
            self.bind = v;
        }
        if let Some(v) = get("SKETCHCAGE_WORKSPACE") {
            self.workspace = v.into();
        }
        if let Some(v) = get("SKETCHCAGE_CORS") {
            self.cors_permissive = match v.as_str() {
                "1" | "true" => true,
                "0" | "false" => false,
                _ => return Err(ConfigError::Env("SKETCHCAGE_CORS", v)),
            };
        }
        if let Some(v) = get("SKETCHCAGE_GUIDANCE_URL") {
            self.guidance.endpoint = v;
        }
        if let Some(v) = get("SKETCHCAGE_GUIDANCE_TIMEOUT") {
            self.guidance.timeout_secs = v.parse().map_err(|_| ConfigError::Env("SKETCHCAGE_GUIDANCE_TIMEOUT", v))?;
        }
        Ok(self)
    }
}
