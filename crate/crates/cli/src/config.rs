//! Service configuration: a flat TOML file with `UMIVR_*` environment
//! overrides.

use std::collections::HashMap;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use toml::{Table, Value};

use umivr_core::embedder::{HashEmbedder, HttpEmbedder, TextEmbedder};
use umivr_core::llm_gateway::{Gateway, GatewayConfig, GenerationBackend, HttpBackend, MockBackend};

use crate::error::AppError;

pub const ENV_PREFIX: &str = "UMIVR_";

const NUMERIC_FIELDS: [&str; 3] = ["backend_vision", "backend_timeout_secs", "hash_seed"];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackendKind {
    Mock,
    Http,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EmbedderKind {
    Hash,
    Http,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ServiceConfig {
    pub listen: String,
    pub index: PathBuf,
    pub sessions_dir: PathBuf,
    pub cors_origins: Vec<String>,

    pub backend: BackendKind,
    /// Lookup table for the mock backend.
    pub mock_table: Option<PathBuf>,
    pub backend_url: String,
    pub backend_model: String,
    pub backend_api_key: Option<String>,
    /// Whether the generation backend accepts frame attachments.
    pub backend_vision: bool,
    pub backend_timeout_secs: u64,

    pub embedder: EmbedderKind,
    pub hash_seed: u64,
    pub embedder_url: String,
    pub embedder_model: String,
    pub embedder_api_key: Option<String>,
}

impl Default for ServiceConfig {
    fn default() -> Self {
        Self {
            listen: "127.0.0.1:8080".into(),
            index: "index.bin".into(),
            sessions_dir: "sessions".into(),
            cors_origins: vec![
                "http://localhost:5173".into(),
                "http://127.0.0.1:5173".into(),
                "http://localhost:3000".into(),
            ],
            backend: BackendKind::Mock,
            mock_table: None,
            backend_url: "http://127.0.0.1:8000/v1".into(),
            backend_model: "default".into(),
            backend_api_key: None,
            backend_vision: false,
            backend_timeout_secs: 60,
            embedder: EmbedderKind::Hash,
            hash_seed: 0,
            embedder_url: "http://127.0.0.1:8000/v1".into(),
            embedder_model: "default".into(),
            embedder_api_key: None,
        }
    }
}

impl ServiceConfig {
    /// Reads `path` (if given), then applies `UMIVR_<FIELD>` variables from
    /// `env`. Boolean and integer fields parse as TOML scalars, list fields
    /// take comma-separated strings, and the rest are taken verbatim.
    pub fn load(path: Option<&Path>, env: &HashMap<String, String>) -> Result<Self, AppError> {
        let mut table = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p)
                    .map_err(|e| AppError::io(format!("reading {}: {e}", p.display())))?;
                text.parse::<Table>()
                    .map_err(|e| AppError::validation("invalid_config", format!("{}: {e}", p.display())))?
            }
            None => Table::new(),
        };
        for (key, raw) in env {
            let Some(field) = key.strip_prefix(ENV_PREFIX) else { continue };
            let field = field.to_ascii_lowercase();
            let value = if field == "cors_origins" {
                Value::Array(
                    raw.split(',')
                        .map(str::trim)
                        .filter(|s| !s.is_empty())
                        .map(|s| Value::String(s.into()))
                        .collect(),
                )
            } else if NUMERIC_FIELDS.contains(&field.as_str()) {
                parse_scalar(raw)
            } else {
                Value::String(raw.clone())
            };
            table.insert(field, value);
        }
        let cfg: Self = table
            .try_into()
            .map_err(|e| AppError::validation("invalid_config", e.to_string()))?;
        cfg.listen_addr()?;
        Ok(cfg)
    }

    pub fn from_process_env(path: Option<&Path>) -> Result<Self, AppError> {
        Self::load(path, &std::env::vars().collect())
    }

    pub fn listen_addr(&self) -> Result<SocketAddr, AppError> {
        self.listen
            .parse()
            .map_err(|e| AppError::validation("invalid_config", format!("listen address {:?}: {e}", self.listen)))
    }

    pub fn embedder(&self, dim: usize) -> Arc<dyn TextEmbedder> {
        match self.embedder {
            EmbedderKind::Hash => Arc::new(HashEmbedder::new(dim).with_seed(self.hash_seed)),
            EmbedderKind::Http => Arc::new(
                HttpEmbedder::new(&self.embedder_url, &self.embedder_model, dim)
                    .with_api_key(self.embedder_api_key.clone())
                    .with_timeout(Duration::from_secs(self.backend_timeout_secs)),
            ),
        }
    }

    pub fn gateway(&self) -> Result<Gateway, AppError> {
        let backend: Arc<dyn GenerationBackend> = match self.backend {
            BackendKind::Mock => {
                let mock = match &self.mock_table {
                    Some(p) => MockBackend::from_file(p).map_err(|e| AppError::io(e.to_string()))?,
                    None => MockBackend::new(HashMap::new()),
                };
                Arc::new(if self.backend_vision { mock } else { mock.text_only() })
            }
            BackendKind::Http => Arc::new(
                HttpBackend::new(&self.backend_url, &self.backend_model)
                    .with_api_key(self.backend_api_key.clone())
                    .with_timeout(Duration::from_secs(self.backend_timeout_secs))
                    .with_frame_attachments(self.backend_vision),
            ),
        };
        let config = GatewayConfig {
            timeout: Duration::from_secs(self.backend_timeout_secs),
            ..GatewayConfig::default()
        };
        Ok(Gateway::new(backend).with_config(config))
    }
}

fn parse_scalar(raw: &str) -> Value {
    format!("v = {raw}")
        .parse::<Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| Value::String(raw.to_string()))
}
