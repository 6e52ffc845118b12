//! Run configuration, read from a TOML file.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::datalake::{DEFAULT_MAX_CHARS, DEFAULT_OVERLAP_CHARS};
use crate::embed_index::MOCK_DEFAULT_DIM;
use crate::generation::{ModelProfile, DEFAULT_K};

pub const ENV_BIND: &str = "MDTB_BIND";
pub const ENV_AUTH_TOKEN: &str = "MDTB_AUTH_TOKEN";

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Read {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("invalid config: {0}")]
    Parse(String),
    #[error("invalid config: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ChunkingConfig {
    pub max_chars: usize,
    pub overlap_chars: usize,
}

impl Default for ChunkingConfig {
    fn default() -> Self {
        Self {
            max_chars: DEFAULT_MAX_CHARS,
            overlap_chars: DEFAULT_OVERLAP_CHARS,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RetrievalConfig {
    pub k: usize,
}

impl Default for RetrievalConfig {
    fn default() -> Self {
        Self { k: DEFAULT_K }
    }
}

/// The single embedding provider of an index.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum EmbeddingConfig {
    Hashing {
        #[serde(default = "default_dim")]
        dim: usize,
    },
    Http {
        id: String,
        endpoint: String,
        dim: usize,
        #[serde(default = "default_timeout")]
        timeout_s: f64,
    },
}

fn default_dim() -> usize {
    MOCK_DEFAULT_DIM
}

fn default_timeout() -> f64 {
    30.0
}

impl Default for EmbeddingConfig {
    fn default() -> Self {
        EmbeddingConfig::Hashing { dim: MOCK_DEFAULT_DIM }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ServiceConfig {
    pub bind: String,
    /// Bearer token required on every request.
    pub auth_token: Option<String>,
}

impl Default for ServiceConfig {
    fn default() -> Self {
        Self {
            bind: "127.0.0.1:8080".to_string(),
            auth_token: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub datalake_root: PathBuf,
    /// Form schema file; the bundled schema when absent.
    #[serde(default)]
    pub schema_path: Option<PathBuf>,
    /// Benchmark cases (`<case_id>/narrative.txt` + `truth.json`).
    #[serde(default)]
    pub fixtures_dir: Option<PathBuf>,
    #[serde(default)]
    pub chunking: ChunkingConfig,
    #[serde(default)]
    pub retrieval: RetrievalConfig,
    #[serde(default)]
    pub embedding: EmbeddingConfig,
    #[serde(default = "default_backends")]
    pub backends: Vec<ModelProfile>,
    #[serde(default)]
    pub service: ServiceConfig,
}

fn default_backends() -> Vec<ModelProfile> {
    vec![ModelProfile::mock("mock")]
}

impl RunConfig {
    /// Defaults around a data-lake root: bundled schema, hashing embedder and
    /// a single mock backend.
    pub fn with_root(root: impl Into<PathBuf>) -> Self {
        Self {
            datalake_root: root.into(),
            schema_path: None,
            fixtures_dir: None,
            chunking: ChunkingConfig::default(),
            retrieval: RetrievalConfig::default(),
            embedding: EmbeddingConfig::default(),
            backends: default_backends(),
            service: ServiceConfig::default(),
        }
    }

    /// Reads a config file, resolves relative paths against its directory,
    /// applies `MDTB_BIND` / `MDTB_AUTH_TOKEN` and validates.
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Read {
            path: path.to_path_buf(),
            source,
        })?;
        let mut cfg = Self::from_toml_str(&text)?;
        cfg.resolve_relative(path.parent().unwrap_or(Path::new(".")));
        cfg.apply_env(|k| std::env::var(k).ok());
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_toml_str(text: &str) -> Result<Self, ConfigError> {
        toml::from_str(text).map_err(|e| ConfigError::Parse(e.to_string()))
    }

    pub fn resolve_relative(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        fix(&mut self.datalake_root);
        if let Some(p) = self.schema_path.as_mut() {
            fix(p);
        }
        if let Some(p) = self.fixtures_dir.as_mut() {
            fix(p);
        }
    }

    pub fn apply_env(&mut self, lookup: impl Fn(&str) -> Option<String>) {
        if let Some(bind) = lookup(ENV_BIND).filter(|v| !v.is_empty()) {
            self.service.bind = bind;
        }
        if let Some(token) = lookup(ENV_AUTH_TOKEN).filter(|v| !v.is_empty()) {
            self.service.auth_token = Some(token);
        }
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let invalid = |m: String| Err(ConfigError::Invalid(m));
        if let Some(p) = &self.schema_path {
            if !p.is_file() {
                return invalid(format!("schema_path {} does not exist", p.display()));
            }
        }
        if let Some(p) = &self.fixtures_dir {
            if !p.is_dir() {
                return invalid(format!("fixtures_dir {} does not exist", p.display()));
            }
        }
        let c = &self.chunking;
        if c.overlap_chars == 0 || c.overlap_chars >= c.max_chars {
            return invalid(format!("chunking needs 0 < overlap_chars < max_chars (got {} / {})", c.overlap_chars, c.max_chars));
        }
        if self.retrieval.k == 0 {
            return invalid("retrieval.k must be at least 1".into());
        }
        match &self.embedding {
            EmbeddingConfig::Hashing { dim } | EmbeddingConfig::Http { dim, .. } if *dim == 0 => {
                return invalid("embedding dim must be positive".into())
            }
            _ => {}
        }
        if self.backends.is_empty() {
            return invalid("at least one backend profile is required".into());
        }
        let mut seen = std::collections::BTreeSet::new();
        for b in &self.backends {
            b.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
            if !seen.insert(&b.backend_id) {
                return invalid(format!("duplicate backend_id {}", b.backend_id));
            }
        }
        Ok(())
    }

    pub fn backend(&self, id: &str) -> Option<&ModelProfile> {
        self.backends.iter().find(|b| b.backend_id == id)
    }
}
