//! TOML run configuration. Every section is optional; command-line flags
//! override whatever the file sets.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::embedding::{BaseEmbedder, HashEmbedder, HttpEmbedder, TripletConfig};
use crate::error::{Error, Result};
use crate::http::api_key_from_env;
use crate::llm::{ChatBackend, GatewayConfig, OpenAiBackend};
use crate::metrics::PricingTable;
use crate::pipeline::PipelineOptions;
use crate::sqlrun::RunnerConfig;

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PathsConfig {
    /// Spider-format root holding `tables.json` and `database/<db_id>/<db_id>.sqlite`.
    pub dataset_root: Option<PathBuf>,
    /// Question file, relative to `dataset_root` when not absolute.
    pub questions: Option<PathBuf>,
    pub exclusions: Option<PathBuf>,
    pub kb: Option<PathBuf>,
    pub projection: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    pub results: Option<PathBuf>,
    pub report: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BackendConfig {
    pub base_url: String,
    /// Name of the environment variable holding the API key.
    pub api_key_env: String,
}

impl Default for BackendConfig {
    fn default() -> Self {
        Self {
            base_url: "https://api.openai.com/v1".into(),
            api_key_env: "OPENAI_API_KEY".into(),
        }
    }
}

impl BackendConfig {
    pub fn chat_backend(&self) -> OpenAiBackend {
        OpenAiBackend::new(self.base_url.clone(), api_key_from_env(&self.api_key_env))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EmbedderKind {
    /// Offline hashed bag-of-tokens.
    #[default]
    Hash,
    /// OpenAI-compatible `/embeddings` endpoint, using the backend settings.
    Http,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EmbeddingConfig {
    pub kind: EmbedderKind,
    pub dimension: usize,
    pub model: String,
}

impl Default for EmbeddingConfig {
    fn default() -> Self {
        Self {
            kind: EmbedderKind::Hash,
            dimension: 768,
            model: "all-mpnet-base-v2".into(),
        }
    }
}

impl EmbeddingConfig {
    pub fn embedder(&self, backend: &BackendConfig) -> Result<Box<dyn BaseEmbedder>> {
        if self.dimension == 0 {
            return Err(Error::Config("embedding dimension must be positive".into()));
        }
        Ok(match self.kind {
            EmbedderKind::Hash => Box::new(HashEmbedder::new(self.dimension)),
            EmbedderKind::Http => Box::new(HttpEmbedder::new(
                backend.base_url.clone(),
                self.model.clone(),
                api_key_from_env(&backend.api_key_env),
                self.dimension,
            )),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: Option<u64>,
    pub parallelism: Option<usize>,
    pub paths: PathsConfig,
    pub backend: BackendConfig,
    pub gateway: GatewayConfig,
    pub pipeline: PipelineOptions,
    pub embedding: EmbeddingConfig,
    pub training: TripletConfig,
    pub runner: RunnerConfig,
    pub pricing: PricingTable,
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.pipeline.validate()?;
        cfg.training.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn chat_backend(&self) -> Box<dyn ChatBackend> {
        Box::new(self.backend.chat_backend())
    }
}
