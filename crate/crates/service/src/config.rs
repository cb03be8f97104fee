//! TOML configuration shared by every command.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use guiderag_core::agent::AgentConfig;
use guiderag_core::answer::{AnswerConfig, REFUSAL_FR};
use guiderag_core::benchmark::GeneratorConfig;
use guiderag_core::corpus::CleaningSpec;
use guiderag_core::engine::EngineConfig;
use guiderag_core::index::DEFAULT_COLLECTION_NAME;
use guiderag_core::provider::{
    EmbeddingProvider, LanguageProvider, MockEmbeddingProvider, RemoteEmbeddingProvider, RemoteEndpoint,
    RemoteLanguageProvider, ScriptedLanguageProvider,
};
use guiderag_core::retrieve::EnsembleConfig;
use serde::Deserialize;

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("config file {} not found", .0.display())]
    Missing(PathBuf),
    #[error("cannot read config file {}: {source}", path.display())]
    Read { path: PathBuf, source: std::io::Error },
    #[error("invalid config file {}: {message}", path.display())]
    Invalid { path: PathBuf, message: String },
    #[error("cannot load mock script {}: {message}", path.display())]
    Script { path: PathBuf, message: String },
}

#[derive(Debug, Clone, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum LanguageProviderConfig {
    /// Scripted responses; without a script every call returns the refusal sentence.
    Mock {
        #[serde(default)]
        script: Option<PathBuf>,
    },
    Remote(RemoteEndpoint),
}

impl Default for LanguageProviderConfig {
    fn default() -> Self {
        LanguageProviderConfig::Mock { script: None }
    }
}

fn default_dimension() -> usize {
    64
}

#[derive(Debug, Clone, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum EmbeddingProviderConfig {
    Mock {
        #[serde(default = "default_dimension")]
        dimension: usize,
    },
    Remote {
        endpoint: String,
        model: String,
        #[serde(default)]
        api_key_env: Option<String>,
        dimension: usize,
    },
}

impl Default for EmbeddingProviderConfig {
    fn default() -> Self {
        EmbeddingProviderConfig::Mock { dimension: default_dimension() }
    }
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProvidersConfig {
    pub language: LanguageProviderConfig,
    pub embedding: EmbeddingProviderConfig,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StorageConfig {
    /// Parsed element files, one per source document.
    pub elements: Vec<PathBuf>,
    pub cleaned: PathBuf,
    pub chunks: PathBuf,
    pub index_dir: PathBuf,
    pub collection: String,
    pub state_dir: PathBuf,
}

impl Default for StorageConfig {
    fn default() -> Self {
        Self {
            elements: Vec::new(),
            cleaned: "data/elements.json".into(),
            chunks: "data/chunks.json".into(),
            index_dir: "data/index".into(),
            collection: DEFAULT_COLLECTION_NAME.into(),
            state_dir: "data/state".into(),
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ServerConfig {
    pub bind: String,
    /// Environment variable holding the bearer token.
    pub auth_token_env: String,
}

impl Default for ServerConfig {
    fn default() -> Self {
        Self { bind: "127.0.0.1:8080".into(), auth_token_env: "GUIDERAG_API_TOKEN".into() }
    }
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub providers: ProvidersConfig,
    pub retrieval: EnsembleConfig,
    pub answer: AnswerConfig,
    pub agent: AgentConfig,
    pub storage: StorageConfig,
    pub server: ServerConfig,
    pub cleaning: CleaningSpec,
    pub benchmark: GeneratorConfig,
    /// Tool description per source filename.
    pub tools: BTreeMap<String, String>,
}

fn resolve(base: &Path, path: &mut PathBuf) {
    if path.is_relative() {
        *path = base.join(&*path);
    }
}

impl Config {
    /// Parse `path`; relative paths inside are taken relative to its directory.
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        if !path.exists() {
            return Err(ConfigError::Missing(path.to_path_buf()));
        }
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Read { path: path.to_path_buf(), source })?;
        let mut config: Config =
            toml::from_str(&text).map_err(|e| ConfigError::Invalid { path: path.to_path_buf(), message: e.to_string() })?;
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        let storage = &mut config.storage;
        for p in storage.elements.iter_mut() {
            resolve(&base, p);
        }
        for p in [&mut storage.cleaned, &mut storage.chunks, &mut storage.index_dir, &mut storage.state_dir] {
            resolve(&base, p);
        }
        if let LanguageProviderConfig::Mock { script: Some(p) } = &mut config.providers.language {
            resolve(&base, p);
        }
        let invalid = |message: String| ConfigError::Invalid { path: path.to_path_buf(), message };
        config.retrieval.validate().map_err(|e| invalid(e.to_string()))?;
        config.agent.validate().map_err(|e| invalid(e.to_string()))?;
        config.cleaning.validate().map_err(|e| invalid(e.to_string()))?;
        Ok(config)
    }

    pub fn language_provider(&self) -> Result<Arc<dyn LanguageProvider>, ConfigError> {
        Ok(match &self.providers.language {
            LanguageProviderConfig::Mock { script: None } => Arc::new(ScriptedLanguageProvider::new(REFUSAL_FR)),
            LanguageProviderConfig::Mock { script: Some(path) } => Arc::new(
                ScriptedLanguageProvider::from_file(path)
                    .map_err(|e| ConfigError::Script { path: path.clone(), message: e.to_string() })?,
            ),
            LanguageProviderConfig::Remote(endpoint) => Arc::new(RemoteLanguageProvider::new(endpoint.clone())),
        })
    }

    pub fn embedding_provider(&self) -> Arc<dyn EmbeddingProvider> {
        match &self.providers.embedding {
            EmbeddingProviderConfig::Mock { dimension } => Arc::new(MockEmbeddingProvider::new(*dimension)),
            EmbeddingProviderConfig::Remote { endpoint, model, api_key_env, dimension } => Arc::new(RemoteEmbeddingProvider::new(
                RemoteEndpoint { endpoint: endpoint.clone(), model: model.clone(), api_key_env: api_key_env.clone() },
                *dimension,
            )),
        }
    }

    pub fn engine_config(&self) -> EngineConfig {
        EngineConfig {
            retrieval: self.retrieval.clone(),
            answer: self.answer,
            agent: self.agent.clone(),
            tool_descriptions: self.tools.clone(),
        }
    }
}
