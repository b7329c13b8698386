//! Named, shared, immutable models loaded from a TOML config:
//!
//! ```toml
//! [[models]]
//! name = "sotu"
//! kind = "ngram"
//! path = "sotu.json"          # relative to the config file
//!
//! [[models]]
//! name = "oracle"
//! kind = "table"
//! path = "oracle.json"
//!
//! [[models]]
//! name = "big"
//! kind = "remote"
//! endpoint = "http://127.0.0.1:9000"
//! vocab_size = 258
//! ```

use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::backend::{LanguageModel, NGramModel, RemoteConfig, RemoteModel, TableModel};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ModelSource {
    Ngram { path: PathBuf },
    Table { path: PathBuf },
    Remote(RemoteConfig),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelEntry {
    pub name: String,
    #[serde(flatten)]
    pub source: ModelSource,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct RegistryConfig {
    #[serde(default)]
    pub models: Vec<ModelEntry>,
}

impl RegistryConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::InvalidConfig(e.to_string()))
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::InvalidConfig(e.to_string()))
    }
}

/// Registry listing entry.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelListing {
    pub name: String,
    pub kind: String,
    pub vocab_size: usize,
}

/// Loads a model file, telling n-gram and table files apart by content.
/// The model is named after the file stem unless the file carries a name.
pub fn load_model_file(path: impl AsRef<Path>) -> Result<Arc<dyn LanguageModel>> {
    let path = path.as_ref();
    let bytes = std::fs::read(path)?;
    let value: serde_json::Value = serde_json::from_slice(&bytes)?;
    let stem = path
        .file_stem()
        .and_then(|s| s.to_str())
        .unwrap_or("model")
        .to_string();
    if value.get("format").and_then(|f| f.as_str()) == Some("cfg-guidance-ngram") {
        return Ok(Arc::new(NGramModel::from_bytes(&bytes)?));
    }
    let has_name = value.get("name").is_some_and(|n| !n.is_null());
    let table = TableModel::from_file(serde_json::from_value(value)?)?;
    Ok(Arc::new(if has_name {
        table
    } else {
        table.with_name(stem)
    }))
}

pub struct Registry {
    config: RegistryConfig,
    models: Vec<Arc<dyn LanguageModel>>,
}

impl Registry {
    pub fn empty() -> Self {
        Self {
            config: RegistryConfig::default(),
            models: Vec::new(),
        }
    }

    /// Paths in `config` are resolved against `base_dir`. Each model takes
    /// its registry name.
    pub fn from_config(config: RegistryConfig, base_dir: &Path) -> Result<Self> {
        let mut models: Vec<Arc<dyn LanguageModel>> = Vec::with_capacity(config.models.len());
        for (i, entry) in config.models.iter().enumerate() {
            if config.models[..i].iter().any(|e| e.name == entry.name) {
                return Err(Error::InvalidConfig(format!(
                    "duplicate model name {:?}",
                    entry.name
                )));
            }
            let model: Arc<dyn LanguageModel> = match &entry.source {
                ModelSource::Ngram { path } => {
                    Arc::new(NGramModel::load(base_dir.join(path))?.with_name(entry.name.clone()))
                }
                ModelSource::Table { path } => {
                    Arc::new(TableModel::load(base_dir.join(path))?.with_name(entry.name.clone()))
                }
                ModelSource::Remote(cfg) => {
                    Arc::new(RemoteModel::new(entry.name.clone(), cfg.clone())?)
                }
            };
            models.push(model);
        }
        Ok(Self { config, models })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let config = RegistryConfig::from_toml(&std::fs::read_to_string(path)?)?;
        Self::from_config(config, path.parent().unwrap_or(Path::new(".")))
    }

    /// Registers an already-built model.
    pub fn insert(&mut self, entry: ModelEntry, model: Arc<dyn LanguageModel>) {
        self.config.models.push(entry);
        self.models.push(model);
    }

    pub fn config(&self) -> &RegistryConfig {
        &self.config
    }

    pub fn is_empty(&self) -> bool {
        self.models.is_empty()
    }

    pub fn len(&self) -> usize {
        self.models.len()
    }

    /// Looks up by name; `None` picks the first registered model.
    pub fn get(&self, name: Option<&str>) -> Option<Arc<dyn LanguageModel>> {
        match name {
            None => self.models.first().cloned(),
            Some(name) => self
                .config
                .models
                .iter()
                .position(|e| e.name == name)
                .map(|i| self.models[i].clone()),
        }
    }

    pub fn listing(&self) -> Vec<ModelListing> {
        self.config
            .models
            .iter()
            .zip(&self.models)
            .map(|(e, m)| ModelListing {
                name: e.name.clone(),
                kind: m.kind().to_string(),
                vocab_size: m.vocab_size(),
            })
            .collect()
    }
}
