use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use labelflow::corpus::{CorpusSnapshot, CorpusStore, DEFAULT_MAX_CHUNK_TOKENS};
use labelflow::fixtures;
use labelflow::lm::{LmConfig, NGramModel, DEFAULT_MU, DEFAULT_OOV_PENALTY, DEFAULT_ORDER};
use labelflow::pipelines::Engine;
use serde::{Deserialize, Serialize};

/// Settings shared by every subcommand. Read from a JSON file; missing
/// fields take their defaults.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CliConfig {
    pub store: PathBuf,
    /// Public pretraining text, one passage per line. The bundled synthetic
    /// pretraining text is used when unset.
    pub pretrain: Option<PathBuf>,
    pub order: usize,
    pub mu: f64,
    pub oov_penalty: f64,
    pub seed: u64,
    pub max_chunk_tokens: usize,
}

impl Default for CliConfig {
    fn default() -> Self {
        CliConfig {
            store: PathBuf::from("labelflow.journal"),
            pretrain: None,
            order: DEFAULT_ORDER,
            mu: DEFAULT_MU,
            oov_penalty: DEFAULT_OOV_PENALTY,
            seed: 0,
            max_chunk_tokens: DEFAULT_MAX_CHUNK_TOKENS,
        }
    }
}

impl CliConfig {
    pub fn load(path: Option<&Path>) -> Result<Self> {
        let Some(path) = path else { return Ok(CliConfig::default()) };
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        let config: CliConfig =
            serde_json::from_str(&text).with_context(|| format!("parsing config {}", path.display()))?;
        config.lm().validate()?;
        Ok(config)
    }

    pub fn lm(&self) -> LmConfig {
        LmConfig { order: self.order, mu: self.mu, oov_penalty: self.oov_penalty }
    }

    pub fn snapshot(&self) -> Result<CorpusSnapshot> {
        CorpusStore::load(&self.store).with_context(|| format!("loading store {}", self.store.display()))
    }

    pub fn snapshot_at(&self, version: u64) -> Result<CorpusSnapshot> {
        CorpusStore::load_at(&self.store, version)
            .with_context(|| format!("loading store {} at version {version}", self.store.display()))
    }

    pub fn engine(&self) -> Result<Engine> {
        let text = match &self.pretrain {
            Some(path) => {
                std::fs::read_to_string(path).with_context(|| format!("reading pretrain text {}", path.display()))?
            }
            None => fixtures::PRETRAIN_TXT.to_owned(),
        };
        let model: NGramModel = fixtures::pretrain_model(&text, self.lm())?;
        Ok(Engine::new(model)?)
    }
}
