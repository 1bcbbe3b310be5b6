//! The shipped synthetic corpus and pretraining text.
//!
//! Both files are the output of [`synth::generate`] with the default
//! config. Regenerate with `labelflow synth --out crates/core/fixtures`.

use crate::corpus::{parse_jsonl, CorpusSnapshot, CorpusStore, IngestRecord, DEFAULT_MAX_CHUNK_TOKENS};
use crate::error::{LmError, StoreError};
use crate::lm::{LmConfig, NGramModel, TrainingChunk};
use crate::policy::SecurityLabel;

pub const CORPUS_JSONL: &str = include_str!("../fixtures/corpus.jsonl");
pub const PRETRAIN_TXT: &str = include_str!("../fixtures/pretrain.txt");

/// Trains a public model with one chunk per non-empty line.
pub fn pretrain_model(text: &str, config: LmConfig) -> Result<NGramModel, LmError> {
    let public = SecurityLabel::Public;
    let chunks: Vec<TrainingChunk> = text
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(|text| TrainingChunk { text, user: "public", label: &public })
        .collect();
    NGramModel::train(&chunks, config)
}

pub fn records() -> Result<Vec<IngestRecord>, StoreError> {
    parse_jsonl(CORPUS_JSONL)
}

/// The fixture corpus ingested as one batch with the default chunk size.
pub fn snapshot() -> Result<CorpusSnapshot, StoreError> {
    let mut store = CorpusStore::new(DEFAULT_MAX_CHUNK_TOKENS)?;
    store.ingest(records()?)?;
    Ok((*store.snapshot()).clone())
}

pub fn pretrain() -> Result<NGramModel, LmError> {
    pretrain_model(PRETRAIN_TXT, LmConfig::default())
}

#[cfg(test)]
mod tests {
    use crate::synth::{generate, SynthConfig};

    #[test]
    fn fixtures_match_the_generator() {
        let corpus = generate(&SynthConfig::default());
        if std::env::var_os("LABELFLOW_WRITE_FIXTURES").is_some() {
            let dir = std::path::Path::new(env!("CARGO_MANIFEST_DIR")).join("fixtures");
            std::fs::write(dir.join("corpus.jsonl"), corpus.to_jsonl()).unwrap();
            std::fs::write(dir.join("pretrain.txt"), corpus.pretrain_text()).unwrap();
            return;
        }
        assert_eq!(super::CORPUS_JSONL, corpus.to_jsonl());
        assert_eq!(super::PRETRAIN_TXT, corpus.pretrain_text());
    }

    #[test]
    fn fixtures_load() {
        let snap = super::snapshot().unwrap();
        assert_eq!(snap.len(), 200);
        assert!(super::pretrain().unwrap().label().unwrap().is_public());
    }
}
