use crate::corpus::{CorpusSnapshot, Document, IngestRecord};
use crate::lm::{LmConfig, NGramModel, TrainingChunk};
use crate::policy::{Principal, SecurityLabel, UserId};

/// A document readable by `readers` (public when empty), authored by the
/// first reader.
pub fn doc(id: &str, readers: &[&str], body: &str) -> Document {
    let label = if readers.is_empty() {
        SecurityLabel::Public
    } else {
        SecurityLabel::users(readers.iter().copied()).unwrap()
    };
    Document::from_record(IngestRecord {
        id: id.into(),
        title: String::new(),
        abstract_text: None,
        body: body.into(),
        authors: readers.iter().take(1).map(|r| UserId::new(*r).unwrap()).collect(),
        label: Some(label),
        created: None,
    })
    .unwrap()
}

pub fn snapshot(docs: Vec<Document>) -> CorpusSnapshot {
    CorpusSnapshot::from_documents(1, 16, docs).unwrap()
}

pub fn principal(users: &[&str]) -> Principal {
    Principal::new(users.iter().copied()).unwrap()
}

pub fn pretrain() -> NGramModel {
    let texts = [
        "the model reads the text and the model writes the text",
        "a study of the data shows the results of the study",
        "we present the method and the results",
    ];
    let chunks: Vec<TrainingChunk> = texts
        .iter()
        .map(|t| TrainingChunk { text: t, user: "public", label: &SecurityLabel::Public })
        .collect();
    NGramModel::train(&chunks, LmConfig::default()).unwrap()
}

/// Three users a, b, c with private, shared and public documents.
pub fn small_corpus() -> CorpusSnapshot {
    snapshot(vec![
        doc("d1", &["a"], "alpha river flows past the stone bridge. the river is cold in winter."),
        doc("d2", &["a", "b"], "shared notes on the river survey and the bridge repairs."),
        doc("d3", &["a", "b", "c"], "the bridge survey team met on monday to plan the repairs."),
        doc("d4", &["c"], "secret plans for a new tower near the market square."),
        doc("d5", &[], "the market opens early and the river boats arrive at dawn."),
        doc("d6", &["b"], "bravo kept a diary of the tower and the market."),
    ])
}
