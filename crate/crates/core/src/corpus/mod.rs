//! Labeled document store with immutable, versioned snapshots.
//!
//! Documents are ingested from JSONL records. A record without an explicit
//! label is readable by its authors. Every mutation produces a new
//! [`CorpusSnapshot`] with a higher version; snapshots already handed out
//! never change.

mod chunk;
mod journal;

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::StoreError;
use crate::lm::tokenize::tokenize;
use crate::policy::{self, authorizes, LabelAction, Principal, SecurityLabel, UserId};

pub use chunk::{chunk_document, token_count, DEFAULT_MAX_CHUNK_TOKENS, MIN_CHUNK_TOKENS};
pub use journal::{Journal, JournalEntry};

/// One line of an ingestion JSONL file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IngestRecord {
    pub id: String,
    #[serde(default)]
    pub title: String,
    #[serde(default, rename = "abstract", skip_serializing_if = "Option::is_none")]
    pub abstract_text: Option<String>,
    pub body: String,
    #[serde(default)]
    pub authors: Vec<UserId>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<SecurityLabel>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub created: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Document {
    pub id: String,
    pub title: String,
    #[serde(rename = "abstract", skip_serializing_if = "Option::is_none")]
    pub abstract_text: Option<String>,
    pub body: String,
    pub authors: Vec<UserId>,
    pub label: SecurityLabel,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub created: Option<String>,
}

impl Document {
    /// Builds a document from a record, deriving the label from authorship
    /// when the record carries none.
    pub fn from_record(record: IngestRecord) -> Result<Self, StoreError> {
        if record.body.trim().is_empty() {
            return Err(StoreError::EmptyBody(record.id));
        }
        let label = match record.label {
            Some(label) => label,
            None => {
                if record.authors.is_empty() {
                    return Err(StoreError::MissingAuthorsAndLabel(record.id));
                }
                SecurityLabel::from_set(record.authors.iter().cloned().collect())?
            }
        };
        Ok(Document {
            id: record.id,
            title: record.title,
            abstract_text: record.abstract_text,
            body: record.body,
            authors: record.authors,
            label,
            created: record.created,
        })
    }

    /// The record that re-ingests to this document.
    pub fn to_record(&self) -> IngestRecord {
        IngestRecord {
            id: self.id.clone(),
            title: self.title.clone(),
            abstract_text: self.abstract_text.clone(),
            body: self.body.clone(),
            authors: self.authors.clone(),
            label: Some(self.label.clone()),
            created: self.created.clone(),
        }
    }

    /// The single user a document's text is attributed to for user-level
    /// privacy accounting: the first listed author, else the first explicit
    /// reader, else a pseudo-user unique to the document.
    pub fn contributor(&self) -> String {
        if let Some(author) = self.authors.first() {
            return author.as_str().to_owned();
        }
        match &self.label {
            SecurityLabel::Users(readers) => readers
                .iter()
                .next()
                .map(|u| u.as_str().to_owned())
                .unwrap_or_default(),
            SecurityLabel::Public => format!("doc:{}", self.id),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Chunk {
    pub doc_id: String,
    pub index: usize,
    pub text: String,
    pub token_count: usize,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct StoredDocument {
    pub doc: Document,
    pub chunks: Arc<Vec<Chunk>>,
}

impl StoredDocument {
    fn new(doc: Document, max_chunk_tokens: usize) -> Self {
        let chunks = chunk_document(&doc.body, max_chunk_tokens)
            .into_iter()
            .enumerate()
            .map(|(index, text)| Chunk {
                doc_id: doc.id.clone(),
                index,
                token_count: tokenize(&text).len(),
                text,
            })
            .collect();
        StoredDocument { doc, chunks: Arc::new(chunks) }
    }
}

/// Immutable view of the store at one version.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CorpusSnapshot {
    version: u64,
    max_chunk_tokens: usize,
    docs: BTreeMap<String, Arc<StoredDocument>>,
}

impl CorpusSnapshot {
    pub fn empty(max_chunk_tokens: usize) -> Result<Self, StoreError> {
        if max_chunk_tokens < MIN_CHUNK_TOKENS {
            return Err(StoreError::InvalidChunkLimit(max_chunk_tokens));
        }
        Ok(CorpusSnapshot { version: 0, max_chunk_tokens, docs: BTreeMap::new() })
    }

    /// A snapshot holding exactly `docs`, at the given version.
    pub fn from_documents<I>(version: u64, max_chunk_tokens: usize, docs: I) -> Result<Self, StoreError>
    where
        I: IntoIterator<Item = Document>,
    {
        let mut snap = CorpusSnapshot::empty(max_chunk_tokens)?;
        snap.version = version;
        for doc in docs {
            if snap.docs.contains_key(&doc.id) {
                return Err(StoreError::DuplicateId(doc.id));
            }
            snap.docs.insert(doc.id.clone(), Arc::new(StoredDocument::new(doc, max_chunk_tokens)));
        }
        Ok(snap)
    }

    pub fn version(&self) -> u64 {
        self.version
    }

    pub fn max_chunk_tokens(&self) -> usize {
        self.max_chunk_tokens
    }

    pub fn len(&self) -> usize {
        self.docs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.docs.is_empty()
    }

    pub fn get_document(&self, id: &str) -> Result<&Document, StoreError> {
        self.docs
            .get(id)
            .map(|d| &d.doc)
            .ok_or_else(|| StoreError::UnknownDocument(id.to_owned()))
    }

    pub fn stored(&self, id: &str) -> Option<&StoredDocument> {
        self.docs.get(id).map(Arc::as_ref)
    }

    /// Documents in id order.
    pub fn documents(&self) -> impl Iterator<Item = &Document> + '_ {
        self.docs.values().map(|d| &d.doc)
    }

    /// Chunks in (document id, chunk index) order.
    pub fn chunks(&self) -> impl Iterator<Item = &Chunk> + '_ {
        self.docs.values().flat_map(|d| d.chunks.iter())
    }

    /// `(id, label)` pairs in id order.
    pub fn labeled_items(&self) -> impl Iterator<Item = (&str, &SecurityLabel)> + '_ {
        self.docs.iter().map(|(id, d)| (id.as_str(), &d.doc.label))
    }

    /// Every user named by an explicit label or an author list.
    pub fn users(&self) -> BTreeSet<UserId> {
        let mut users = BTreeSet::new();
        for doc in self.documents() {
            users.extend(doc.authors.iter().cloned());
            if let Some(readers) = doc.label.readers() {
                users.extend(readers.iter().cloned());
            }
        }
        users
    }

    pub fn project(&self, principal: &Principal) -> BTreeSet<&str> {
        policy::project(self.labeled_items(), principal)
    }

    pub fn lattice_nodes(&self) -> Vec<policy::LatticeNode> {
        policy::lattice_nodes(self.labeled_items())
    }

    /// The snapshot restricted to the documents `principal` may read,
    /// keeping the version.
    pub fn projection(&self, principal: &Principal) -> CorpusSnapshot {
        self.retain(|d| authorizes(&d.doc.label, principal))
    }

    /// Keeps the documents whose ids are in `ids`.
    pub fn restrict_documents(&self, ids: &BTreeSet<String>) -> CorpusSnapshot {
        self.retain(|d| ids.contains(&d.doc.id))
    }

    /// Keeps only the listed `(doc id, chunk index)` pairs; documents left
    /// with no chunks are dropped.
    pub fn restrict_chunks(&self, keep: &BTreeSet<(String, usize)>) -> CorpusSnapshot {
        let mut docs = BTreeMap::new();
        for (id, stored) in &self.docs {
            let chunks: Vec<Chunk> = stored
                .chunks
                .iter()
                .filter(|c| keep.contains(&(id.clone(), c.index)))
                .cloned()
                .collect();
            if chunks.is_empty() {
                continue;
            }
            let entry = if chunks.len() == stored.chunks.len() {
                Arc::clone(stored)
            } else {
                Arc::new(StoredDocument { doc: stored.doc.clone(), chunks: Arc::new(chunks) })
            };
            docs.insert(id.clone(), entry);
        }
        CorpusSnapshot { version: self.version, max_chunk_tokens: self.max_chunk_tokens, docs }
    }

    fn retain(&self, keep: impl Fn(&StoredDocument) -> bool) -> CorpusSnapshot {
        CorpusSnapshot {
            version: self.version,
            max_chunk_tokens: self.max_chunk_tokens,
            docs: self
                .docs
                .iter()
                .filter(|(_, d)| keep(d))
                .map(|(id, d)| (id.clone(), Arc::clone(d)))
                .collect(),
        }
    }

    /// Same version with `doc` inserted or replaced (re-chunked).
    pub fn with_document(&self, doc: Document) -> CorpusSnapshot {
        let mut next = self.clone();
        let stored = StoredDocument::new(doc, self.max_chunk_tokens);
        next.docs.insert(stored.doc.id.clone(), Arc::new(stored));
        next
    }

    /// Same version without document `id`.
    pub fn without_document(&self, id: &str) -> CorpusSnapshot {
        let mut next = self.clone();
        next.docs.remove(id);
        next
    }

    /// Same version with the label of `id` replaced; chunks are shared.
    pub fn with_label(&self, id: &str, label: SecurityLabel) -> Result<CorpusSnapshot, StoreError> {
        let stored = self.docs.get(id).ok_or_else(|| StoreError::UnknownDocument(id.to_owned()))?;
        let mut doc = stored.doc.clone();
        doc.label = label;
        let mut next = self.clone();
        next.docs.insert(
            id.to_owned(),
            Arc::new(StoredDocument { doc, chunks: Arc::clone(&stored.chunks) }),
        );
        Ok(next)
    }

    /// SHA-256 over the canonical JSONL export plus the visible chunks.
    pub fn content_digest(&self) -> String {
        let mut hasher = Sha256::new();
        for stored in self.docs.values() {
            hasher.update(serde_json::to_vec(&stored.doc).expect("document serializes"));
            hasher.update(b"\n");
            for chunk in stored.chunks.iter() {
                hasher.update(chunk.index.to_le_bytes());
                hasher.update(chunk.text.as_bytes());
                hasher.update(b"\x00");
            }
        }
        format!("{:x}", hasher.finalize())
    }

    /// One ingestion record per document, in id order.
    pub fn export_jsonl(&self) -> String {
        let mut out = String::new();
        for doc in self.documents() {
            out.push_str(&serde_json::to_string(&doc.to_record()).expect("record serializes"));
            out.push('\n');
        }
        out
    }
}

/// Parses JSONL ingestion records; blank lines are skipped and line numbers
/// in errors are 1-based.
pub fn parse_jsonl(text: &str) -> Result<Vec<IngestRecord>, StoreError> {
    text.lines()
        .enumerate()
        .filter(|(_, line)| !line.trim().is_empty())
        .map(|(i, line)| {
            serde_json::from_str(line)
                .map_err(|e| StoreError::Parse { line: i + 1, message: e.to_string() })
        })
        .collect()
}

/// Single-writer document store.
pub struct CorpusStore {
    current: Arc<CorpusSnapshot>,
    journal: Option<Journal>,
}

impl CorpusStore {
    /// An in-memory store.
    pub fn new(max_chunk_tokens: usize) -> Result<Self, StoreError> {
        Ok(CorpusStore { current: Arc::new(CorpusSnapshot::empty(max_chunk_tokens)?), journal: None })
    }

    /// Opens (or creates) a journal-backed store for writing. Holds the
    /// journal's lock file until dropped.
    pub fn open(path: impl AsRef<Path>, max_chunk_tokens: usize) -> Result<Self, StoreError> {
        let (journal, snapshot) = Journal::open_writer(path.as_ref(), max_chunk_tokens)?;
        Ok(CorpusStore { current: Arc::new(snapshot), journal: Some(journal) })
    }

    /// Replays a journal without taking the writer lock.
    pub fn load(path: impl AsRef<Path>) -> Result<CorpusSnapshot, StoreError> {
        Journal::replay(path.as_ref(), None)
    }

    /// Replays a journal up to and including `version`.
    pub fn load_at(path: impl AsRef<Path>, version: u64) -> Result<CorpusSnapshot, StoreError> {
        Journal::replay(path.as_ref(), Some(version))
    }

    pub fn snapshot(&self) -> Arc<CorpusSnapshot> {
        Arc::clone(&self.current)
    }

    pub fn version(&self) -> u64 {
        self.current.version
    }

    /// Ingests a batch atomically: either every record is added and the
    /// version increases by one, or nothing changes.
    pub fn ingest<I>(&mut self, records: I) -> Result<usize, StoreError>
    where
        I: IntoIterator<Item = IngestRecord>,
    {
        let mut seen = BTreeSet::new();
        let mut docs = Vec::new();
        for record in records {
            if self.current.docs.contains_key(&record.id) || !seen.insert(record.id.clone()) {
                return Err(StoreError::DuplicateId(record.id));
            }
            docs.push(Document::from_record(record)?);
        }
        let version = self.current.version + 1;
        if let Some(journal) = &mut self.journal {
            journal.append(&JournalEntry::Ingest { version, documents: docs.clone() })?;
        }
        let count = docs.len();
        self.apply_ingest(version, docs);
        Ok(count)
    }

    pub fn ingest_jsonl(&mut self, text: &str) -> Result<usize, StoreError> {
        let records = parse_jsonl(text)?;
        self.ingest(records)
    }

    pub fn update_label(&mut self, id: &str, action: LabelAction) -> Result<SecurityLabel, StoreError> {
        let current = self.current.get_document(id)?;
        let label = policy::apply_label_action(&current.label, &action)?;
        let version = self.current.version + 1;
        if let Some(journal) = &mut self.journal {
            journal.append(&JournalEntry::Label { version, doc: id.to_owned(), update: action })?;
        }
        self.apply_label(version, id, label.clone())?;
        Ok(label)
    }

    fn apply_ingest(&mut self, version: u64, docs: Vec<Document>) {
        let mut next = (*self.current).clone();
        for doc in docs {
            let stored = StoredDocument::new(doc, next.max_chunk_tokens);
            next.docs.insert(stored.doc.id.clone(), Arc::new(stored));
        }
        next.version = version;
        self.current = Arc::new(next);
    }

    fn apply_label(&mut self, version: u64, id: &str, label: SecurityLabel) -> Result<(), StoreError> {
        let mut next = self.current.with_label(id, label)?;
        next.version = version;
        self.current = Arc::new(next);
        Ok(())
    }
}
