//! Append-only JSONL journal backing a [`CorpusStore`].
//!
//! The first line records the chunking configuration; every later line is
//! one store mutation tagged with the version it produced. Replaying the
//! journal rebuilds the store exactly.

use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::{CorpusSnapshot, CorpusStore, Document};
use crate::error::StoreError;
use crate::policy::{apply_label_action, LabelAction};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case")]
pub enum JournalEntry {
    Create { max_chunk_tokens: usize },
    Ingest { version: u64, documents: Vec<Document> },
    Label { version: u64, doc: String, update: LabelAction },
}

pub struct Journal {
    file: File,
    lock_path: PathBuf,
}

impl Journal {
    pub(super) fn open_writer(path: &Path, max_chunk_tokens: usize) -> Result<(Journal, CorpusSnapshot), StoreError> {
        let lock_path = lock_path(path);
        OpenOptions::new()
            .write(true)
            .create_new(true)
            .open(&lock_path)
            .map_err(|e| match e.kind() {
                std::io::ErrorKind::AlreadyExists => StoreError::Locked(lock_path.display().to_string()),
                _ => StoreError::Io(e),
            })?;
        let result = Self::open_locked(path, max_chunk_tokens);
        if result.is_err() {
            let _ = fs::remove_file(&lock_path);
        }
        let (file, snapshot) = result?;
        Ok((Journal { file, lock_path }, snapshot))
    }

    fn open_locked(path: &Path, max_chunk_tokens: usize) -> Result<(File, CorpusSnapshot), StoreError> {
        let exists = path.exists() && fs::metadata(path)?.len() > 0;
        let snapshot = if exists {
            Self::replay(path, None)?
        } else {
            CorpusSnapshot::empty(max_chunk_tokens)?
        };
        let mut file = OpenOptions::new().create(true).append(true).open(path)?;
        if !exists {
            write_entry(&mut file, &JournalEntry::Create { max_chunk_tokens })?;
        }
        Ok((file, snapshot))
    }

    pub(super) fn append(&mut self, entry: &JournalEntry) -> Result<(), StoreError> {
        write_entry(&mut self.file, entry)
    }

    /// Rebuilds the snapshot recorded in `path`, stopping after `until`
    /// when given.
    pub fn replay(path: &Path, until: Option<u64>) -> Result<CorpusSnapshot, StoreError> {
        let reader = BufReader::new(File::open(path)?);
        let bad = |line: usize, message: String| StoreError::Journal {
            path: path.display().to_string(),
            line,
            message,
        };
        let mut store: Option<CorpusStore> = None;
        for (i, line) in reader.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let entry: JournalEntry = serde_json::from_str(&line).map_err(|e| bad(i + 1, e.to_string()))?;
            match (&mut store, entry) {
                (None, JournalEntry::Create { max_chunk_tokens }) => {
                    store = Some(CorpusStore::new(max_chunk_tokens)?);
                }
                (None, _) => return Err(bad(i + 1, "journal must start with a create entry".into())),
                (Some(_), JournalEntry::Create { .. }) => {
                    return Err(bad(i + 1, "duplicate create entry".into()))
                }
                (Some(s), JournalEntry::Ingest { version, documents }) => {
                    expect_version(s, version).map_err(|m| bad(i + 1, m))?;
                    for doc in &documents {
                        if s.current.docs.contains_key(&doc.id) {
                            return Err(StoreError::DuplicateId(doc.id.clone()));
                        }
                    }
                    s.apply_ingest(version, documents);
                }
                (Some(s), JournalEntry::Label { version, doc, update }) => {
                    expect_version(s, version).map_err(|m| bad(i + 1, m))?;
                    let label = apply_label_action(&s.current.get_document(&doc)?.label, &update)?;
                    s.apply_label(version, &doc, label)?;
                }
            }
            if let (Some(s), Some(limit)) = (&store, until) {
                if s.version() == limit {
                    break;
                }
            }
        }
        let store = store.ok_or_else(|| bad(0, "empty journal".into()))?;
        if let Some(limit) = until {
            if store.version() != limit {
                return Err(StoreError::UnknownVersion(limit));
            }
        }
        Ok(Arc::unwrap_or_clone(store.current))
    }
}

impl Drop for Journal {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.lock_path);
    }
}

fn expect_version(store: &CorpusStore, version: u64) -> Result<(), String> {
    if version != store.version() + 1 {
        return Err(format!("expected version {}, found {version}", store.version() + 1));
    }
    Ok(())
}

fn lock_path(path: &Path) -> PathBuf {
    let mut name = path.as_os_str().to_owned();
    name.push(".lock");
    PathBuf::from(name)
}

fn write_entry(file: &mut File, entry: &JournalEntry) -> Result<(), StoreError> {
    let mut line = serde_json::to_vec(entry).expect("journal entry serializes");
    line.push(b'\n');
    file.write_all(&line)?;
    file.sync_data()?;
    Ok(())
}
