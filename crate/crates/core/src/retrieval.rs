//! Policy-filtered top-K chunk retrieval.
//!
//! An index is built from one principal's projection only, including its
//! document frequencies, so documents the principal cannot read have no
//! influence on scores or ranking.

use std::cmp::Ordering;
use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::corpus::CorpusSnapshot;
use crate::lm::tokenize;
use crate::policy::{meet_labels, Principal, SecurityLabel};

/// Scores every indexed chunk against a tokenized query. Scores are indexed
/// like [`RetrievalIndex::chunks`].
pub trait ChunkScorer {
    fn score_all(&self, query: &[String]) -> Vec<f64>;
}

/// A chunk as seen by the index.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IndexedChunk {
    pub doc_id: String,
    pub index: usize,
    pub text: String,
    pub label: SecurityLabel,
}

/// TF-IDF cosine scorer over a fixed chunk set.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TfIdfScorer {
    /// Number of chunks.
    pub n: usize,
    /// Document frequency (in chunks) of each term.
    pub df: BTreeMap<String, u64>,
    /// Raw term frequencies per chunk.
    pub tf: Vec<BTreeMap<String, u64>>,
    norms: Vec<f64>,
}

impl TfIdfScorer {
    pub fn new<'a>(texts: impl IntoIterator<Item = &'a str>) -> Self {
        let mut tf = Vec::new();
        let mut df: BTreeMap<String, u64> = BTreeMap::new();
        for text in texts {
            let mut counts: BTreeMap<String, u64> = BTreeMap::new();
            for tok in tokenize(text) {
                *counts.entry(tok).or_insert(0) += 1;
            }
            for term in counts.keys() {
                *df.entry(term.clone()).or_insert(0) += 1;
            }
            tf.push(counts);
        }
        let mut scorer = TfIdfScorer { n: tf.len(), df, tf, norms: Vec::new() };
        scorer.norms = (0..scorer.tf.len())
            .map(|i| {
                let sq: f64 = scorer.tf[i].iter().map(|(t, &c)| scorer.weight(t, c).powi(2)).sum();
                sq.sqrt()
            })
            .collect();
        scorer
    }

    pub fn idf(&self, term: &str) -> Option<f64> {
        self.df.get(term).map(|&df| ((1.0 + self.n as f64) / (1.0 + df as f64)).ln())
    }

    /// (1 + ln tf) · idf; terms outside the vocabulary weigh nothing.
    pub fn weight(&self, term: &str, tf: u64) -> f64 {
        match self.idf(term) {
            Some(idf) if tf > 0 => (1.0 + (tf as f64).ln()) * idf,
            _ => 0.0,
        }
    }
}

impl ChunkScorer for TfIdfScorer {
    fn score_all(&self, query: &[String]) -> Vec<f64> {
        let mut qtf: BTreeMap<&str, u64> = BTreeMap::new();
        for tok in query {
            if self.df.contains_key(tok.as_str()) {
                *qtf.entry(tok.as_str()).or_insert(0) += 1;
            }
        }
        let qweights: Vec<(&str, f64)> = qtf.iter().map(|(t, &c)| (*t, self.weight(t, c))).collect();
        let qnorm = qweights.iter().map(|(_, w)| w * w).sum::<f64>().sqrt();
        self.tf
            .iter()
            .zip(&self.norms)
            .map(|(counts, &norm)| {
                if qnorm == 0.0 || norm == 0.0 {
                    return 0.0;
                }
                let dot: f64 = qweights
                    .iter()
                    .map(|(t, qw)| counts.get(*t).map_or(0.0, |&c| qw * self.weight(t, c)))
                    .sum();
                dot / (qnorm * norm)
            })
            .collect()
    }
}

/// Retrieval index over one principal's projection of one snapshot.
///
/// Only the chunk list and scorer are serialized, so indexes built for
/// different principals with the same projection compare equal.
#[derive(Clone, Debug, Serialize)]
pub struct RetrievalIndex<S = TfIdfScorer> {
    #[serde(skip)]
    pub snapshot_version: u64,
    #[serde(skip)]
    pub principal: Principal,
    pub chunks: Vec<IndexedChunk>,
    pub scorer: S,
}

impl RetrievalIndex<TfIdfScorer> {
    /// Indexes every chunk of `project(snapshot, principal)`.
    ///
    /// Panics if `principal` is empty.
    pub fn build(snapshot: &CorpusSnapshot, principal: &Principal) -> Self {
        assert!(!principal.is_empty(), "retrieval needs a non-empty principal");
        let projection = snapshot.projection(principal);
        let chunks: Vec<IndexedChunk> = projection
            .documents()
            .flat_map(|doc| {
                let stored = projection.stored(&doc.id).expect("document is stored");
                stored.chunks.iter().map(move |c| IndexedChunk {
                    doc_id: c.doc_id.clone(),
                    index: c.index,
                    text: c.text.clone(),
                    label: doc.label.clone(),
                })
            })
            .collect();
        let scorer = TfIdfScorer::new(chunks.iter().map(|c| c.text.as_str()));
        RetrievalIndex { snapshot_version: snapshot.version(), principal: principal.clone(), chunks, scorer }
    }
}

impl<S: ChunkScorer> RetrievalIndex<S> {
    pub fn len(&self) -> usize {
        self.chunks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.chunks.is_empty()
    }

    /// Top `k` chunks for `query`, ordered by score descending, then doc id,
    /// then chunk index.
    pub fn retrieve(&self, query: &str, k: usize) -> RetrievalResult {
        let scores = if k == 0 { Vec::new() } else { self.scorer.score_all(&tokenize(query)) };
        let mut order: Vec<usize> = (0..scores.len()).collect();
        order.sort_by(|&a, &b| {
            scores[b]
                .partial_cmp(&scores[a])
                .unwrap_or(Ordering::Equal)
                .then_with(|| self.chunks[a].doc_id.cmp(&self.chunks[b].doc_id))
                .then_with(|| self.chunks[a].index.cmp(&self.chunks[b].index))
        });
        order.truncate(k);
        let entries: Vec<RetrievedChunk> = order
            .into_iter()
            .map(|i| RetrievedChunk { chunk: self.chunks[i].clone(), score: scores[i] })
            .collect();
        let output_label = meet_labels(entries.iter().map(|e| &e.chunk.label))
            .expect("projection labels all admit the principal");
        RetrievalResult { k_requested: k, k_returned: entries.len(), entries, output_label }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RetrievedChunk {
    pub chunk: IndexedChunk,
    pub score: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RetrievalResult {
    pub entries: Vec<RetrievedChunk>,
    /// Meet of the entry labels; public when there are no entries.
    pub output_label: SecurityLabel,
    pub k_requested: usize,
    pub k_returned: usize,
}

impl RetrievalResult {
    /// (doc id, chunk index, score) per entry, in rank order.
    pub fn attribution(&self) -> Vec<(String, usize, f64)> {
        self.entries.iter().map(|e| (e.chunk.doc_id.clone(), e.chunk.index, e.score)).collect()
    }
}
