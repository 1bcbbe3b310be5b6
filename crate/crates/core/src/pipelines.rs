//! The model pipelines behind one contract: `answer(kind, query, snapshot)`.
//!
//! Every output carries a label and a source set. An output is delivered
//! only if its label may flow to the query's required label.

use std::collections::HashMap;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::CorpusSnapshot;
use crate::error::PipelineError;
use crate::lm::{dp_train, tokenize, Augmentation, LmConfig, NGramModel, PrivacyBudget, TrainingChunk};
use crate::policy::{authorizes, can_flow, meet_labels, Principal, SecurityLabel};
use crate::retrieval::{RetrievalIndex, RetrievalResult};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RaMethod {
    Prompt,
    Knn,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum PipelineKind {
    /// The public pretrained model alone.
    ZeroShot,
    /// Pretrained model fine-tuned on every document. Refused unless the
    /// operator declassifies it.
    GlobalFineTune { declassify: bool },
    /// Pretrained model stacked with DP counts over every document.
    GlobalDp { epsilon: f64, delta: f64, cap: u64, noise_seed: u64 },
    /// Pretrained model fine-tuned on the principal's projection.
    Personalized,
    /// Pretrained model conditioned on the top `k` chunks of the principal's
    /// projection.
    RetrievalAugmented { method: RaMethod, k: usize, lambda: f64 },
}

impl PipelineKind {
    pub fn name(&self) -> &'static str {
        match self {
            PipelineKind::ZeroShot => "zero_shot",
            PipelineKind::GlobalFineTune { .. } => "global_fine_tune",
            PipelineKind::GlobalDp { .. } => "global_dp",
            PipelineKind::Personalized => "personalized",
            PipelineKind::RetrievalAugmented { method: RaMethod::Prompt, .. } => "ra_prompt",
            PipelineKind::RetrievalAugmented { method: RaMethod::Knn, .. } => "ra_knn",
        }
    }

    fn validate(&self) -> Result<(), PipelineError> {
        match self {
            PipelineKind::GlobalDp { epsilon, delta, cap, .. } => {
                let budget = PrivacyBudget::new(*epsilon, *delta)?;
                if budget.epsilon <= 0.0 {
                    return Err(crate::error::LmError::InvalidBudget("epsilon must be > 0".into()).into());
                }
                if *cap == 0 {
                    return Err(crate::error::LmError::InvalidCap.into());
                }
            }
            PipelineKind::RetrievalAugmented { lambda, .. } if !(0.0..=1.0).contains(lambda) => {
                return Err(crate::error::LmError::InvalidLambda(*lambda).into());
            }
            _ => {}
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Query {
    pub text: String,
    pub principal: Principal,
    /// Defaults to the principal's own reader set.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub required_label: Option<SecurityLabel>,
    pub seed: u64,
    /// Text to score after `text`. Without it, `text` itself is scored.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub continuation: Option<String>,
}

impl Query {
    pub fn new(text: impl Into<String>, principal: Principal, seed: u64) -> Self {
        Query { text: text.into(), principal, required_label: None, seed, continuation: None }
    }

    pub fn with_continuation(mut self, continuation: impl Into<String>) -> Self {
        self.continuation = Some(continuation.into());
        self
    }

    pub fn with_required_label(mut self, label: SecurityLabel) -> Self {
        self.required_label = Some(label);
        self
    }

    pub fn required(&self) -> Result<SecurityLabel, PipelineError> {
        match &self.required_label {
            Some(label) => Ok(label.clone()),
            None => Ok(self.principal.as_label()?),
        }
    }

    fn validate(&self) -> Result<SecurityLabel, PipelineError> {
        if self.principal.is_empty() {
            return Err(PipelineError::InvalidQuery("principal must not be empty".into()));
        }
        let required = self.required()?;
        if !authorizes(&required, &self.principal) {
            return Err(PipelineError::InvalidQuery(format!(
                "required label {required} does not admit principal {}",
                self.principal
            )));
        }
        Ok(required)
    }

    /// (context, scored tokens).
    fn split(&self) -> Result<(Vec<String>, Vec<String>), PipelineError> {
        let (context, scored) = match &self.continuation {
            Some(c) => (tokenize(&self.text), tokenize(c)),
            None => (Vec::new(), tokenize(&self.text)),
        };
        if scored.is_empty() {
            return Err(PipelineError::InvalidQuery("nothing to score".into()));
        }
        Ok((context, scored))
    }
}

#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct SourceRef {
    pub doc_id: String,
    pub chunk_index: usize,
}

/// The data an output may depend on.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", content = "value", rename_all = "snake_case")]
pub enum Sources {
    Chunks(Vec<SourceRef>),
    EntireDataset,
    NodeProjection(Principal),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum Mode {
    Scored { context: Vec<String>, tokens: Vec<String>, log_probs: Vec<f64> },
    Generated { context: Vec<String>, tokens: Vec<String>, max_tokens: usize, temperature: f64 },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PipelineOutput {
    pub pipeline: PipelineKind,
    pub query: Query,
    #[serde(flatten)]
    pub mode: Mode,
    pub output_label: SecurityLabel,
    pub sources: Sources,
    pub seed: u64,
    pub snapshot_version: u64,
}

impl PipelineOutput {
    /// Canonical serialization: sorted keys, shortest round-trip floats.
    pub fn canonical_bytes(&self) -> Vec<u8> {
        let value = serde_json::to_value(self).expect("output serializes");
        serde_json::to_vec(&value).expect("value serializes")
    }

    /// Mean-token perplexity of a scored output.
    pub fn perplexity(&self) -> Option<f64> {
        match &self.mode {
            Mode::Scored { log_probs, .. } => crate::lm::perplexity_from_log_probs(log_probs).ok(),
            Mode::Generated { .. } => None,
        }
    }
}

/// Counters for the models and indexes an engine has built.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct EngineStats {
    pub personalized_trained: usize,
    pub personalized_cached: usize,
    pub global_trained: usize,
    pub indexes_built: usize,
}

type NodeKey = (Principal, String);

/// Runs pipelines against a fixed public pretrained model, caching trained
/// models. Safe to share across threads.
pub struct Engine {
    pretrain: Arc<NGramModel>,
    personalized: Mutex<HashMap<NodeKey, Arc<NGramModel>>>,
    global: Mutex<HashMap<(String, String), Arc<NGramModel>>>,
    personalized_trained: AtomicUsize,
    global_trained: AtomicUsize,
    indexes_built: AtomicUsize,
}

struct Prepared {
    model: Arc<NGramModel>,
    augmentation: Augmentation,
    output_label: SecurityLabel,
    sources: Sources,
}

impl Engine {
    pub fn new(pretrain: NGramModel) -> Result<Self, PipelineError> {
        match pretrain.label() {
            Ok(SecurityLabel::Public) => {}
            Ok(other) => return Err(PipelineError::PrivatePretrainModel(other.to_string())),
            Err(e) => return Err(PipelineError::PrivatePretrainModel(e.to_string())),
        }
        Ok(Engine {
            pretrain: Arc::new(pretrain),
            personalized: Mutex::new(HashMap::new()),
            global: Mutex::new(HashMap::new()),
            personalized_trained: AtomicUsize::new(0),
            global_trained: AtomicUsize::new(0),
            indexes_built: AtomicUsize::new(0),
        })
    }

    /// A new engine over the same pretrained model with empty caches.
    pub fn fresh(&self) -> Engine {
        Engine::new((*self.pretrain).clone()).expect("pretrain model already checked")
    }

    pub fn pretrain(&self) -> &NGramModel {
        &self.pretrain
    }

    pub fn config(&self) -> &LmConfig {
        self.pretrain.config()
    }

    pub fn stats(&self) -> EngineStats {
        EngineStats {
            personalized_trained: self.personalized_trained.load(Ordering::SeqCst),
            personalized_cached: self.personalized.lock().expect("cache lock").len(),
            global_trained: self.global_trained.load(Ordering::SeqCst),
            indexes_built: self.indexes_built.load(Ordering::SeqCst),
        }
    }

    /// Cached personalized models as (principal, projection digest), sorted.
    pub fn personalized_keys(&self) -> Vec<(Principal, String)> {
        let mut keys: Vec<NodeKey> = self.personalized.lock().expect("cache lock").keys().cloned().collect();
        keys.sort();
        keys
    }

    /// Drops personalized models whose principal's projection differs in
    /// `snapshot`. Returns the number evicted.
    pub fn evict_stale(&self, snapshot: &CorpusSnapshot) -> usize {
        let mut cache = self.personalized.lock().expect("cache lock");
        let before = cache.len();
        cache.retain(|(principal, digest), _| &snapshot.projection(principal).content_digest() == digest);
        before - cache.len()
    }

    /// Scores the query under `kind`.
    pub fn answer(
        &self,
        kind: &PipelineKind,
        query: &Query,
        snapshot: &CorpusSnapshot,
    ) -> Result<PipelineOutput, PipelineError> {
        let (context, scored) = query.split()?;
        let prepared = self.prepare(kind, query, snapshot)?;
        let log_probs = prepared.model.score_continuation(&context, &scored, &prepared.augmentation)?;
        Ok(self.finish(kind, query, snapshot, prepared, Mode::Scored { context, tokens: scored, log_probs }))
    }

    /// Generates up to `max_tokens` tokens after the query text. Temperature
    /// 0 is greedy; otherwise tokens are sampled with the query seed.
    pub fn generate(
        &self,
        kind: &PipelineKind,
        query: &Query,
        snapshot: &CorpusSnapshot,
        max_tokens: usize,
        temperature: f64,
    ) -> Result<PipelineOutput, PipelineError> {
        if max_tokens == 0 {
            return Err(PipelineError::InvalidQuery("max tokens must be at least 1".into()));
        }
        if !(temperature >= 0.0 && temperature.is_finite()) {
            return Err(PipelineError::InvalidQuery(format!("invalid temperature {temperature}")));
        }
        let prepared = self.prepare(kind, query, snapshot)?;
        let context = tokenize(&query.text);
        let mut history = context.clone();
        let mut rng = ChaCha20Rng::seed_from_u64(query.seed);
        let mut tokens = Vec::with_capacity(max_tokens);
        for _ in 0..max_tokens {
            let dist = prepared.model.next_token_dist(&history, &prepared.augmentation)?;
            let next = if temperature == 0.0 {
                dist.argmax().map(str::to_owned)
            } else {
                sample(dist.entries(), temperature, &mut rng)
            };
            let Some(next) = next else { break };
            history.push(next.clone());
            tokens.push(next);
        }
        Ok(self.finish(kind, query, snapshot, prepared, Mode::Generated { context, tokens, max_tokens, temperature }))
    }

    /// The retrieval step of a retrieval-augmented query, for inspection.
    pub fn retrieve(&self, query: &Query, snapshot: &CorpusSnapshot, k: usize) -> RetrievalResult {
        self.indexes_built.fetch_add(1, Ordering::SeqCst);
        RetrievalIndex::build(snapshot, &query.principal).retrieve(&query.text, k)
    }

    fn finish(
        &self,
        kind: &PipelineKind,
        query: &Query,
        snapshot: &CorpusSnapshot,
        prepared: Prepared,
        mode: Mode,
    ) -> PipelineOutput {
        PipelineOutput {
            pipeline: kind.clone(),
            query: query.clone(),
            mode,
            output_label: prepared.output_label,
            sources: prepared.sources,
            seed: query.seed,
            snapshot_version: snapshot.version(),
        }
    }

    fn prepare(&self, kind: &PipelineKind, query: &Query, snapshot: &CorpusSnapshot) -> Result<Prepared, PipelineError> {
        kind.validate()?;
        let required = query.validate()?;
        let prepared = match kind {
            PipelineKind::ZeroShot => Prepared {
                model: Arc::clone(&self.pretrain),
                augmentation: Augmentation::None,
                output_label: required.clone(),
                sources: Sources::Chunks(Vec::new()),
            },
            PipelineKind::GlobalFineTune { declassify } => {
                let model = self.global_model(kind, snapshot)?;
                let output_label = match (model.label(), declassify) {
                    (_, true) => required.clone(),
                    (Ok(label), false) => meet_labels([&required, label])
                        .map_err(|e| PipelineError::DeliveryRefused(e.to_string()))?,
                    (Err(e), false) => return Err(PipelineError::DeliveryRefused(e.to_string())),
                };
                Prepared { model, augmentation: Augmentation::None, output_label, sources: Sources::EntireDataset }
            }
            PipelineKind::GlobalDp { .. } => Prepared {
                model: self.global_model(kind, snapshot)?,
                augmentation: Augmentation::None,
                output_label: required.clone(),
                sources: Sources::EntireDataset,
            },
            PipelineKind::Personalized => {
                let model = self.personalized_model(&query.principal, snapshot)?;
                let output_label = meet_labels([&required, model.label()?])
                    .map_err(|e| PipelineError::DeliveryRefused(e.to_string()))?;
                Prepared {
                    model,
                    augmentation: Augmentation::None,
                    output_label,
                    sources: Sources::NodeProjection(query.principal.clone()),
                }
            }
            PipelineKind::RetrievalAugmented { method, k, lambda } => {
                let result = self.retrieve(query, snapshot, *k);
                let output_label = meet_labels([&required, &result.output_label])
                    .map_err(|e| PipelineError::DeliveryRefused(e.to_string()))?;
                // Canonical order, so the output depends only on which chunks
                // were retrieved and not on their scores.
                let mut entries: Vec<_> = result.entries.iter().map(|e| &e.chunk).collect();
                entries.sort_by(|a, b| (&a.doc_id, a.index).cmp(&(&b.doc_id, b.index)));
                let sources = entries
                    .iter()
                    .map(|c| SourceRef { doc_id: c.doc_id.clone(), chunk_index: c.index })
                    .collect();
                let augmentation = match method {
                    RaMethod::Prompt => Augmentation::Prompt(entries.iter().flat_map(|c| tokenize(&c.text)).collect()),
                    RaMethod::Knn => Augmentation::Knn {
                        retrieved: entries.iter().map(|c| tokenize(&c.text)).collect(),
                        lambda: *lambda,
                    },
                };
                Prepared { model: Arc::clone(&self.pretrain), augmentation, output_label, sources: Sources::Chunks(sources) }
            }
        };
        if !can_flow(&prepared.output_label, &required) {
            return Err(PipelineError::DeliveryRefused(format!(
                "output label {} may not flow to {required}",
                prepared.output_label
            )));
        }
        Ok(prepared)
    }

    fn personalized_model(&self, principal: &Principal, snapshot: &CorpusSnapshot) -> Result<Arc<NGramModel>, PipelineError> {
        let projection = snapshot.projection(principal);
        let key = (principal.clone(), projection.content_digest());
        if let Some(model) = self.personalized.lock().expect("cache lock").get(&key) {
            return Ok(Arc::clone(model));
        }
        // Training happens outside the lock; a concurrent duplicate produces
        // an identical model.
        let model = Arc::new(self.pretrain.fine_tune(&training_chunks(&projection).borrowed())?);
        let mut cache = self.personalized.lock().expect("cache lock");
        let entry = cache.entry(key).or_insert_with(|| {
            self.personalized_trained.fetch_add(1, Ordering::SeqCst);
            Arc::clone(&model)
        });
        Ok(Arc::clone(entry))
    }

    fn global_model(&self, kind: &PipelineKind, snapshot: &CorpusSnapshot) -> Result<Arc<NGramModel>, PipelineError> {
        let cache_kind = match kind {
            // The trained model does not depend on the delivery flag.
            PipelineKind::GlobalFineTune { .. } => "fine_tune".to_owned(),
            other => serde_json::to_string(other).expect("kind serializes"),
        };
        let key = (cache_kind, snapshot.content_digest());
        if let Some(model) = self.global.lock().expect("cache lock").get(&key) {
            return Ok(Arc::clone(model));
        }
        let chunks = training_chunks(snapshot);
        let model = match kind {
            PipelineKind::GlobalDp { epsilon, delta, cap, noise_seed } => {
                let budget = PrivacyBudget::new(*epsilon, *delta)?;
                let dp = dp_train(&chunks.borrowed(), *self.pretrain.config(), budget, *cap, *noise_seed)?;
                self.pretrain.stacked_with(&dp)
            }
            _ => self.pretrain.fine_tune(&chunks.borrowed())?,
        };
        let model = Arc::new(model);
        let mut cache = self.global.lock().expect("cache lock");
        let entry = cache.entry(key).or_insert_with(|| {
            self.global_trained.fetch_add(1, Ordering::SeqCst);
            Arc::clone(&model)
        });
        Ok(Arc::clone(entry))
    }
}

/// Chunks of a snapshot in (doc id, chunk index) order with their
/// contributors and labels.
pub struct OwnedChunks {
    items: Vec<(String, String, SecurityLabel)>,
}

impl OwnedChunks {
    pub fn borrowed(&self) -> Vec<TrainingChunk<'_>> {
        self.items
            .iter()
            .map(|(text, user, label)| TrainingChunk { text, user, label })
            .collect()
    }
}

pub fn training_chunks(snapshot: &CorpusSnapshot) -> OwnedChunks {
    let mut items = Vec::new();
    for doc in snapshot.documents() {
        let contributor = doc.contributor();
        let stored = snapshot.stored(&doc.id).expect("document is stored");
        for chunk in stored.chunks.iter() {
            items.push((chunk.text.clone(), contributor.clone(), doc.label.clone()));
        }
    }
    OwnedChunks { items }
}

/// Samples from `p^(1/T)`, renormalized, walking tokens in sorted order.
fn sample(entries: &[(String, f64)], temperature: f64, rng: &mut ChaCha20Rng) -> Option<String> {
    let max = entries.iter().map(|(_, p)| p.ln()).fold(f64::NEG_INFINITY, f64::max);
    let weights: Vec<f64> = entries.iter().map(|(_, p)| ((p.ln() - max) / temperature).exp()).collect();
    let total: f64 = weights.iter().sum();
    if !(total > 0.0) {
        return None;
    }
    let mut target = rng.gen::<f64>() * total;
    for ((token, _), w) in entries.iter().zip(&weights) {
        if target < *w {
            return Some(token.clone());
        }
        target -= w;
    }
    entries.last().map(|(t, _)| t.clone())
}
