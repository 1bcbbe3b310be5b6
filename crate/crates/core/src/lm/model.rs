use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::augment::{Augmentation, RetrievalLm};
use super::dp::DpMeta;
use super::tokenize::UNK;
use crate::error::{LmError, PolicyError};
use crate::policy::{meet_labels, SecurityLabel};

pub const DEFAULT_ORDER: usize = 3;
pub const DEFAULT_MU: f64 = 0.7;
pub const DEFAULT_OOV_PENALTY: f64 = 1e4;

/// Smallest probability a scored token can receive. Only reachable when a
/// kNN weight of 1 leaves a target with no mass at all.
pub const PROB_FLOOR: f64 = 1e-300;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LmConfig {
    pub order: usize,
    /// Jelinek-Mercer weight on the maximum-likelihood estimate at each order.
    pub mu: f64,
    /// Divisor applied to p(UNK) for target tokens outside the support.
    pub oov_penalty: f64,
}

impl Default for LmConfig {
    fn default() -> Self {
        LmConfig { order: DEFAULT_ORDER, mu: DEFAULT_MU, oov_penalty: DEFAULT_OOV_PENALTY }
    }
}

impl LmConfig {
    pub fn validate(&self) -> Result<(), LmError> {
        if !(1..=5).contains(&self.order) {
            return Err(LmError::InvalidOrder(self.order));
        }
        if !(0.0..1.0).contains(&self.mu) {
            return Err(LmError::InvalidInterpolation(self.mu));
        }
        if !(self.oov_penalty >= 1.0 && self.oov_penalty.is_finite()) {
            return Err(LmError::Format(format!("oov penalty must be >= 1, got {}", self.oov_penalty)));
        }
        Ok(())
    }
}

/// A piece of training text with the user it is attributed to and its label.
#[derive(Clone, Debug)]
pub struct TrainingChunk<'a> {
    pub text: &'a str,
    pub user: &'a str,
    pub label: &'a SecurityLabel,
}

/// Raw k-gram counts, keyed by space-joined tokens, one table per order.
pub(crate) type CountTables = Vec<HashMap<String, f64>>;

/// One set of counts. Models stack layers (pretraining, fine-tuning) and
/// sum their counts at lookup time.
#[derive(Debug, Clone, PartialEq)]
pub(crate) struct CountLayer {
    pub(crate) ngrams: CountTables,
    contexts: Vec<HashMap<String, f64>>,
    unigram_total: f64,
    vocab: HashSet<String>,
}

impl CountLayer {
    pub(crate) fn from_tables(mut ngrams: CountTables) -> Self {
        for table in &mut ngrams {
            table.retain(|_, c| *c > 0.0);
        }
        let order = ngrams.len();
        let mut contexts = vec![HashMap::new(); order];
        let mut unigram_total = 0.0;
        let mut vocab = HashSet::new();
        for (level, table) in ngrams.iter().enumerate() {
            // Sorted so floating-point sums are reproducible.
            let mut keys: Vec<&String> = table.keys().collect();
            keys.sort();
            for key in keys {
                let count = table[key];
                for tok in key.split(' ') {
                    if !vocab.contains(tok) {
                        vocab.insert(tok.to_owned());
                    }
                }
                if level == 0 {
                    unigram_total += count;
                } else {
                    let ctx = key.rsplit_once(' ').map(|(c, _)| c).unwrap_or("");
                    *contexts[level].entry(ctx.to_owned()).or_insert(0.0) += count;
                }
            }
        }
        CountLayer { ngrams, contexts, unigram_total, vocab }
    }

    fn sorted_entries(&self) -> Vec<Vec<(String, f64)>> {
        self.ngrams
            .iter()
            .map(|t| {
                let mut v: Vec<(String, f64)> = t.iter().map(|(k, c)| (k.clone(), *c)).collect();
                v.sort_by(|a, b| a.0.cmp(&b.0));
                v
            })
            .collect()
    }
}

/// Counts every k-gram (k ≤ order) of each chunk; n-grams never span chunks.
pub(crate) fn count_events<F>(token_lists: &[(Vec<String>, &str)], order: usize, mut admit: F) -> CountTables
where
    F: FnMut(&str) -> bool,
{
    let mut tables: CountTables = vec![HashMap::new(); order];
    for (tokens, user) in token_lists {
        for end in 0..tokens.len() {
            for k in 1..=order.min(end + 1) {
                if !admit(user) {
                    continue;
                }
                let key = tokens[end + 1 - k..=end].join(" ");
                *tables[k - 1].entry(key).or_insert(0.0) += 1.0;
            }
        }
    }
    tables
}

/// Interpolated n-gram language model.
#[derive(Debug, Clone)]
pub struct NGramModel {
    config: LmConfig,
    layers: Vec<Arc<CountLayer>>,
    vocab_size: usize,
    label: Option<SecurityLabel>,
    dp: Option<DpMeta>,
    ledger: BTreeMap<String, u64>,
}

impl PartialEq for NGramModel {
    fn eq(&self, other: &Self) -> bool {
        self.config == other.config
            && self.label == other.label
            && self.dp == other.dp
            && self.ledger == other.ledger
            && self.layers.len() == other.layers.len()
            && self.layers.iter().zip(&other.layers).all(|(a, b)| a.ngrams == b.ngrams)
    }
}

impl NGramModel {
    /// Trains on `chunks`. The model label is the meet of the chunk labels;
    /// chunks whose readers share nobody produce an unreadable model.
    pub fn train(chunks: &[TrainingChunk<'_>], config: LmConfig) -> Result<Self, LmError> {
        config.validate()?;
        let tokenized = tokenize_chunks(chunks);
        let tables = count_events(&tokenized, config.order, |_| true);
        let ledger = ledger_of(&tokenized, config.order);
        let label = meet_labels(chunks.iter().map(|c| c.label)).ok();
        Ok(NGramModel::from_layers(config, vec![Arc::new(CountLayer::from_tables(tables))], label, None, ledger))
    }

    pub(crate) fn from_layers(
        config: LmConfig,
        layers: Vec<Arc<CountLayer>>,
        label: Option<SecurityLabel>,
        dp: Option<DpMeta>,
        ledger: BTreeMap<String, u64>,
    ) -> Self {
        let vocab_size = match layers.as_slice() {
            [] => 0,
            [only] => only.vocab.len(),
            [first, rest @ ..] => {
                let mut extra: HashSet<&str> = HashSet::new();
                for layer in rest {
                    for tok in &layer.vocab {
                        if !first.vocab.contains(tok) {
                            extra.insert(tok);
                        }
                    }
                }
                first.vocab.len() + extra.len()
            }
        };
        NGramModel { config, layers, vocab_size, label, dp, ledger }
    }

    /// This model with `other`'s counts stacked on top. The result's label
    /// is the meet of both; privacy metadata comes from `other`.
    pub fn stacked_with(&self, other: &NGramModel) -> NGramModel {
        let label = match (&self.label, &other.label) {
            (Some(a), Some(b)) => meet_labels([a, b]).ok(),
            _ => None,
        };
        let mut layers = self.layers.clone();
        layers.extend(other.layers.iter().cloned());
        let mut ledger = self.ledger.clone();
        for (user, n) in &other.ledger {
            *ledger.entry(user.clone()).or_insert(0) += n;
        }
        NGramModel::from_layers(self.config, layers, label, other.dp.clone().or(self.dp.clone()), ledger)
    }

    /// Continues training on `chunks` with the same configuration.
    pub fn fine_tune(&self, chunks: &[TrainingChunk<'_>]) -> Result<NGramModel, LmError> {
        let top = NGramModel::train(chunks, self.config)?;
        Ok(self.stacked_with(&top))
    }

    pub fn config(&self) -> &LmConfig {
        &self.config
    }

    pub fn order(&self) -> usize {
        self.config.order
    }

    /// Label of the training data, or `EmptyIntersection` when no user may
    /// read all of it.
    pub fn label(&self) -> Result<&SecurityLabel, PolicyError> {
        self.label.as_ref().ok_or(PolicyError::EmptyIntersection)
    }

    pub fn dp_meta(&self) -> Option<&DpMeta> {
        self.dp.as_ref()
    }

    /// Number of n-gram events each user contributed.
    pub fn ledger(&self) -> &BTreeMap<String, u64> {
        &self.ledger
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    pub fn in_vocab(&self, token: &str) -> bool {
        self.layers.iter().any(|l| l.vocab.contains(token))
    }

    /// Sorted vocabulary (without UNK).
    pub fn vocab(&self) -> Vec<String> {
        let mut all: BTreeSet<&str> = BTreeSet::new();
        for layer in &self.layers {
            all.extend(layer.vocab.iter().map(String::as_str));
        }
        all.into_iter().map(str::to_owned).collect()
    }

    /// Summed count of the k-gram `key` (space-joined tokens).
    pub fn count(&self, key: &str) -> f64 {
        let k = key.split(' ').count();
        if k == 0 || k > self.config.order {
            return 0.0;
        }
        self.layers.iter().map(|l| l.ngrams[k - 1].get(key).copied().unwrap_or(0.0)).sum()
    }

    fn context_total(&self, level: usize, ctx: &str) -> f64 {
        if level == 0 {
            self.layers.iter().map(|l| l.unigram_total).sum()
        } else {
            self.layers.iter().map(|l| l.contexts[level].get(ctx).copied().unwrap_or(0.0)).sum()
        }
    }

    /// Interpolated probability of `token` after `history`, without any
    /// augmentation. Tokens outside the vocabulary get 0 unless `token` is
    /// [`UNK`].
    pub fn base_prob(&self, history: &[String], token: &str) -> f64 {
        let is_unk = token == UNK;
        if !is_unk && !self.in_vocab(token) {
            return 0.0;
        }
        let mu = self.config.mu;
        let mut p = 1.0 / (self.vocab_size as f64 + 1.0);
        let start = history.len().saturating_sub(self.config.order - 1);
        let tail = &history[start..];
        for level in 0..self.config.order {
            if level > tail.len() {
                break;
            }
            let ctx = tail[tail.len() - level..].join(" ");
            let total = self.context_total(level, &ctx);
            if total <= 0.0 {
                continue;
            }
            let count = if is_unk {
                0.0
            } else if level == 0 {
                self.count(token)
            } else {
                self.count(&format!("{ctx} {token}"))
            };
            p = mu * (count / total) + (1.0 - mu) * p;
        }
        p
    }

    /// Full next-token distribution under `augmentation`.
    pub fn next_token_dist(&self, history: &[String], augmentation: &Augmentation) -> Result<Distribution, LmError> {
        augmentation.validate()?;
        let mut support: BTreeSet<String> = self.vocab().into_iter().collect();
        support.insert(UNK.to_owned());
        let scorer = Scorer::new(self, augmentation);
        if let Some(rlm) = &scorer.retrieval {
            support.extend(rlm.vocab().map(str::to_owned));
        }
        let history = scorer.effective_history(history);
        let knn = scorer.knn_component(&history);
        let entries = support
            .into_iter()
            .filter_map(|tok| {
                let p = scorer.prob_with(&history, knn.as_ref(), &tok);
                (p > 0.0).then_some((tok, p))
            })
            .collect();
        Ok(Distribution { entries })
    }

    /// Natural-log probabilities of each continuation token given the
    /// context and the preceding continuation tokens.
    pub fn score_continuation(
        &self,
        context: &[String],
        continuation: &[String],
        augmentation: &Augmentation,
    ) -> Result<Vec<f64>, LmError> {
        augmentation.validate()?;
        let scorer = Scorer::new(self, augmentation);
        let mut history: Vec<String> = context.to_vec();
        let mut out = Vec::with_capacity(continuation.len());
        for token in continuation {
            out.push(scorer.log_prob(&history, token));
            history.push(token.clone());
        }
        Ok(out)
    }

    /// exp of the mean negative log-probability of the continuation.
    pub fn perplexity(
        &self,
        context: &[String],
        continuation: &[String],
        augmentation: &Augmentation,
    ) -> Result<f64, LmError> {
        if continuation.is_empty() {
            return Err(LmError::EmptyContinuation);
        }
        let log_probs = self.score_continuation(context, continuation, augmentation)?;
        perplexity_from_log_probs(&log_probs)
    }

    pub fn to_file(&self) -> ModelFile {
        ModelFile {
            format: MODEL_FORMAT.to_owned(),
            version: MODEL_FORMAT_VERSION,
            config: self.config,
            label: self.label.clone(),
            dp: self.dp.clone(),
            ledger: self.ledger.clone(),
            layers: self.layers.iter().map(|l| l.sorted_entries()).collect(),
        }
    }

    pub fn from_file(file: ModelFile) -> Result<Self, LmError> {
        if file.format != MODEL_FORMAT || file.version != MODEL_FORMAT_VERSION {
            return Err(LmError::Format(format!("unsupported container {} v{}", file.format, file.version)));
        }
        file.config.validate()?;
        let mut layers = Vec::new();
        for layer in file.layers {
            if layer.len() != file.config.order {
                return Err(LmError::Format("layer order does not match config".into()));
            }
            let tables = layer.into_iter().map(|entries| entries.into_iter().collect()).collect();
            layers.push(Arc::new(CountLayer::from_tables(tables)));
        }
        Ok(NGramModel::from_layers(file.config, layers, file.label, file.dp, file.ledger))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(&self.to_file()).expect("model serializes")
    }

    pub fn from_json(text: &str) -> Result<Self, LmError> {
        let file: ModelFile = serde_json::from_str(text).map_err(|e| LmError::Format(e.to_string()))?;
        NGramModel::from_file(file)
    }
}

pub const MODEL_FORMAT: &str = "labelflow-ngram";
pub const MODEL_FORMAT_VERSION: u32 = 1;

/// Versioned JSON container for [`NGramModel`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelFile {
    pub format: String,
    pub version: u32,
    pub config: LmConfig,
    pub label: Option<SecurityLabel>,
    pub dp: Option<DpMeta>,
    pub ledger: BTreeMap<String, u64>,
    /// Per layer, per order, sorted `(k-gram, count)` entries.
    pub layers: Vec<Vec<Vec<(String, f64)>>>,
}

pub(crate) fn tokenize_chunks<'a>(chunks: &[TrainingChunk<'a>]) -> Vec<(Vec<String>, &'a str)> {
    chunks.iter().map(|c| (super::tokenize::tokenize(c.text), c.user)).collect()
}

fn ledger_of(tokenized: &[(Vec<String>, &str)], order: usize) -> BTreeMap<String, u64> {
    let mut ledger = BTreeMap::new();
    for (tokens, user) in tokenized {
        let events: u64 = (0..tokens.len()).map(|end| order.min(end + 1) as u64).sum();
        if events > 0 {
            *ledger.entry((*user).to_owned()).or_insert(0) += events;
        }
    }
    ledger
}

pub fn perplexity_from_log_probs(log_probs: &[f64]) -> Result<f64, LmError> {
    if log_probs.is_empty() {
        return Err(LmError::EmptyContinuation);
    }
    let mean = compensated_sum(log_probs) / log_probs.len() as f64;
    Ok((-mean).exp())
}

/// Neumaier summation; keeps long continuations from drifting.
fn compensated_sum(values: &[f64]) -> f64 {
    let mut sum = 0.0f64;
    let mut carry = 0.0;
    for &v in values {
        let t = sum + v;
        carry += if sum.abs() >= v.abs() { (sum - t) + v } else { (v - t) + sum };
        sum = t;
    }
    sum + carry
}

/// A normalized next-token distribution, sorted by token.
#[derive(Debug, Clone, PartialEq)]
pub struct Distribution {
    entries: Vec<(String, f64)>,
}

impl Distribution {
    pub fn entries(&self) -> &[(String, f64)] {
        &self.entries
    }

    pub fn prob(&self, token: &str) -> f64 {
        self.entries
            .binary_search_by(|(t, _)| t.as_str().cmp(token))
            .map(|i| self.entries[i].1)
            .unwrap_or(0.0)
    }

    pub fn total_mass(&self) -> f64 {
        self.entries.iter().map(|(_, p)| p).sum()
    }

    /// Most probable token; ties go to the lexicographically smallest.
    pub fn argmax(&self) -> Option<&str> {
        let mut best: Option<&(String, f64)> = None;
        for e in &self.entries {
            if best.is_none_or(|b| e.1 > b.1) {
                best = Some(e);
            }
        }
        best.map(|(t, _)| t.as_str())
    }
}

/// Per-query scoring state: the model plus any prepared augmentation.
pub(crate) struct Scorer<'m> {
    model: &'m NGramModel,
    prefix: Option<&'m [String]>,
    retrieval: Option<RetrievalLm>,
    lambda: f64,
}

impl<'m> Scorer<'m> {
    pub(crate) fn new(model: &'m NGramModel, augmentation: &'m Augmentation) -> Self {
        match augmentation {
            Augmentation::None => Scorer { model, prefix: None, retrieval: None, lambda: 0.0 },
            Augmentation::Prompt(tokens) => Scorer { model, prefix: Some(tokens), retrieval: None, lambda: 0.0 },
            Augmentation::Knn { retrieved, lambda } => {
                let rlm = RetrievalLm::new(retrieved);
                let retrieval = (!rlm.is_empty()).then_some(rlm);
                Scorer { model, prefix: None, retrieval, lambda: *lambda }
            }
        }
    }

    fn effective_history(&self, history: &[String]) -> Vec<String> {
        match self.prefix {
            Some(prefix) => prefix.iter().chain(history).cloned().collect(),
            None => history.to_vec(),
        }
    }

    fn knn_component(&self, history: &[String]) -> Option<BTreeMap<String, f64>> {
        self.retrieval.as_ref().map(|r| r.next_token_dist(history))
    }

    fn prob_with(&self, history: &[String], knn: Option<&BTreeMap<String, f64>>, token: &str) -> f64 {
        let base = self.model.base_prob(history, token);
        match knn {
            None => base,
            Some(p_r) => {
                let retrieved = p_r.get(token).copied().unwrap_or(0.0);
                self.lambda * retrieved + (1.0 - self.lambda) * base
            }
        }
    }

    pub(crate) fn log_prob(&self, history: &[String], token: &str) -> f64 {
        let history = self.effective_history(history);
        let knn = self.knn_component(&history);
        let mut p = self.prob_with(&history, knn.as_ref(), token);
        if p <= 0.0 {
            p = self.prob_with(&history, knn.as_ref(), UNK) / self.model.config.oov_penalty;
        }
        p.max(PROB_FLOOR).ln()
    }
}
