//! Perplexity experiments over access variants, prompt fractions and K.
//!
//! For each test document the abstract is split into a prompt and a
//! continuation. The prompt is the retrieval query; the continuation is
//! scored. Each access variant decides which corpus and principal the
//! pipeline runs with.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::corpus::{CorpusSnapshot, Document};
use crate::error::EvalError;
use crate::lm::{tokenize, LmConfig};
use crate::pipelines::{Engine, PipelineKind, Query, RaMethod};
use crate::policy::{authorizes, Principal, UserId};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AccessVariant {
    /// Everything the document's authors can jointly read.
    AuthorsArticles,
    /// As above, minus the document itself.
    AuthorsOtherArticles,
    /// The document's own body only.
    CurrentArticle,
    /// Everything one seeded random non-reader of the document can read.
    RandomAuthor,
}

impl AccessVariant {
    pub const ALL: [AccessVariant; 4] = [
        AccessVariant::AuthorsArticles,
        AccessVariant::AuthorsOtherArticles,
        AccessVariant::CurrentArticle,
        AccessVariant::RandomAuthor,
    ];

    pub fn name(self) -> &'static str {
        match self {
            AccessVariant::AuthorsArticles => "authors",
            AccessVariant::AuthorsOtherArticles => "authors_other",
            AccessVariant::CurrentArticle => "current",
            AccessVariant::RandomAuthor => "random",
        }
    }
}

/// Variant name used for rows that do not depend on a corpus.
pub const NO_VARIANT: &str = "none";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum EvalPipeline {
    ZeroShot,
    Personalized,
    RetrievalAugmented { method: RaMethod, lambda: f64 },
}

impl EvalPipeline {
    pub fn name(&self) -> String {
        match self {
            EvalPipeline::ZeroShot => "zero_shot".into(),
            EvalPipeline::Personalized => "personalized".into(),
            EvalPipeline::RetrievalAugmented { method: RaMethod::Knn, lambda } => format!("ra_knn({lambda})"),
            EvalPipeline::RetrievalAugmented { method: RaMethod::Prompt, .. } => "ra_prompt".into(),
        }
    }

    fn kind(&self, k: usize) -> PipelineKind {
        match self {
            EvalPipeline::ZeroShot => PipelineKind::ZeroShot,
            EvalPipeline::Personalized => PipelineKind::Personalized,
            EvalPipeline::RetrievalAugmented { method, lambda } => {
                PipelineKind::RetrievalAugmented { method: *method, k, lambda: *lambda }
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    pub fractions: Vec<f64>,
    pub k_values: Vec<usize>,
    pub pipelines: Vec<EvalPipeline>,
    pub variants: Vec<AccessVariant>,
    pub seed: u64,
    pub percentile_groups: usize,
    /// Evaluate only the first `max_docs` test documents.
    pub max_docs: Option<usize>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            fractions: vec![0.10, 0.25, 0.50],
            k_values: vec![8, 16, 24],
            pipelines: vec![
                EvalPipeline::ZeroShot,
                EvalPipeline::RetrievalAugmented { method: RaMethod::Knn, lambda: 0.5 },
            ],
            variants: AccessVariant::ALL.to_vec(),
            seed: 7,
            percentile_groups: 10,
            max_docs: None,
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<(), EvalError> {
        for &f in &self.fractions {
            if !(f > 0.0 && f < 1.0) {
                return Err(EvalError::InvalidFraction(f));
            }
        }
        if self.k_values.contains(&0) {
            return Err(EvalError::InvalidK);
        }
        Ok(())
    }
}

/// Splits abstract tokens into a prompt of `max(1, floor(fraction·T))`
/// tokens and a non-empty continuation.
pub fn split_prompt(tokens: &[String], fraction: f64) -> Result<(Vec<String>, Vec<String>), EvalError> {
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(EvalError::InvalidFraction(fraction));
    }
    let total = tokens.len();
    if total < 2 {
        return Err(EvalError::TooShort(total));
    }
    let prompt = ((fraction * total as f64).floor() as usize).max(1).min(total - 1);
    Ok((tokens[..prompt].to_vec(), tokens[prompt..].to_vec()))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalRow {
    pub doc_id: String,
    pub variant: String,
    pub fraction: f64,
    pub k: usize,
    pub pipeline: String,
    pub perplexity: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AggregateRow {
    pub variant: String,
    pub fraction: f64,
    pub k: usize,
    pub pipeline: String,
    pub docs: usize,
    pub mean_perplexity: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PercentileRow {
    pub fraction: f64,
    /// 1-based, in ascending order of zero-shot perplexity.
    pub group: usize,
    pub docs: usize,
    pub variant: String,
    pub k: usize,
    pub pipeline: String,
    pub mean_perplexity: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalManifest {
    pub config: EvalConfig,
    pub seed: u64,
    pub corpus_digest: String,
    pub pretrain_digest: String,
    pub lm: LmConfig,
    pub oov_penalty: f64,
    pub test_docs: usize,
    pub rows: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub rows: Vec<EvalRow>,
    pub aggregates: Vec<AggregateRow>,
    pub percentiles: Vec<PercentileRow>,
    pub manifest: EvalManifest,
}

/// Documents with a usable abstract whose authors can read at least one
/// other private document.
pub fn test_documents(snapshot: &CorpusSnapshot) -> Vec<&Document> {
    snapshot
        .documents()
        .filter(|d| d.abstract_text.as_deref().is_some_and(|a| tokenize(a).len() >= 2))
        .filter(|d| {
            let Ok(p) = Principal::from_set(d.authors.iter().cloned().collect()) else { return false };
            snapshot.documents().any(|o| o.id != d.id && !o.label.is_public() && authorizes(&o.label, &p))
        })
        .collect()
}

fn variant_rank(name: &str) -> usize {
    std::iter::once(NO_VARIANT)
        .chain(AccessVariant::ALL.iter().map(|v| v.name()))
        .position(|n| n == name)
        .unwrap_or(usize::MAX)
}

fn row_order(a: &EvalRow, b: &EvalRow) -> std::cmp::Ordering {
    (&a.doc_id, variant_rank(&a.variant))
        .cmp(&(&b.doc_id, variant_rank(&b.variant)))
        .then(a.fraction.total_cmp(&b.fraction))
        .then(a.k.cmp(&b.k))
        .then(a.pipeline.cmp(&b.pipeline))
}

/// Runs every (document, variant, fraction, K, pipeline) combination.
pub fn run_experiment(config: &EvalConfig, snapshot: &CorpusSnapshot, engine: &Engine) -> Result<EvalReport, EvalError> {
    config.validate()?;
    let mut docs = test_documents(snapshot);
    if let Some(max) = config.max_docs {
        docs.truncate(max);
    }
    let all_users: Vec<UserId> = snapshot.users().into_iter().collect();
    let mut rng = ChaCha20Rng::seed_from_u64(config.seed);
    // Drawn sequentially so the choice does not depend on scheduling.
    let random_readers: Vec<Option<UserId>> = docs
        .iter()
        .map(|d| {
            let candidates: Vec<&UserId> = all_users
                .iter()
                .filter(|u| !d.authors.contains(u) && !d.label.can_read(u))
                .collect();
            candidates.choose(&mut rng).map(|u| (*u).clone())
        })
        .collect();

    let per_doc: Vec<Result<Vec<EvalRow>, EvalError>> = docs
        .par_iter()
        .zip(random_readers.par_iter())
        .map(|(doc, random)| rows_for_document(config, snapshot, engine, doc, random.as_ref()))
        .collect();
    let mut rows = Vec::new();
    for r in per_doc {
        rows.extend(r?);
    }
    rows.sort_by(row_order);

    let aggregates = aggregate(&rows);
    let percentiles = percentile_report(&rows, config.percentile_groups)?;
    let pretrain_digest = format!("{:x}", Sha256::digest(engine.pretrain().to_json().as_bytes()));
    let manifest = EvalManifest {
        config: config.clone(),
        seed: config.seed,
        corpus_digest: snapshot.content_digest(),
        pretrain_digest,
        lm: *engine.config(),
        oov_penalty: engine.config().oov_penalty,
        test_docs: docs.len(),
        rows: rows.len(),
    };
    Ok(EvalReport { rows, aggregates, percentiles, manifest })
}

fn rows_for_document(
    config: &EvalConfig,
    snapshot: &CorpusSnapshot,
    engine: &Engine,
    doc: &Document,
    random: Option<&UserId>,
) -> Result<Vec<EvalRow>, EvalError> {
    let tokens = tokenize(doc.abstract_text.as_deref().unwrap_or_default());
    let authors = Principal::from_set(doc.authors.iter().cloned().collect()).map_err(crate::PipelineError::from)?;
    let mut variants: Vec<(AccessVariant, CorpusSnapshot, Principal)> = Vec::new();
    for &v in &config.variants {
        let (corpus, principal) = match v {
            AccessVariant::AuthorsArticles => (snapshot.clone(), authors.clone()),
            AccessVariant::AuthorsOtherArticles => (snapshot.without_document(&doc.id), authors.clone()),
            AccessVariant::CurrentArticle => {
                (snapshot.restrict_documents(&BTreeSet::from([doc.id.clone()])), authors.clone())
            }
            AccessVariant::RandomAuthor => match random {
                Some(user) => (snapshot.clone(), Principal::single(user.clone())),
                None => continue,
            },
        };
        variants.push((v, corpus, principal));
    }

    let mut rows = Vec::new();
    for &fraction in &config.fractions {
        let (prompt, continuation) = split_prompt(&tokens, fraction)?;
        let query_for = |principal: &Principal| {
            Query::new(prompt.join(" "), principal.clone(), config.seed).with_continuation(continuation.join(" "))
        };
        let mut push = |variant: &str, k: usize, pipeline: &EvalPipeline, kind: PipelineKind, corpus, principal| {
            let out = engine.answer(&kind, &query_for(principal), corpus)?;
            rows.push(EvalRow {
                doc_id: doc.id.clone(),
                variant: variant.to_owned(),
                fraction,
                k,
                pipeline: pipeline.name(),
                perplexity: out.perplexity().expect("scored output"),
            });
            Ok::<(), EvalError>(())
        };
        for pipeline in &config.pipelines {
            match pipeline {
                EvalPipeline::ZeroShot => push(NO_VARIANT, 0, pipeline, pipeline.kind(0), snapshot, &authors)?,
                EvalPipeline::Personalized => {
                    for (v, corpus, principal) in &variants {
                        push(v.name(), 0, pipeline, pipeline.kind(0), corpus, principal)?;
                    }
                }
                EvalPipeline::RetrievalAugmented { .. } => {
                    for (v, corpus, principal) in &variants {
                        for &k in &config.k_values {
                            push(v.name(), k, pipeline, pipeline.kind(k), corpus, principal)?;
                        }
                    }
                }
            }
        }
    }
    Ok(rows)
}

type GroupKey = (String, u64, usize, String);

fn key_of(r: &EvalRow) -> GroupKey {
    (r.variant.clone(), r.fraction.to_bits(), r.k, r.pipeline.clone())
}

/// Mean perplexity per (variant, fraction, K, pipeline), summed in row order.
pub fn aggregate(rows: &[EvalRow]) -> Vec<AggregateRow> {
    let mut groups: BTreeMap<GroupKey, (usize, f64, f64)> = BTreeMap::new();
    for r in rows {
        let e = groups.entry(key_of(r)).or_insert((0, 0.0, r.fraction));
        e.0 += 1;
        e.1 += r.perplexity;
    }
    let mut out: Vec<AggregateRow> = groups
        .into_iter()
        .map(|((variant, _, k, pipeline), (n, sum, fraction))| AggregateRow {
            variant,
            fraction,
            k,
            pipeline,
            docs: n,
            mean_perplexity: sum / n as f64,
        })
        .collect();
    out.sort_by(|a, b| {
        variant_rank(&a.variant)
            .cmp(&variant_rank(&b.variant))
            .then(a.fraction.total_cmp(&b.fraction))
            .then(a.k.cmp(&b.k))
            .then(a.pipeline.cmp(&b.pipeline))
    });
    out
}

fn is_baseline(r: &EvalRow) -> bool {
    r.variant == NO_VARIANT && r.pipeline == EvalPipeline::ZeroShot.name()
}

/// Per prompt fraction: sorts documents by zero-shot perplexity, splits
/// them into `groups` equal groups (the remainder goes to the last one)
/// and averages every other configuration within each group.
pub fn percentile_report(rows: &[EvalRow], groups: usize) -> Result<Vec<PercentileRow>, EvalError> {
    let mut fractions: Vec<f64> = rows.iter().map(|r| r.fraction).collect();
    fractions.sort_by(f64::total_cmp);
    fractions.dedup();
    let mut out = Vec::new();
    for fraction in fractions {
        let at: Vec<&EvalRow> = rows.iter().filter(|r| r.fraction == fraction).collect();
        let baseline: BTreeMap<&str, f64> =
            at.iter().filter(|r| is_baseline(r)).map(|r| (r.doc_id.as_str(), r.perplexity)).collect();
        let docs: BTreeSet<&str> = at.iter().map(|r| r.doc_id.as_str()).collect();
        if let Some(missing) = docs.iter().find(|d| !baseline.contains_key(*d)) {
            return Err(EvalError::MissingBaselineRows((*missing).to_owned()));
        }
        if groups == 0 || docs.len() < groups {
            return Err(EvalError::InsufficientRows { docs: docs.len(), groups });
        }
        let mut ranked: Vec<(&str, f64)> = baseline.into_iter().collect();
        ranked.sort_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(b.0)));
        let size = ranked.len() / groups;
        let group_of: BTreeMap<&str, usize> = ranked
            .iter()
            .enumerate()
            .map(|(i, (doc, _))| (*doc, (i / size).min(groups - 1)))
            .collect();
        let mut sums: BTreeMap<(usize, GroupKey), (usize, f64)> = BTreeMap::new();
        for r in &at {
            let e = sums.entry((group_of[r.doc_id.as_str()], key_of(r))).or_insert((0, 0.0));
            e.0 += 1;
            e.1 += r.perplexity;
        }
        let mut rows_here: Vec<PercentileRow> = sums
            .into_iter()
            .map(|((group, (variant, _, k, pipeline)), (n, sum))| PercentileRow {
                fraction,
                group: group + 1,
                docs: n,
                variant,
                k,
                pipeline,
                mean_perplexity: sum / n as f64,
            })
            .collect();
        rows_here.sort_by(|a, b| {
            a.group
                .cmp(&b.group)
                .then(variant_rank(&a.variant).cmp(&variant_rank(&b.variant)))
                .then(a.k.cmp(&b.k))
                .then(a.pipeline.cmp(&b.pipeline))
        });
        out.extend(rows_here);
    }
    Ok(out)
}

impl EvalReport {
    pub fn rows_csv(&self) -> String {
        let mut s = String::from("doc_id,variant,fraction,k,pipeline,perplexity\n");
        for r in &self.rows {
            let _ = writeln!(s, "{},{},{},{},{},{:.4}", r.doc_id, r.variant, r.fraction, r.k, r.pipeline, r.perplexity);
        }
        s
    }

    pub fn aggregates_csv(&self) -> String {
        let mut s = String::from("variant,fraction,k,pipeline,docs,mean_perplexity\n");
        for r in &self.aggregates {
            let _ = writeln!(s, "{},{},{},{},{},{:.4}", r.variant, r.fraction, r.k, r.pipeline, r.docs, r.mean_perplexity);
        }
        s
    }

    pub fn percentiles_csv(&self) -> String {
        let mut s = String::from("fraction,group,docs,variant,k,pipeline,mean_perplexity\n");
        for r in &self.percentiles {
            let _ = writeln!(
                s,
                "{},{},{},{},{},{},{:.4}",
                r.fraction, r.group, r.docs, r.variant, r.k, r.pipeline, r.mean_perplexity
            );
        }
        s
    }

    pub fn manifest_json(&self) -> String {
        serde_json::to_string_pretty(&self.manifest).expect("manifest serializes") + "\n"
    }

    /// Mean perplexity of one configuration, if present.
    pub fn mean(&self, variant: &str, fraction: f64, k: usize, pipeline: &str) -> Option<f64> {
        self.aggregates
            .iter()
            .find(|a| a.variant == variant && a.fraction == fraction && a.k == k && a.pipeline == pipeline)
            .map(|a| a.mean_perplexity)
    }

    /// Writes `rows.csv`, `aggregates.csv`, `percentiles.csv` and
    /// `manifest.json` into `dir`.
    pub fn write_to(&self, dir: &Path) -> Result<(), EvalError> {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join("rows.csv"), self.rows_csv())?;
        std::fs::write(dir.join("aggregates.csv"), self.aggregates_csv())?;
        std::fs::write(dir.join("percentiles.csv"), self.percentiles_csv())?;
        std::fs::write(dir.join("manifest.json"), self.manifest_json())?;
        Ok(())
    }
}

#[cfg(test)]
mod tests;
