//! Non-interference and source-attribution checks.
//!
//! A pipeline is non-interfering for a principal when changing data the
//! principal cannot read never changes what it is told. Pipelines here are
//! deterministic given a seed, so the check reduces to byte equality of
//! canonical outputs over sampled mutations and seeds. Exhaustiveness over
//! randomness is out of reach; reports cover only the sampled seeds.

use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{CorpusSnapshot, Document};
use crate::error::{HarnessError, PipelineError};
use crate::lm::tokenize;
use crate::pipelines::{Engine, Mode, PipelineKind, PipelineOutput, Query, Sources};
use crate::policy::{authorizes, LabelAction, Principal, SecurityLabel, UserId};

pub const REPORT_NOTE: &str = "equality is byte-level on canonical JSON (sorted keys, shortest round-trip floats); \
     with seeded deterministic pipelines this certifies equal output distributions over the sampled seeds only";

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case")]
pub enum Mutation {
    AddDoc { id: String, author: UserId, body: String },
    RemoveDoc { id: String },
    EditBody { id: String, body: String },
    Relabel { id: String, action: LabelAction },
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MutationPlan {
    pub seed: u64,
    pub operations: Vec<Mutation>,
}

impl MutationPlan {
    /// Applies the plan, keeping the snapshot version.
    pub fn apply(&self, snapshot: &CorpusSnapshot) -> Result<CorpusSnapshot, HarnessError> {
        let mut out = snapshot.clone();
        for op in &self.operations {
            out = match op {
                Mutation::AddDoc { id, author, body } => out.with_document(Document {
                    id: id.clone(),
                    title: String::new(),
                    abstract_text: None,
                    body: body.clone(),
                    authors: vec![author.clone()],
                    label: SecurityLabel::from_set([author.clone()].into()).map_err(PipelineError::from)?,
                    created: None,
                }),
                Mutation::RemoveDoc { id } => out.without_document(id),
                Mutation::EditBody { id, body } => {
                    let mut doc = out.get_document(id).map_err(PipelineError::from)?.clone();
                    doc.body = body.clone();
                    out.with_document(doc)
                }
                Mutation::Relabel { id, action } => {
                    let current = &out.get_document(id).map_err(PipelineError::from)?.label;
                    let label = crate::policy::apply_label_action(current, action).map_err(PipelineError::from)?;
                    out.with_label(id, label).map_err(PipelineError::from)?
                }
            };
        }
        Ok(out)
    }
}

/// Brute-force comparison of what `principal` can see in two snapshots:
/// the same documents, with the same labels, bodies and chunks.
pub fn same_projection(a: &CorpusSnapshot, b: &CorpusSnapshot, principal: &Principal) -> bool {
    fn visible<'s>(
        s: &'s CorpusSnapshot,
        principal: &'s Principal,
    ) -> impl Iterator<Item = (&'s Document, Vec<&'s str>)> + 's {
        s.documents()
            .filter(move |d| match &d.label {
                SecurityLabel::Public => true,
                SecurityLabel::Users(readers) => principal.users().iter().all(|u| readers.contains(u)),
            })
            .map(move |d| {
                let chunks = s.stored(&d.id).map(|st| st.chunks.iter().map(|c| c.text.as_str()).collect());
                (d, chunks.unwrap_or_default())
            })
    }
    visible(a, principal).eq(visible(b, principal))
}

fn hidden_ids(snapshot: &CorpusSnapshot, principal: &Principal) -> Vec<String> {
    snapshot
        .documents()
        .filter(|d| !authorizes(&d.label, principal))
        .map(|d| d.id.clone())
        .collect()
}

/// Draws a random mutation touching only documents `principal` cannot read
/// and returns the mutated snapshot with its plan. The projection is
/// re-checked by brute force before returning.
pub fn mutate_outside_projection(
    snapshot: &CorpusSnapshot,
    principal: &Principal,
    seed: u64,
) -> Result<(CorpusSnapshot, MutationPlan), HarnessError> {
    let hidden = hidden_ids(snapshot, principal);
    if hidden.is_empty() {
        return Err(HarnessError::NothingToMutate);
    }
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    // Filler words come from a random existing document, tokenized lazily.
    let docs: Vec<&Document> = snapshot.documents().collect();
    let donor = |rng: &mut ChaCha20Rng| -> Vec<String> {
        let words = tokenize(&docs.choose(rng).expect("hidden documents exist").body);
        if words.is_empty() { vec!["filler".to_owned()] } else { words }
    };
    let users: Vec<UserId> = snapshot.users().into_iter().collect();

    let mut current = snapshot.clone();
    let mut operations = Vec::new();
    let steps = rng.gen_range(1..=4);
    for step in 0..steps {
        let live = hidden_ids(&current, principal);
        let choice = if live.is_empty() { 0 } else { rng.gen_range(0..5) };
        let op = match choice {
            0 => {
                let len = rng.gen_range(8..40);
                let words = donor(&mut rng);
                let body: Vec<&str> = (0..len).map(|_| words.choose(&mut rng).expect("non-empty").as_str()).collect();
                let author = UserId::new(format!("ghost-{seed}-{step}")).expect("non-empty id");
                Some(Mutation::AddDoc { id: format!("ghost-{seed}-{step}"), author, body: body.join(" ") + "." })
            }
            1 => Some(Mutation::RemoveDoc { id: live.choose(&mut rng).expect("non-empty").clone() }),
            2 => {
                let id = live.choose(&mut rng).expect("non-empty").clone();
                let mut toks = tokenize(&current.get_document(&id).map_err(PipelineError::from)?.body);
                toks.shuffle(&mut rng);
                toks.push(donor(&mut rng).choose(&mut rng).expect("non-empty").clone());
                Some(Mutation::EditBody { id, body: toks.join(" ") + "." })
            }
            3 => {
                let id = live.choose(&mut rng).expect("non-empty").clone();
                let label = current.get_document(&id).map_err(PipelineError::from)?.label.clone();
                users
                    .choose(&mut rng)
                    .filter(|u| {
                        let granted = crate::policy::apply_label_action(&label, &LabelAction::Grant((*u).clone()));
                        granted.is_ok_and(|l| !authorizes(&l, principal))
                    })
                    .map(|u| Mutation::Relabel { id, action: LabelAction::Grant(u.clone()) })
            }
            _ => {
                let id = live.choose(&mut rng).expect("non-empty").clone();
                match &current.get_document(&id).map_err(PipelineError::from)?.label {
                    SecurityLabel::Users(readers) if readers.len() > 1 => {
                        let readers: Vec<&UserId> = readers.iter().collect();
                        let user = (*readers.choose(&mut rng).expect("non-empty")).clone();
                        Some(Mutation::Relabel { id, action: LabelAction::Revoke(user) })
                    }
                    _ => None,
                }
            }
        };
        if let Some(op) = op {
            let plan = MutationPlan { seed, operations: vec![op.clone()] };
            current = plan.apply(&current)?;
            operations.push(op);
        }
    }
    if current == *snapshot {
        // The draws cancelled out; removing an original hidden document
        // always leaves a difference.
        let op = Mutation::RemoveDoc { id: hidden.choose(&mut rng).expect("non-empty").clone() };
        current = MutationPlan { seed, operations: vec![op.clone()] }.apply(&current)?;
        operations.push(op);
    }
    if !same_projection(snapshot, &current, principal) {
        return Err(HarnessError::ProjectionChanged(format!("seed {seed}")));
    }
    Ok((current, MutationPlan { seed, operations }))
}

/// The plan that reduces the corpus to exactly the principal's projection.
pub fn drop_all_plan(snapshot: &CorpusSnapshot, principal: &Principal) -> Result<(CorpusSnapshot, MutationPlan), HarnessError> {
    let hidden = hidden_ids(snapshot, principal);
    if hidden.is_empty() {
        return Err(HarnessError::NothingToMutate);
    }
    let plan = MutationPlan { seed: 0, operations: hidden.into_iter().map(|id| Mutation::RemoveDoc { id }).collect() };
    let mutated = plan.apply(snapshot)?;
    if !same_projection(snapshot, &mutated, principal) {
        return Err(HarnessError::ProjectionChanged("drop-all".into()));
    }
    Ok((mutated, plan))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Verdict {
    NonInterfering,
    Interfering,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Divergence {
    pub trial: usize,
    pub byte_offset: usize,
    pub mutation: MutationPlan,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NiReport {
    pub note: String,
    pub pipeline: PipelineKind,
    pub principal: Principal,
    pub seed: u64,
    pub trials: usize,
    pub equal_count: usize,
    pub first_divergence: Option<Divergence>,
    pub verdict: Verdict,
}

/// Canonical bytes of a pipeline outcome. Refusals are outcomes too: a
/// refusal that appears or disappears is a divergence.
pub fn outcome_bytes(result: Result<PipelineOutput, PipelineError>) -> Result<Vec<u8>, PipelineError> {
    match result {
        Ok(output) => Ok(output.canonical_bytes()),
        Err(PipelineError::DeliveryRefused(reason)) => Ok(format!("refused: {reason}").into_bytes()),
        Err(e) => Err(e),
    }
}

/// One completed trial, as seen by an observer.
pub struct Trial<'a> {
    pub index: usize,
    pub query: &'a Query,
    pub plan: &'a MutationPlan,
    pub mutated: &'a CorpusSnapshot,
    /// The engine that produced `on_mutated`.
    pub mutated_engine: &'a Engine,
    /// Delivered outputs; `None` for a refusal.
    pub on_original: Option<&'a PipelineOutput>,
    pub on_mutated: Option<&'a PipelineOutput>,
}

/// Runs `trials` seeded trials: each draws a mutation outside the
/// principal's projection and a query seed, then compares the outputs on
/// the original and mutated corpora byte for byte. The mutated side runs on
/// a separate engine, so cached models are never shared between the two.
pub fn assert_non_interference(
    engine: &Engine,
    kind: &PipelineKind,
    template: &Query,
    snapshot: &CorpusSnapshot,
    trials: usize,
    seed: u64,
) -> Result<NiReport, HarnessError> {
    run_trials(engine, kind, template, snapshot, trials, seed, |_| Ok(()))
}

/// [`assert_non_interference`] with a callback after every trial.
pub fn run_trials<F>(
    engine: &Engine,
    kind: &PipelineKind,
    template: &Query,
    snapshot: &CorpusSnapshot,
    trials: usize,
    seed: u64,
    mut observe: F,
) -> Result<NiReport, HarnessError>
where
    F: FnMut(&Trial<'_>) -> Result<(), HarnessError>,
{
    if trials == 0 {
        return Err(HarnessError::NoTrials);
    }
    let mutated_engine = engine.fresh();
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let mut equal_count = 0;
    let mut first_divergence = None;
    for trial in 0..trials {
        let mutation_seed = rng.next_u64();
        let query = Query { seed: rng.next_u64(), ..template.clone() };
        let (mutated, plan) = mutate_outside_projection(snapshot, &template.principal, mutation_seed)?;
        let a = engine.answer(kind, &query, snapshot);
        let b = mutated_engine.answer(kind, &query, &mutated);
        observe(&Trial {
            index: trial,
            query: &query,
            plan: &plan,
            mutated: &mutated,
            mutated_engine: &mutated_engine,
            on_original: a.as_ref().ok(),
            on_mutated: b.as_ref().ok(),
        })?;
        let (a, b) = (outcome_bytes(a)?, outcome_bytes(b)?);
        if a == b {
            equal_count += 1;
        } else if first_divergence.is_none() {
            let byte_offset = a.iter().zip(&b).position(|(x, y)| x != y).unwrap_or(a.len().min(b.len()));
            first_divergence = Some(Divergence { trial, byte_offset, mutation: plan });
        }
    }
    Ok(NiReport {
        note: REPORT_NOTE.into(),
        pipeline: kind.clone(),
        principal: template.principal.clone(),
        seed,
        trials,
        equal_count,
        verdict: if equal_count == trials { Verdict::NonInterfering } else { Verdict::Interfering },
        first_divergence,
    })
}

/// The corpus an output's sources denote.
pub fn resolve_sources(
    query: &Query,
    snapshot: &CorpusSnapshot,
    output: &PipelineOutput,
) -> Result<CorpusSnapshot, HarnessError> {
    if output.snapshot_version != snapshot.version() {
        return Err(HarnessError::SourceResolution(format!(
            "output is from version {}, snapshot is {}",
            output.snapshot_version,
            snapshot.version()
        )));
    }
    match &output.sources {
        Sources::EntireDataset => Ok(snapshot.clone()),
        Sources::NodeProjection(p) if p == &query.principal => Ok(snapshot.projection(p)),
        Sources::NodeProjection(p) => {
            Err(HarnessError::SourceResolution(format!("node {p} is not the query principal {}", query.principal)))
        }
        Sources::Chunks(refs) => {
            let mut keep = BTreeSet::new();
            for r in refs {
                let exists = snapshot
                    .stored(&r.doc_id)
                    .is_some_and(|s| s.chunks.iter().any(|c| c.index == r.chunk_index));
                if !exists {
                    return Err(HarnessError::SourceResolution(format!("unknown chunk {}#{}", r.doc_id, r.chunk_index)));
                }
                keep.insert((r.doc_id.clone(), r.chunk_index));
            }
            Ok(snapshot.restrict_chunks(&keep))
        }
    }
}

/// Re-runs the query on the corpus restricted to the output's sources and
/// reports whether the result is byte-identical.
pub fn verify_sources(
    engine: &Engine,
    kind: &PipelineKind,
    query: &Query,
    snapshot: &CorpusSnapshot,
    output: &PipelineOutput,
) -> Result<bool, HarnessError> {
    verify_against(engine, kind, query, &resolve_sources(query, snapshot, output)?, output)
}

/// Re-runs the query on `restricted` and compares with `output`.
pub fn verify_against(
    engine: &Engine,
    kind: &PipelineKind,
    query: &Query,
    restricted: &CorpusSnapshot,
    output: &PipelineOutput,
) -> Result<bool, HarnessError> {
    let rerun = match &output.mode {
        Mode::Scored { .. } => engine.answer(kind, query, restricted),
        Mode::Generated { max_tokens, temperature, .. } => {
            engine.generate(kind, query, restricted, *max_tokens, *temperature)
        }
    };
    Ok(outcome_bytes(rerun)? == output.canonical_bytes())
}
