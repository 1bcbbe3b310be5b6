use proptest::prelude::*;

use super::*;
use crate::corpus::{CorpusStore, IngestRecord};
use crate::lm::{NGramModel, TrainingChunk};
use crate::policy::SecurityLabel;
use crate::synth::{generate, SynthConfig};

fn toks(n: usize) -> Vec<String> {
    (0..n).map(|i| format!("t{i}")).collect()
}

#[test]
fn split_prompt_examples() {
    let (p, c) = split_prompt(&toks(10), 0.25).unwrap();
    assert_eq!((p.len(), c.len()), (2, 8));
    let (p, c) = split_prompt(&toks(2), 0.10).unwrap();
    assert_eq!((p.len(), c.len()), (1, 1));
    assert!(matches!(split_prompt(&toks(1), 0.5), Err(EvalError::TooShort(1))));
    assert!(matches!(split_prompt(&toks(5), 1.0), Err(EvalError::InvalidFraction(_))));
    assert!(matches!(split_prompt(&toks(5), 0.0), Err(EvalError::InvalidFraction(_))));
}

proptest! {
    #[test]
    fn split_prompt_matches_floor_clamp_oracle(t in 2usize..500, f in 0.001f64..0.999) {
        let (p, c) = split_prompt(&toks(t), f).unwrap();
        let mut want = (f * t as f64).floor() as usize;
        if want < 1 { want = 1; }
        if want > t - 1 { want = t - 1; }
        prop_assert_eq!(p.len(), want);
        prop_assert_eq!(c.len(), t - want);
        prop_assert_eq!([p, c].concat(), toks(t));
    }
}

fn row(doc: &str, variant: &str, pipeline: &str, ppl: f64) -> EvalRow {
    EvalRow { doc_id: doc.into(), variant: variant.into(), fraction: 0.1, k: 0, pipeline: pipeline.into(), perplexity: ppl }
}

fn synthetic_rows(n: usize) -> Vec<EvalRow> {
    let mut rows = Vec::new();
    for i in 0..n {
        let doc = format!("d{i:02}");
        // zero-shot perplexities in a scrambled order
        let zs = ((i * 7) % n) as f64 + 10.0;
        rows.push(row(&doc, NO_VARIANT, "zero_shot", zs));
        rows.push(row(&doc, "current", "ra_knn(0.5)", zs / 2.0 + i as f64 * 0.01));
    }
    rows
}

#[test]
fn percentile_groups_are_equal_sized() {
    let table = percentile_report(&synthetic_rows(20), 10).unwrap();
    let zs: Vec<&PercentileRow> = table.iter().filter(|r| r.pipeline == "zero_shot").collect();
    assert_eq!(zs.len(), 10);
    assert!(zs.iter().all(|r| r.docs == 2));
    let table = percentile_report(&synthetic_rows(23), 10).unwrap();
    let last = table.iter().filter(|r| r.pipeline == "zero_shot").last().unwrap();
    assert_eq!((last.group, last.docs), (10, 5));
}

#[test]
fn constant_perplexities_give_equal_group_means() {
    let rows: Vec<EvalRow> = (0..12).map(|i| row(&format!("d{i}"), NO_VARIANT, "zero_shot", 4.0)).collect();
    let table = percentile_report(&rows, 4).unwrap();
    assert!(table.iter().all(|r| r.mean_perplexity == 4.0));
}

#[test]
fn percentile_means_match_sort_and_slice_oracle() {
    let rows = synthetic_rows(37);
    let table = percentile_report(&rows, 10).unwrap();
    let mut order: Vec<(f64, String)> = rows
        .iter()
        .filter(|r| r.pipeline == "zero_shot")
        .map(|r| (r.perplexity, r.doc_id.clone()))
        .collect();
    order.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let size = 37 / 10;
    for g in 0..10 {
        let end = if g == 9 { 37 } else { (g + 1) * size };
        let ids: Vec<&String> = order[g * size..end].iter().map(|(_, d)| d).collect();
        let vals: Vec<f64> = rows
            .iter()
            .filter(|r| r.pipeline == "ra_knn(0.5)" && ids.contains(&&r.doc_id))
            .map(|r| r.perplexity)
            .collect();
        let want = vals.iter().sum::<f64>() / vals.len() as f64;
        let got = table.iter().find(|r| r.group == g + 1 && r.pipeline == "ra_knn(0.5)").unwrap();
        assert!((got.mean_perplexity - want).abs() < 1e-9);
        assert_eq!(got.docs, ids.len());
    }
}

#[test]
fn missing_baseline_is_an_error() {
    let mut rows = synthetic_rows(10);
    rows.retain(|r| !(r.doc_id == "d03" && r.pipeline == "zero_shot"));
    assert!(matches!(percentile_report(&rows, 2), Err(EvalError::MissingBaselineRows(d)) if d == "d03"));
    assert!(matches!(percentile_report(&synthetic_rows(3), 5), Err(EvalError::InsufficientRows { .. })));
}

fn small_setup() -> (CorpusSnapshot, Engine) {
    let corpus = generate(&SynthConfig { authors: 6, docs: 36, ..SynthConfig::default() });
    let mut store = CorpusStore::new(64).unwrap();
    store.ingest(corpus.records.clone()).unwrap();
    let chunks: Vec<TrainingChunk> = corpus
        .pretrain
        .iter()
        .map(|t| TrainingChunk { text: t, user: "public", label: &SecurityLabel::Public })
        .collect();
    let model = NGramModel::train(&chunks, LmConfig::default()).unwrap();
    ((*store.snapshot()).clone(), Engine::new(model).unwrap())
}

fn small_config() -> EvalConfig {
    EvalConfig { k_values: vec![4, 8], percentile_groups: 3, ..EvalConfig::default() }
}

#[test]
fn experiment_is_deterministic_and_consistent() {
    let (snap, engine) = small_setup();
    let a = run_experiment(&small_config(), &snap, &engine).unwrap();
    let b = run_experiment(&small_config(), &snap, &engine.fresh()).unwrap();
    assert_eq!(a.rows_csv(), b.rows_csv());
    assert_eq!(a.aggregates_csv(), b.aggregates_csv());
    assert_eq!(a.percentiles_csv(), b.percentiles_csv());
    assert_eq!(a.manifest_json(), b.manifest_json());
    assert!(a.manifest.test_docs >= 10);
    // zero-shot: 1 row per fraction; RA: 4 variants x 2 K per fraction
    let random = a.rows.iter().filter(|r| r.variant == "random").count();
    assert_eq!(a.rows.len() - random, a.manifest.test_docs * 3 * (1 + 3 * 2));
    assert!(random > 0 && random <= a.manifest.test_docs * 3 * 2);
    for agg in &a.aggregates {
        let vals: Vec<f64> = a
            .rows
            .iter()
            .filter(|r| r.variant == agg.variant && r.fraction == agg.fraction && r.k == agg.k && r.pipeline == agg.pipeline)
            .map(|r| r.perplexity)
            .collect();
        let mean = vals.iter().sum::<f64>() / vals.len() as f64;
        assert!((mean - agg.mean_perplexity).abs() < 1e-9);
    }
    assert!(a.rows_csv().starts_with("doc_id,variant,fraction,k,pipeline,perplexity\n"));
}

#[test]
fn variant_corpora_are_nested() {
    let (snap, _) = small_setup();
    for doc in test_documents(&snap) {
        let p = Principal::from_set(doc.authors.iter().cloned().collect()).unwrap();
        let authors: BTreeSet<String> = snap.project(&p).into_iter().map(str::to_owned).collect();
        let others: BTreeSet<String> = snap.without_document(&doc.id).project(&p).into_iter().map(str::to_owned).collect();
        let current: BTreeSet<String> = snap
            .restrict_documents(&BTreeSet::from([doc.id.clone()]))
            .project(&p)
            .into_iter()
            .map(str::to_owned)
            .collect();
        assert!(authors.is_superset(&others));
        assert!(authors.is_superset(&current));
        assert_eq!(current, BTreeSet::from([doc.id.clone()]));
    }
}

#[test]
fn random_reader_never_reads_the_document() {
    let (snap, engine) = small_setup();
    let cfg = EvalConfig { variants: vec![AccessVariant::RandomAuthor], ..small_config() };
    let report = run_experiment(&cfg, &snap, &engine).unwrap();
    assert!(report.rows.iter().any(|r| r.variant == "random"));
}

#[test]
fn abstract_in_body_lowers_current_article_perplexity() {
    let (snap, engine) = small_setup();
    let doc = test_documents(&snap)[0].clone();
    let mut record: IngestRecord = doc.to_record();
    record.body = format!("{} {}", record.body, record.abstract_text.clone().unwrap());
    let leaked = snap.with_document(Document::from_record(record).unwrap());
    let cfg = EvalConfig { variants: vec![AccessVariant::CurrentArticle], ..small_config() };
    let report = run_experiment(&cfg, &leaked, &engine).unwrap();
    let mine = |f: f64, variant: &str| {
        report.rows.iter().find(|r| r.doc_id == doc.id && r.fraction == f && r.variant == variant).unwrap().clone()
    };
    for &f in &cfg.fractions {
        let (zs, cur) = (mine(f, NO_VARIANT), mine(f, "current"));
        assert!(cur.perplexity < zs.perplexity, "{f}: {} vs {}", cur.perplexity, zs.perplexity);
    }
}

#[test]
fn invalid_configs_are_rejected() {
    let (snap, engine) = small_setup();
    let bad = EvalConfig { fractions: vec![1.5], ..EvalConfig::default() };
    assert!(matches!(run_experiment(&bad, &snap, &engine), Err(EvalError::InvalidFraction(_))));
    let bad = EvalConfig { k_values: vec![0], ..EvalConfig::default() };
    assert!(matches!(run_experiment(&bad, &snap, &engine), Err(EvalError::InvalidK)));
}
