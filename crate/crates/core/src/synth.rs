//! Seeded synthetic corpus of labeled papers.
//!
//! Every author writes with a private topic vocabulary (pseudo-words that no
//! other author uses) arranged into recurring phrases, mixed with a shared
//! stock of common words. Abstracts repeat three sentences of their body
//! verbatim and end with one new sentence of common words only. The public
//! pretraining text contains every word but none of the authors' phrases.

use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::IngestRecord;
use crate::policy::{SecurityLabel, UserId};

const COMMON: &[&str] = &[
    "the", "of", "and", "a", "in", "to", "is", "we", "for", "with", "that", "on", "this", "are", "by", "from",
    "study", "method", "results", "data", "model", "shows", "new", "our", "work", "using", "based", "approach",
    "analysis", "paper", "these", "which", "can", "also", "between", "both", "first", "more", "used", "show",
];

const CONSONANTS: &[u8] = b"bcdfghklmnprstvz";
const VOWELS: &[u8] = b"aeiou";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub seed: u64,
    pub authors: usize,
    pub docs: usize,
    pub topic_words: usize,
    pub phrases: usize,
    /// Probability that a document gets a second author.
    pub coauthor_rate: f64,
    /// Probability that a document is public.
    pub public_rate: f64,
    /// Probability that a private document is shared with one extra reader.
    pub grant_rate: f64,
    /// Probability that a document has an abstract.
    pub abstract_rate: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            seed: 20_240_611,
            authors: 40,
            docs: 200,
            topic_words: 30,
            phrases: 12,
            coauthor_rate: 0.2,
            public_rate: 0.06,
            grant_rate: 0.1,
            abstract_rate: 0.75,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthCorpus {
    pub records: Vec<IngestRecord>,
    /// Public pretraining passages, one per line.
    pub pretrain: Vec<String>,
}

impl SynthCorpus {
    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for r in &self.records {
            out.push_str(&serde_json::to_string(r).expect("record serializes"));
            out.push('\n');
        }
        out
    }

    pub fn pretrain_text(&self) -> String {
        let mut out = self.pretrain.join("\n");
        out.push('\n');
        out
    }
}

struct Author {
    id: UserId,
    words: Vec<String>,
    phrases: Vec<Vec<String>>,
}

/// Index skewed towards small values, so some words and phrases recur
/// much more than others.
fn skewed(rng: &mut ChaCha20Rng, n: usize) -> usize {
    let u: f64 = rng.gen();
    ((u * u) * n as f64) as usize % n
}

fn pseudo_word(rng: &mut ChaCha20Rng) -> String {
    let syllables = rng.gen_range(2..=3);
    let mut w = String::new();
    for _ in 0..syllables {
        w.push(*CONSONANTS.choose(rng).expect("non-empty") as char);
        w.push(*VOWELS.choose(rng).expect("non-empty") as char);
    }
    if rng.gen_bool(0.5) {
        w.push(*CONSONANTS.choose(rng).expect("non-empty") as char);
    }
    w
}

fn common_run(rng: &mut ChaCha20Rng, len: usize) -> Vec<String> {
    (0..len).map(|_| COMMON[skewed(rng, COMMON.len())].to_owned()).collect()
}

fn sentence(rng: &mut ChaCha20Rng, authors: &[&Author]) -> String {
    let target = rng.gen_range(9..=15);
    let mut words: Vec<String> = Vec::new();
    while words.len() < target {
        if rng.gen_bool(0.5) {
            let author = authors[rng.gen_range(0..authors.len())];
            words.extend(author.phrases[skewed(rng, author.phrases.len())].iter().cloned());
        } else {
            let n = rng.gen_range(1..=3);
            words.extend(common_run(rng, n));
        }
    }
    words.join(" ") + "."
}

pub fn generate(config: &SynthConfig) -> SynthCorpus {
    let mut rng = ChaCha20Rng::seed_from_u64(config.seed);
    let width = config.authors.saturating_sub(1).to_string().len().max(2);
    let mut used: BTreeSet<String> = COMMON.iter().map(|w| (*w).to_owned()).collect();
    let authors: Vec<Author> = (0..config.authors)
        .map(|i| {
            let mut words = Vec::with_capacity(config.topic_words);
            while words.len() < config.topic_words {
                let w = pseudo_word(&mut rng);
                if used.insert(w.clone()) {
                    words.push(w);
                }
            }
            let phrases = (0..config.phrases)
                .map(|_| {
                    let len = rng.gen_range(2..=3);
                    (0..len).map(|_| words[skewed(&mut rng, words.len())].clone()).collect()
                })
                .collect();
            Author { id: UserId::new(format!("a{i:0width$}")).expect("non-empty id"), words, phrases }
        })
        .collect();

    let doc_width = config.docs.saturating_sub(1).to_string().len().max(3);
    let mut records = Vec::with_capacity(config.docs);
    for d in 0..config.docs {
        let primary = d % config.authors;
        let mut writers = vec![&authors[primary]];
        if config.authors > 1 && rng.gen_bool(config.coauthor_rate) {
            let other = (primary + rng.gen_range(1..config.authors)) % config.authors;
            writers.push(&authors[other]);
        }
        let n_sentences = rng.gen_range(10..=16);
        let body: Vec<String> = (0..n_sentences).map(|_| sentence(&mut rng, &writers)).collect();
        let abstract_text = rng.gen_bool(config.abstract_rate).then(|| {
            let mut picks: Vec<usize> = (0..body.len()).collect();
            picks.shuffle(&mut rng);
            let mut picks = picks[..3].to_vec();
            picks.sort_unstable();
            let mut parts: Vec<String> = picks.into_iter().map(|i| body[i].clone()).collect();
            let closing = rng.gen_range(8..=12);
            parts.push(common_run(&mut rng, closing).join(" ") + ".");
            parts.join(" ")
        });
        let author_ids: Vec<UserId> = writers.iter().map(|a| a.id.clone()).collect();
        let label = if rng.gen_bool(config.public_rate) {
            Some(SecurityLabel::Public)
        } else if config.authors > writers.len() && rng.gen_bool(config.grant_rate) {
            let mut readers: BTreeSet<UserId> = author_ids.iter().cloned().collect();
            loop {
                let extra = &authors[rng.gen_range(0..config.authors)].id;
                if readers.insert(extra.clone()) {
                    break;
                }
            }
            Some(SecurityLabel::from_set(readers).expect("non-empty readers"))
        } else {
            None
        };
        let title_len = rng.gen_range(2..=4);
        let title: Vec<&str> =
            (0..title_len).map(|_| writers[0].words[skewed(&mut rng, writers[0].words.len())].as_str()).collect();
        records.push(IngestRecord {
            id: format!("doc{d:0doc_width$}"),
            title: title.join(" "),
            abstract_text,
            body: body.join(" "),
            authors: author_ids,
            label,
            created: Some(format!("2023-{:02}-{:02}", 1 + d % 12, 1 + d % 28)),
        });
    }

    let mut pretrain = Vec::new();
    for _ in 0..300 {
        let len = rng.gen_range(8..=16);
        pretrain.push(common_run(&mut rng, len).join(" ") + ".");
    }
    // Every topic word appears, but only in isolation among common words.
    for author in &authors {
        for w in &author.words {
            for _ in 0..2 {
                let len = rng.gen_range(4..=8);
                let mut words = common_run(&mut rng, len);
                let at = rng.gen_range(0..=words.len());
                words.insert(at, w.clone());
                pretrain.push(words.join(" ") + ".");
            }
        }
    }
    SynthCorpus { records, pretrain }
}
