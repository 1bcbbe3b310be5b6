use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::error::LmError;

/// How retrieved text conditions the model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Augmentation {
    None,
    /// Retrieved tokens are prepended to the history.
    Prompt(Vec<String>),
    /// The next-token distribution is interpolated with a maximum-likelihood
    /// distribution read off the retrieved chunks.
    Knn { retrieved: Vec<Vec<String>>, lambda: f64 },
}

impl Augmentation {
    pub fn validate(&self) -> Result<(), LmError> {
        if let Augmentation::Knn { lambda, .. } = self {
            if !(0.0..=1.0).contains(lambda) {
                return Err(LmError::InvalidLambda(*lambda));
            }
        }
        Ok(())
    }
}

/// Next-token statistics of retrieved chunks, conditioned on the longest
/// suffix of the history that occurs in them.
#[derive(Debug, Clone)]
pub(crate) struct RetrievalLm {
    sequences: Vec<Vec<String>>,
}

impl RetrievalLm {
    pub(crate) fn new(retrieved: &[Vec<String>]) -> Self {
        RetrievalLm { sequences: retrieved.iter().filter(|s| !s.is_empty()).cloned().collect() }
    }

    pub(crate) fn is_empty(&self) -> bool {
        self.sequences.is_empty()
    }

    pub(crate) fn vocab(&self) -> impl Iterator<Item = &str> + '_ {
        self.sequences
            .iter()
            .flatten()
            .map(String::as_str)
            .collect::<BTreeSet<_>>()
            .into_iter()
    }

    /// Maximum-likelihood continuation distribution. With no matching
    /// suffix this is the unigram distribution of the retrieved text.
    pub(crate) fn next_token_dist(&self, history: &[String]) -> BTreeMap<String, f64> {
        let mut best = 0usize;
        let mut counts: BTreeMap<&str, u64> = BTreeMap::new();
        for seq in &self.sequences {
            for next in 0..seq.len() {
                let mut matched = 0;
                while matched < next
                    && matched < history.len()
                    && seq[next - 1 - matched] == history[history.len() - 1 - matched]
                {
                    matched += 1;
                }
                if matched > best {
                    best = matched;
                    counts.clear();
                }
                if matched == best {
                    *counts.entry(seq[next].as_str()).or_insert(0) += 1;
                }
            }
        }
        let total: u64 = counts.values().sum();
        counts
            .into_iter()
            .map(|(t, c)| (t.to_owned(), c as f64 / total as f64))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toks(s: &str) -> Vec<String> {
        s.split(' ').map(str::to_owned).collect()
    }

    #[test]
    fn continuation_of_matching_suffix() {
        // "x" is followed by y once and z once in "x y x z".
        let rlm = RetrievalLm::new(&[toks("x y x z")]);
        let dist = rlm.next_token_dist(&toks("w x"));
        assert_eq!(dist, BTreeMap::from([("y".into(), 0.5), ("z".into(), 0.5)]));
    }

    #[test]
    fn longer_suffix_wins() {
        let rlm = RetrievalLm::new(&[toks("x y x z")]);
        let dist = rlm.next_token_dist(&toks("y x"));
        assert_eq!(dist, BTreeMap::from([("z".into(), 1.0)]));
    }

    #[test]
    fn unigram_backoff() {
        let rlm = RetrievalLm::new(&[toks("a b"), toks("a c")]);
        let dist = rlm.next_token_dist(&toks("q"));
        assert_eq!(
            dist,
            BTreeMap::from([("a".into(), 0.5), ("b".into(), 0.25), ("c".into(), 0.25)])
        );
        assert_eq!(rlm.next_token_dist(&[]), dist);
    }

    #[test]
    fn matches_do_not_span_chunks() {
        let rlm = RetrievalLm::new(&[toks("p q"), toks("r s")]);
        // "q r" never occurs contiguously, so only the "q" suffix can match
        // and nothing follows q.
        let dist = rlm.next_token_dist(&toks("q"));
        assert_eq!(dist.len(), 4);
    }

    #[test]
    fn lambda_range() {
        assert!(Augmentation::Knn { retrieved: vec![], lambda: 1.5 }.validate().is_err());
        assert!(Augmentation::Knn { retrieved: vec![], lambda: 1.0 }.validate().is_ok());
    }
}
