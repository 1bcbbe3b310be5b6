use std::collections::{BTreeMap, BTreeSet};

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::policy::SecurityLabel;

fn toks(s: &str) -> Vec<String> {
    tokenize(s)
}

fn public_chunks<'a>(texts: &'a [&'a str]) -> Vec<TrainingChunk<'a>> {
    static PUBLIC: SecurityLabel = SecurityLabel::Public;
    texts.iter().map(|t| TrainingChunk { text: t, user: "u", label: &PUBLIC }).collect()
}

fn config(order: usize, mu: f64) -> LmConfig {
    LmConfig { order, mu, oov_penalty: DEFAULT_OOV_PENALTY }
}

#[test]
fn bigram_counts_by_hand() {
    let model = NGramModel::train(&public_chunks(&["a b a b"]), config(2, 0.7)).unwrap();
    assert_eq!(model.count("a b"), 2.0);
    assert_eq!(model.count("b a"), 1.0);
    assert_eq!(model.count("a"), 2.0);
    assert_eq!(model.count("b b"), 0.0);
    assert_eq!(model.vocab(), vec!["a", "b"]);
}

#[test]
fn empty_corpus_is_uniform_over_unk() {
    let model = NGramModel::train(&[], LmConfig::default()).unwrap();
    let dist = model.next_token_dist(&toks("anything at all"), &Augmentation::None).unwrap();
    assert_eq!(dist.entries(), &[(UNK.to_string(), 1.0)]);
    assert_eq!(model.label().unwrap(), &SecurityLabel::Public);
}

#[test]
fn training_is_deterministic() {
    let texts = ["the cat sat on the mat", "a dog sat on a log", "the dog ran"];
    let a = NGramModel::train(&public_chunks(&texts), LmConfig::default()).unwrap();
    let b = NGramModel::train(&public_chunks(&texts), LmConfig::default()).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.to_json(), b.to_json());
}

#[test]
fn model_label_is_meet_of_chunks() {
    let ab = SecurityLabel::users(["a", "b"]).unwrap();
    let bc = SecurityLabel::users(["b", "c"]).unwrap();
    let c = SecurityLabel::users(["c"]).unwrap();
    let chunks = [
        TrainingChunk { text: "x", user: "a", label: &ab },
        TrainingChunk { text: "y", user: "b", label: &bc },
    ];
    let m = NGramModel::train(&chunks, LmConfig::default()).unwrap();
    assert_eq!(m.label().unwrap(), &SecurityLabel::users(["b"]).unwrap());
    let chunks = [
        TrainingChunk { text: "x", user: "a", label: &ab },
        TrainingChunk { text: "y", user: "c", label: &c },
    ];
    let m = NGramModel::train(&chunks, LmConfig::default()).unwrap();
    assert!(m.label().is_err());
}

#[test]
fn invalid_config_rejected() {
    assert!(NGramModel::train(&[], config(0, 0.5)).is_err());
    assert!(NGramModel::train(&[], config(6, 0.5)).is_err());
    assert!(NGramModel::train(&[], config(3, 1.0)).is_err());
}

#[test]
fn knn_lambda_zero_is_base() {
    let model = NGramModel::train(&public_chunks(&["x y z y x", "y y z"]), config(3, 0.6)).unwrap();
    let history = toks("x y");
    let base = model.next_token_dist(&history, &Augmentation::None).unwrap();
    let knn = Augmentation::Knn { retrieved: vec![toks("x y w q x z")], lambda: 0.0 };
    assert_eq!(model.next_token_dist(&history, &knn).unwrap(), base);
}

#[test]
fn knn_lambda_one_hand_count() {
    let model = NGramModel::train(&[], LmConfig::default()).unwrap();
    let knn = Augmentation::Knn { retrieved: vec![toks("x y x z")], lambda: 1.0 };
    let dist = model.next_token_dist(&toks("x"), &knn).unwrap();
    assert_eq!(dist.prob("y"), 0.5);
    assert_eq!(dist.prob("z"), 0.5);
    assert_eq!(dist.prob("x"), 0.0);
}

#[test]
fn prompt_prepends_history() {
    let model = NGramModel::train(&public_chunks(&["p q r", "s t u"]), config(3, 0.5)).unwrap();
    let prompt = Augmentation::Prompt(toks("p q"));
    let with_prompt = model.next_token_dist(&[], &prompt).unwrap();
    let direct = model.next_token_dist(&toks("p q"), &Augmentation::None).unwrap();
    assert_eq!(with_prompt, direct);
}

#[test]
fn uniform_model_perplexity_is_support_size() {
    let model = NGramModel::train(&public_chunks(&["t0 t1 t2 t3 t4 t5 t6 t7 t8 t9"]), config(3, 0.0)).unwrap();
    assert_eq!(model.vocab_size(), 10);
    let ppl = model.perplexity(&toks("t1"), &toks("t3 t5 t0 t9"), &Augmentation::None).unwrap();
    assert!((ppl - 11.0).abs() <= 11.0 * 1e-15, "{ppl}");
}

#[test]
fn perplexity_is_per_token_geometric_mean() {
    let log_probs = [-1.5, -0.25, -3.0];
    let doubled: Vec<f64> = log_probs.iter().chain(log_probs.iter()).copied().collect();
    let once = perplexity_from_log_probs(&log_probs).unwrap();
    let twice = perplexity_from_log_probs(&doubled).unwrap();
    assert!((once - twice).abs() <= once * 1e-15);

    // Under a unigram model, a repeated continuation scores identically.
    let model = NGramModel::train(&public_chunks(&["a b c a b a"]), config(1, 0.7)).unwrap();
    let cont = toks("a c b");
    let mut rep = cont.clone();
    rep.extend(cont.clone());
    let p1 = model.perplexity(&[], &cont, &Augmentation::None).unwrap();
    let p2 = model.perplexity(&[], &rep, &Augmentation::None).unwrap();
    assert!((p1 - p2).abs() <= p1 * 1e-12);
}

#[test]
fn empty_continuation_rejected() {
    let model = NGramModel::train(&[], LmConfig::default()).unwrap();
    assert_eq!(model.perplexity(&[], &[], &Augmentation::None), Err(crate::error::LmError::EmptyContinuation));
}

#[test]
fn oov_targets_are_penalized() {
    let model = NGramModel::train(&public_chunks(&["a b"]), config(2, 0.5)).unwrap();
    let unk = model.base_prob(&toks("a"), UNK);
    let lp = model.score_continuation(&toks("a"), &toks("zzz"), &Augmentation::None).unwrap();
    assert!((lp[0] - (unk / DEFAULT_OOV_PENALTY).ln()).abs() < 1e-12);
}

/// Independent oracle: counts k-grams by scanning, applies the interpolation
/// recursion, and sums log-probabilities directly.
fn oracle_log_prob_sum(
    train: &[Vec<String>],
    order: usize,
    mu: f64,
    oov_penalty: f64,
    context: &[String],
    continuation: &[String],
    knn: Option<(&[Vec<String>], f64)>,
) -> f64 {
    let occurrences = |gram: &[String]| -> f64 {
        train.iter().map(|t| t.windows(gram.len()).filter(|w| *w == gram).count()).sum::<usize>() as f64
    };
    let followed = |ctx: &[String]| -> f64 {
        if ctx.is_empty() {
            return train.iter().map(Vec::len).sum::<usize>() as f64;
        }
        train
            .iter()
            .map(|t| (0..t.len()).filter(|&i| i >= ctx.len() && t[i - ctx.len()..i] == *ctx).count())
            .sum::<usize>() as f64
    };
    let vocab: BTreeSet<&String> = train.iter().flatten().collect();
    let v = vocab.len() as f64;
    let base = |hist: &[String], w: &str| -> f64 {
        if w != UNK && !vocab.iter().any(|t| t.as_str() == w) {
            return 0.0;
        }
        let mut p = 1.0 / (v + 1.0);
        for k in 1..=order {
            let n_ctx = k - 1;
            if n_ctx > hist.len() {
                break;
            }
            let ctx = &hist[hist.len() - n_ctx..];
            let total = followed(ctx);
            if total == 0.0 {
                continue;
            }
            let mut gram = ctx.to_vec();
            gram.push(w.to_string());
            let c = if w == UNK { 0.0 } else { occurrences(&gram) };
            p = mu * c / total + (1.0 - mu) * p;
        }
        p
    };
    let retrieval = |hist: &[String], w: &str| -> f64 {
        let (seqs, _) = knn.unwrap();
        // brute force: try suffix lengths from longest to shortest
        for len in (0..=hist.len()).rev() {
            let suffix = &hist[hist.len() - len..];
            let mut hits: BTreeMap<&str, f64> = BTreeMap::new();
            for s in seqs {
                for i in len..s.len() {
                    if s[i - len..i] == *suffix {
                        *hits.entry(s[i].as_str()).or_insert(0.0) += 1.0;
                    }
                }
            }
            let total: f64 = hits.values().sum();
            if total > 0.0 {
                return hits.get(w).copied().unwrap_or(0.0) / total;
            }
        }
        0.0
    };
    let prob = |hist: &[String], w: &str| -> f64 {
        match knn {
            Some((seqs, lambda)) if seqs.iter().any(|s| !s.is_empty()) => {
                lambda * retrieval(hist, w) + (1.0 - lambda) * base(hist, w)
            }
            _ => base(hist, w),
        }
    };
    let mut hist = context.to_vec();
    let mut sum = 0.0;
    for w in continuation {
        let mut p = prob(&hist, w);
        if p <= 0.0 {
            p = prob(&hist, UNK) / oov_penalty;
        }
        sum += p.ln();
        hist.push(w.clone());
    }
    sum
}

#[test]
fn perplexity_matches_log_sum_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    let alphabet = ["a", "b", "c", "d", "e", "f"];
    let words = |n: usize, rng: &mut ChaCha8Rng| -> Vec<String> {
        (0..n).map(|_| alphabet[rng.gen_range(0..alphabet.len())].to_string()).collect()
    };
    for case in 0..50 {
        let order = rng.gen_range(1..=4);
        let mu = rng.gen_range(0.0..0.95);
        let train: Vec<Vec<String>> = (0..rng.gen_range(0..4)).map(|_| words(rng.gen_range(0..12), &mut rng)).collect();
        let texts: Vec<String> = train.iter().map(|t| t.join(" ")).collect();
        let refs: Vec<&str> = texts.iter().map(String::as_str).collect();
        let model = NGramModel::train(&public_chunks(&refs), config(order, mu)).unwrap();
        let context = words(rng.gen_range(0..4), &mut rng);
        let mut continuation = words(rng.gen_range(1..6), &mut rng);
        if case % 5 == 0 {
            continuation.push("zz".into());
        }
        let retrieved: Vec<Vec<String>> = (0..rng.gen_range(0..3)).map(|_| words(rng.gen_range(0..8), &mut rng)).collect();
        let lambda = rng.gen_range(0.0..1.0);
        let (aug, knn) = if case % 2 == 0 {
            (Augmentation::None, None)
        } else {
            (Augmentation::Knn { retrieved: retrieved.clone(), lambda }, Some((retrieved.as_slice(), lambda)))
        };
        let got = model.perplexity(&context, &continuation, &aug).unwrap();
        let sum = oracle_log_prob_sum(&train, order, mu, DEFAULT_OOV_PENALTY, &context, &continuation, knn);
        let want = (-sum / continuation.len() as f64).exp();
        assert!(((got - want) / want).abs() <= 1e-9, "case {case}: {got} vs {want}");
        assert!(got >= 1.0 && got.is_finite());
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]
    #[test]
    fn distributions_are_normalized(
        train in proptest::collection::vec("[a-e]( [a-e]){0,10}", 0..4),
        history in proptest::collection::vec("[a-g]", 0..5),
        retrieved in proptest::collection::vec("[a-h]( [a-h]){0,6}", 0..3),
        order in 1usize..=4,
        mu in 0.0f64..0.99,
        lambda in 0.0f64..=1.0,
        kind in 0u8..3,
    ) {
        let refs: Vec<&str> = train.iter().map(String::as_str).collect();
        let model = NGramModel::train(&public_chunks(&refs), config(order, mu)).unwrap();
        let aug = match kind {
            0 => Augmentation::None,
            1 => Augmentation::Prompt(retrieved.iter().flat_map(|r| tokenize(r)).collect()),
            _ => Augmentation::Knn { retrieved: retrieved.iter().map(|r| tokenize(r)).collect(), lambda },
        };
        let dist = model.next_token_dist(&history, &aug).unwrap();
        let mass = dist.total_mass();
        prop_assert!((mass - 1.0).abs() <= 1e-9, "mass {}", mass);
    }

    #[test]
    fn knn_is_lambda_continuous(
        train in proptest::collection::vec("[a-e]( [a-e]){0,10}", 1..4),
        retrieved in proptest::collection::vec("[a-h]( [a-h]){0,6}", 1..3),
        history in proptest::collection::vec("[a-g]", 0..4),
        lambda in 0.0f64..0.999,
    ) {
        let refs: Vec<&str> = train.iter().map(String::as_str).collect();
        let model = NGramModel::train(&public_chunks(&refs), LmConfig::default()).unwrap();
        let r: Vec<Vec<String>> = retrieved.iter().map(|s| tokenize(s)).collect();
        let d1 = model.next_token_dist(&history, &Augmentation::Knn { retrieved: r.clone(), lambda }).unwrap();
        let d2 = model.next_token_dist(&history, &Augmentation::Knn { retrieved: r, lambda: lambda + 1e-3 }).unwrap();
        let support: BTreeSet<&str> = d1.entries().iter().chain(d2.entries()).map(|(t, _)| t.as_str()).collect();
        let tv: f64 = support.iter().map(|t| (d1.prob(t) - d2.prob(t)).abs()).sum::<f64>() / 2.0;
        prop_assert!(tv <= 2e-3);
    }
}

#[test]
fn save_load_reproduces_distributions() {
    let texts = ["the cat sat on the mat", "a dog sat on a log", "the dog ran to the cat"];
    let base = NGramModel::train(&public_chunks(&texts), LmConfig::default()).unwrap();
    let private = SecurityLabel::users(["a"]).unwrap();
    let tuned = base
        .fine_tune(&[TrainingChunk { text: "the mat ran away", user: "a", label: &private }])
        .unwrap();
    let dp = dp_train(
        &public_chunks(&texts),
        LmConfig::default(),
        PrivacyBudget::new(1.0, 0.0).unwrap(),
        5,
        3,
    )
    .unwrap();
    for model in [&base, &tuned, &base.stacked_with(&dp)] {
        let reloaded = NGramModel::from_json(&model.to_json()).unwrap();
        assert_eq!(&reloaded, model);
        for history in [vec![], toks("the"), toks("sat on"), toks("zz the cat")] {
            let a = model.next_token_dist(&history, &Augmentation::None).unwrap();
            let b = reloaded.next_token_dist(&history, &Augmentation::None).unwrap();
            assert_eq!(a.entries().len(), b.entries().len());
            for ((ta, pa), (tb, pb)) in a.entries().iter().zip(b.entries()) {
                assert_eq!(ta, tb);
                assert_eq!(pa.to_bits(), pb.to_bits());
            }
        }
    }
    assert!(NGramModel::from_json("{\"format\":\"other\"}").is_err());
}

#[test]
fn fine_tune_adds_counts_and_meets_labels() {
    let base = NGramModel::train(&public_chunks(&["a b c"]), LmConfig::default()).unwrap();
    let l = SecurityLabel::users(["u1", "u2"]).unwrap();
    let tuned = base.fine_tune(&[TrainingChunk { text: "a b d", user: "u1", label: &l }]).unwrap();
    assert_eq!(tuned.count("a b"), 2.0);
    assert_eq!(tuned.count("d"), 1.0);
    assert_eq!(tuned.vocab_size(), 4);
    assert_eq!(tuned.label().unwrap(), &l);
    assert_eq!(tuned.ledger().get("u1"), Some(&6));
}

mod dp_props {
    use super::*;

    fn labeled(texts: &[(&'static str, &'static str)]) -> Vec<TrainingChunk<'static>> {
        static L: SecurityLabel = SecurityLabel::Public;
        texts.iter().map(|(u, t)| TrainingChunk { text: t, user: u, label: &L }).collect()
    }

    #[test]
    fn vanishing_noise_matches_clamped_counts() {
        let chunks = labeled(&[("alice", "a b c a b"), ("bob", "b c d"), ("alice", "c d e f g h")]);
        let cap = 10;
        let model = dp_train(&chunks, config(2, 0.7), PrivacyBudget::new(1e9, 0.0).unwrap(), cap, 11).unwrap();
        // alice: "a b c a b" gives 1+2+2+2+2 = 9 events, then only "c" of the
        // third chunk fits under the cap.
        assert_eq!(model.ledger().get("alice"), Some(&10));
        assert_eq!(model.ledger().get("bob"), Some(&5));
        let clamped: &[(&str, f64)] = &[
            ("a", 2.0), ("b", 3.0), ("c", 3.0), ("d", 1.0),
            ("a b", 2.0), ("b c", 2.0), ("c a", 1.0), ("c d", 1.0),
            ("e", 0.0), ("d e", 0.0),
        ];
        for (key, want) in clamped {
            assert!((model.count(key) - want).abs() < 1e-3, "{key}: {}", model.count(key));
        }
        assert_eq!(model.label().unwrap(), &SecurityLabel::Public);
        assert!(model.dp_meta().unwrap().declassified);
    }

    #[test]
    fn same_seed_same_model() {
        let chunks = labeled(&[("u", "a b c d e f"), ("v", "a c e")]);
        let b = PrivacyBudget::new(0.5, 0.0).unwrap();
        let m1 = dp_train(&chunks, LmConfig::default(), b, 4, 99).unwrap();
        let m2 = dp_train(&chunks, LmConfig::default(), b, 4, 99).unwrap();
        assert_eq!(m1.to_json(), m2.to_json());
        let m3 = dp_train(&chunks, LmConfig::default(), b, 4, 100).unwrap();
        assert_ne!(m1.to_json(), m3.to_json());
    }

    #[test]
    fn rejects_bad_parameters() {
        let chunks = labeled(&[("u", "a b")]);
        let zero = PrivacyBudget::new(0.0, 0.0).unwrap();
        assert!(matches!(
            dp_train(&chunks, LmConfig::default(), zero, 1, 0),
            Err(crate::error::LmError::InvalidBudget(_))
        ));
        let ok = PrivacyBudget::new(1.0, 0.0).unwrap();
        assert_eq!(dp_train(&chunks, LmConfig::default(), ok, 0, 0), Err(crate::error::LmError::InvalidCap));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]
        #[test]
        fn ledger_never_exceeds_cap(
            texts in proptest::collection::vec(("[uvw]", "[a-d]( [a-d]){0,12}"), 1..8),
            cap in 1u64..20,
        ) {
            static L: SecurityLabel = SecurityLabel::Public;
            let chunks: Vec<TrainingChunk> = texts
                .iter()
                .map(|(u, t)| TrainingChunk { text: t, user: u, label: &L })
                .collect();
            let m = dp_train(&chunks, LmConfig::default(), PrivacyBudget::new(1.0, 0.0).unwrap(), cap, 5).unwrap();
            for n in m.ledger().values() {
                prop_assert!(*n <= cap);
            }
            let dist = m.next_token_dist(&tokenize("a b"), &Augmentation::None).unwrap();
            prop_assert!((dist.total_mass() - 1.0).abs() < 1e-9);
        }
    }
}
