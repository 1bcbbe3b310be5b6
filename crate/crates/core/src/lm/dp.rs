//! User-level differentially private n-gram counts.
//!
//! Each user's contribution is truncated to at most `cap` k-gram events, so
//! adding or removing one user changes the count vector by at most `cap` in
//! L1 norm. Adding Laplace noise of scale `cap / ε` to every cell then gives
//! user-level ε-DP; clipping and model construction are post-processing.

use std::collections::{BTreeMap, HashMap};
use std::sync::Arc;

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

use super::model::{count_events, tokenize_chunks, CountLayer, LmConfig, NGramModel, TrainingChunk};
use crate::error::LmError;
use crate::policy::SecurityLabel;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PrivacyBudget {
    pub epsilon: f64,
    pub delta: f64,
}

impl PrivacyBudget {
    pub fn new(epsilon: f64, delta: f64) -> Result<Self, LmError> {
        if !(epsilon >= 0.0 && epsilon.is_finite()) {
            return Err(LmError::InvalidBudget(format!("epsilon must be finite and >= 0, got {epsilon}")));
        }
        if !(0.0..1.0).contains(&delta) {
            return Err(LmError::InvalidBudget(format!("delta must be in [0, 1), got {delta}")));
        }
        Ok(PrivacyBudget { epsilon, delta })
    }

    /// Budget with the conventional δ = 1/(n ln n) for `users` users.
    pub fn with_default_delta(epsilon: f64, users: usize) -> Result<Self, LmError> {
        PrivacyBudget::new(epsilon, default_delta(users)?)
    }
}

pub fn default_delta(users: usize) -> Result<f64, LmError> {
    if users < 2 {
        return Err(LmError::InvalidBudget("default delta needs at least 2 users".into()));
    }
    let n = users as f64;
    Ok(1.0 / (n * n.ln()))
}

/// Guarantee for a group of `k` correlated users under an individual
/// (ε, δ) guarantee: (kε, k·e^{(k−1)ε}·δ).
pub fn group_privacy(budget: PrivacyBudget, k: u32) -> Result<PrivacyBudget, LmError> {
    if k == 0 {
        return Err(LmError::InvalidGroupSize);
    }
    let k = f64::from(k);
    Ok(PrivacyBudget {
        epsilon: k * budget.epsilon,
        delta: k * ((k - 1.0) * budget.epsilon).exp() * budget.delta,
    })
}

/// Recorded on models whose counts were privatized (and hence declassified).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DpMeta {
    pub budget: PrivacyBudget,
    pub cap: u64,
    pub seed: u64,
    /// The output label was widened to public because of the DP guarantee.
    pub declassified: bool,
}

/// Seeded Laplace(0, scale) sampler using the inverse CDF.
pub struct LaplaceNoise {
    rng: ChaCha20Rng,
    scale: f64,
}

impl LaplaceNoise {
    pub fn new(scale: f64, seed: u64) -> Self {
        LaplaceNoise { rng: ChaCha20Rng::seed_from_u64(seed), scale }
    }

    pub fn sample(&mut self) -> f64 {
        // u in (0, 1), never exactly 0.5
        let bits = self.rng.next_u64() >> 11;
        let u = (bits as f64 + 0.5) / (1u64 << 53) as f64;
        let centered = u - 0.5;
        -self.scale * centered.signum() * (1.0 - 2.0 * centered.abs()).ln()
    }
}

/// Trains a model on privatized counts.
///
/// Users' k-gram events are truncated to `cap` in ingestion order, every
/// resulting cell gets Laplace(cap / ε) noise drawn in sorted cell order
/// (order, then k-gram), negatives are clipped to zero. The model is
/// labeled public and carries [`DpMeta`].
pub fn dp_train(
    chunks: &[TrainingChunk<'_>],
    config: LmConfig,
    budget: PrivacyBudget,
    cap: u64,
    seed: u64,
) -> Result<NGramModel, LmError> {
    config.validate()?;
    if !(budget.epsilon > 0.0 && budget.epsilon.is_finite()) {
        return Err(LmError::InvalidBudget(format!("epsilon must be > 0, got {}", budget.epsilon)));
    }
    if cap == 0 {
        return Err(LmError::InvalidCap);
    }
    let tokenized = tokenize_chunks(chunks);
    let mut ledger: BTreeMap<String, u64> = BTreeMap::new();
    let mut tables = count_events(&tokenized, config.order, |user| {
        let used = ledger.entry(user.to_owned()).or_insert(0);
        if *used >= cap {
            return false;
        }
        *used += 1;
        true
    });
    ledger.retain(|_, n| *n > 0);

    let mut noise = LaplaceNoise::new(cap as f64 / budget.epsilon, seed);
    for table in &mut tables {
        let mut keys: Vec<String> = table.keys().cloned().collect();
        keys.sort();
        let mut noisy = HashMap::with_capacity(keys.len());
        for key in keys {
            let value = table[&key] + noise.sample();
            if value > 0.0 {
                noisy.insert(key, value);
            }
        }
        *table = noisy;
    }

    let meta = DpMeta { budget, cap, seed, declassified: true };
    Ok(NGramModel::from_layers(
        config,
        vec![Arc::new(CountLayer::from_tables(tables))],
        Some(SecurityLabel::Public),
        Some(meta),
        ledger,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn group_privacy_examples() {
        let b = PrivacyBudget::new(0.7, 1e-5).unwrap();
        assert_eq!(group_privacy(b, 1).unwrap(), b);
        let g = group_privacy(PrivacyBudget::new(0.0, 2e-6).unwrap(), 3).unwrap();
        assert_eq!(g.epsilon, 0.0);
        assert!((g.delta - 6e-6).abs() < 1e-18);
        let g = group_privacy(PrivacyBudget::new(1.0, 1e-6).unwrap(), 2).unwrap();
        assert_eq!(g.epsilon, 2.0);
        // 2·e·1e-6
        assert!((g.delta - 5.436_563_656_918_09e-6).abs() < 1e-11);
        assert!(group_privacy(b, 0).is_err());
    }

    #[test]
    fn default_delta_convention() {
        let d = default_delta(100).unwrap();
        assert!((d - 1.0 / (100.0 * 100f64.ln())).abs() < 1e-15);
        assert!(default_delta(1).is_err());
        let b = PrivacyBudget::with_default_delta(1.0, 50).unwrap();
        assert!(b.delta > 0.0 && b.delta < 1.0);
    }

    #[test]
    fn budget_validation() {
        assert!(PrivacyBudget::new(-1.0, 0.0).is_err());
        assert!(PrivacyBudget::new(1.0, 1.0).is_err());
        assert!(PrivacyBudget::new(f64::NAN, 0.0).is_err());
    }

    #[test]
    fn laplace_is_seeded_and_symmetric() {
        let a: Vec<f64> = {
            let mut n = LaplaceNoise::new(2.0, 7);
            (0..100).map(|_| n.sample()).collect()
        };
        let b: Vec<f64> = {
            let mut n = LaplaceNoise::new(2.0, 7);
            (0..100).map(|_| n.sample()).collect()
        };
        assert_eq!(a, b);
        let mut n = LaplaceNoise::new(1.0, 1);
        let draws: Vec<f64> = (0..20_000).map(|_| n.sample()).collect();
        let mean = draws.iter().sum::<f64>() / draws.len() as f64;
        assert!(mean.abs() < 0.05, "mean {mean}");
    }
}
