//! Deterministic interpolated n-gram language model with DP training and
//! retrieval augmentation.

mod augment;
mod dp;
mod model;
pub mod tokenize;

pub use augment::Augmentation;
pub use dp::{default_delta, dp_train, group_privacy, DpMeta, LaplaceNoise, PrivacyBudget};
pub use model::{
    perplexity_from_log_probs, Distribution, LmConfig, ModelFile, NGramModel, TrainingChunk, DEFAULT_MU,
    DEFAULT_OOV_PENALTY, DEFAULT_ORDER, MODEL_FORMAT, MODEL_FORMAT_VERSION, PROB_FLOOR,
};
pub use tokenize::{tokenize, UNK};

#[cfg(test)]
mod tests;
