//! Label-aware language-model toolkit.
//!
//! Documents carry security labels (reader sets). Every model output is
//! computed only from data its requesting principal may read, and carries
//! the label of the data it used.

pub mod corpus;
pub mod error;
pub mod eval;
pub mod fixtures;
pub mod lm;
pub mod nih;
pub mod policy;
pub mod pipelines;
pub mod retrieval;
pub mod synth;

#[cfg(test)]
mod testutil;

pub use error::{EvalError, HarnessError, LmError, PipelineError, PolicyError, StoreError};
pub use policy::{Principal, SecurityLabel, UserId};
