//! The confidence-gated eviction policy.
//!
//! [`rank`] scores eviction candidates and enforces budgets on one layer;
//! [`engine`] runs a full decoding step across layers.

pub mod engine;
pub mod rank;

pub use engine::{Engine, EngineOptions, KvPair, Policy, StepInput};
pub use rank::{
    evict_lowest, evict_to_budget, protected_count, pyramid_budget, rank_candidates, Candidate, RankScore,
};
