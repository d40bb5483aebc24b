//! Confidence-gated KV-cache management.
//!
//! The engine turns each decoding step's next-token distribution into a
//! scalar confidence score, uses it to pick a tight or loose cache budget,
//! and evicts the lowest-ranked entries (EMA attention mass blended with
//! recency) while always keeping a protected window of recent tokens.
//! Retained entries older than an FP16 window are stored as symmetric INT8
//! with per-(head, channel) scales, and attention reads the compacted cache
//! block by block with an exact online softmax.
//!
//! Module map:
//!
//! - [`config`], [`rng`]: shared configuration, model shape and the seeded generator.
//! - [`confidence`]: softmax, confidence features and the budget rule.
//! - [`kv_cache`]: per-layer storage, metadata, compaction, byte accounting.
//! - [`quantizer`]: INT8 segments and the FP16 window.
//! - [`attention`]: naive and tiled (online softmax) attention.
//! - [`policy`]: ranking, eviction, pyramid budgets and the per-step engine.
//! - [`baselines`]: sliding window, heavy hitter and matched-rate replays.
//! - [`simulator`]: tiny reference transformer, synthetic needle traces, decode loop.
//! - [`analysis`]: KL, Pearson, context ablation and trace summaries.

pub mod analysis;
pub mod attention;
pub mod baselines;
pub mod confidence;
pub mod config;
pub mod error;
pub mod kv_cache;
pub mod policy;
pub mod quantizer;
pub mod record;
pub mod rng;
pub mod simulator;

pub use config::{ModelShape, PolicyConfig, Profile, SamplingMode};
pub use error::{Error, Result};
pub use rng::SeededRng;
