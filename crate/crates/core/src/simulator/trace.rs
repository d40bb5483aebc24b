//! Synthetic traces: scripted confidence levels, attention spikes on a planted
//! needle, and seeded K/V.
//!
//! A trace is stored compactly. Each step names a target confidence (or
//! explicit logits), the positions that receive fixed attention mass, and two
//! seeds; attention rows are materialized against whatever the cache holds
//! when the step runs, so the same trace can drive any policy.
//!
//! JSONL layout: the first line is `{"header": {...}}`, every following line
//! is `{"step": {...}}`.

use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use crate::attention::AttentionRows;
use crate::confidence::{confidence_score, ConfidenceWeights};
use crate::config::ModelShape;
use crate::error::{Error, Result};
use crate::kv_cache::LayerCache;
use crate::policy::KvPair;
use crate::rng::{mix64, SeededRng};

/// Target confidence for "confident" scripted steps.
pub const HIGH_TARGET: f64 = 0.9;
/// Target confidence for "uncertain" scripted steps.
pub const LOW_TARGET: f64 = 0.3;
/// Maximum allowed gap between a target and the achieved score.
pub const INVERSION_TOLERANCE: f64 = 1e-4;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum ConfidenceProfile {
    AlwaysHigh,
    AlwaysLow,
    /// `low_run` uncertain steps followed by one confident step, repeating.
    Alternating { low_run: usize },
    /// Each step is confident with probability `high_prob`, except the query
    /// step, which is always uncertain.
    QueryDip { high_prob: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Needle {
    pub position: u64,
    pub query_step: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Spike {
    pub position: u64,
    pub mass: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceHeader {
    pub shape: ModelShape,
    pub prefill: usize,
    /// Seeds the prefill K/V.
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub needle: Option<Needle>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceStep {
    pub step: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub target_confidence: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub logits: Option<Vec<f64>>,
    /// Token that gets the top mass when inverting a target confidence.
    #[serde(default)]
    pub top_token: usize,
    #[serde(default)]
    pub spikes: Vec<Spike>,
    pub background_seed: u64,
    pub kv_seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
enum TraceLine {
    Header(TraceHeader),
    Step(TraceStep),
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticTrace {
    pub header: TraceHeader,
    pub steps: Vec<TraceStep>,
}

/// Parameters for [`generate_needle_trace`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TraceParams {
    pub shape: ModelShape,
    pub prefill: usize,
    pub length: usize,
    pub needle: Option<Needle>,
    pub spike_mass: f64,
    /// Spike the needle every `spike_period` steps (and at the query step).
    pub spike_period: usize,
    pub profile: ConfidenceProfile,
}

impl TraceParams {
    pub fn new(shape: ModelShape, prefill: usize, length: usize, profile: ConfidenceProfile) -> Self {
        Self {
            shape,
            prefill,
            length,
            needle: None,
            spike_mass: 0.5,
            spike_period: 8,
            profile,
        }
    }
}

/// Uniform in `[0, 1)` from a hash of the inputs.
pub fn hash01(seed: u64, layer: usize, head: usize, position: u64) -> f64 {
    let h = mix64(mix64(mix64(seed ^ layer as u64) ^ head as u64) ^ position);
    (h >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
}

/// `p1` on `top`, the remaining mass spread evenly over the other tokens.
pub fn two_mass(p1: f64, vocab: usize, top: usize) -> Vec<f64> {
    let rest = (1.0 - p1) / (vocab - 1) as f64;
    let mut d = vec![rest; vocab];
    d[top] = p1;
    d
}

/// Top mass of the two-mass distribution whose confidence score is within
/// [`INVERSION_TOLERANCE`] of `target`.
///
/// The score is increasing in `p1`, so plain bisection on `p1` converges.
pub fn invert_top_mass(target: f64, vocab: usize, weights: ConfidenceWeights) -> Result<f64> {
    if vocab < 2 {
        return Err(Error::InvalidInput(format!("vocabulary {vocab} < 2")));
    }
    let score = |p1: f64| confidence_score(&two_mass(p1, vocab, 0), weights).map(|f| f.score);
    let (mut lo, mut hi) = (1.0 / vocab as f64, 1.0 - 1e-9);
    for _ in 0..64 {
        let mid = 0.5 * (lo + hi);
        if score(mid)? < target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let best = if (score(lo)? - target).abs() <= (score(hi)? - target).abs() { lo } else { hi };
    let achieved = score(best)?;
    if (achieved - target).abs() > INVERSION_TOLERANCE {
        return Err(Error::InvalidInput(format!(
            "confidence {target} unreachable with vocabulary {vocab} (closest {achieved})"
        )));
    }
    Ok(best)
}

/// [`two_mass`] at the top mass found by [`invert_top_mass`].
pub fn invert_confidence(target: f64, vocab: usize, top: usize, weights: ConfidenceWeights) -> Result<Vec<f64>> {
    if top >= vocab {
        return Err(Error::InvalidInput(format!("top token {top} with vocabulary {vocab}")));
    }
    Ok(two_mass(invert_top_mass(target, vocab, weights)?, vocab, top))
}

/// Deterministic K/V for one token from a seed.
pub fn seeded_kv(seed: u64, shape: ModelShape) -> Vec<KvPair> {
    (0..shape.num_layers)
        .map(|l| {
            let mut rng = SeededRng::derive(seed, l as u64);
            let mut draw = || (0..shape.lanes()).map(|_| rng.normal() as f32).collect::<Vec<_>>();
            let k = draw();
            let v = draw();
            KvPair { k, v }
        })
        .collect()
}

/// Attention rows for one step against the current cache: spiked positions
/// that are present get their mass, the rest share what is left with
/// hash-derived weights.
pub fn materialize_rows(step: &TraceStep, layer: usize, cache: &LayerCache) -> AttentionRows {
    let (heads, n) = (cache.heads(), cache.len());
    if n == 0 {
        return AttentionRows::uniform(heads, 0);
    }
    let spike_of = |pos: u64| step.spikes.iter().find(|s| s.position == pos).map(|s| s.mass);
    let spiked: Vec<Option<f64>> = cache.metas().iter().map(|m| spike_of(m.original_position)).collect();
    let spike_total: f64 = spiked.iter().flatten().sum();
    let free = spiked.iter().filter(|s| s.is_none()).count();
    let mut weights = vec![0.0; heads * n];
    for h in 0..heads {
        let row = &mut weights[h * n..(h + 1) * n];
        if free == 0 {
            for (w, s) in row.iter_mut().zip(&spiked) {
                *w = s.unwrap_or(0.0) / spike_total;
            }
            continue;
        }
        let bg: Vec<f64> = cache
            .metas()
            .iter()
            .map(|m| 0.5 + hash01(step.background_seed, layer, h, m.original_position))
            .collect();
        let bg_total: f64 = bg.iter().zip(&spiked).filter(|(_, s)| s.is_none()).map(|(b, _)| b).sum();
        let remaining = (1.0 - spike_total).max(0.0);
        for ((w, s), b) in row.iter_mut().zip(&spiked).zip(&bg) {
            *w = match s {
                Some(mass) => *mass,
                None => remaining * b / bg_total,
            };
        }
    }
    AttentionRows { heads, len: n, weights }
}

fn profile_is_high(profile: ConfidenceProfile, t: usize, query_step: Option<usize>, rng: &mut SeededRng) -> bool {
    match profile {
        ConfidenceProfile::AlwaysHigh => true,
        ConfidenceProfile::AlwaysLow => false,
        ConfidenceProfile::Alternating { low_run } => t % (low_run + 1) == low_run,
        ConfidenceProfile::QueryDip { high_prob } => {
            let draw = rng.next_f64() < high_prob;
            draw && Some(t) != query_step
        }
    }
}

/// Scripted trace with an optional planted needle.
pub fn generate_needle_trace(rng: &mut SeededRng, params: &TraceParams) -> Result<SyntheticTrace> {
    params.shape.validate()?;
    if !(params.spike_mass > 0.0 && params.spike_mass <= 1.0) {
        return Err(Error::InvalidInput(format!("spike mass {} not in (0, 1]", params.spike_mass)));
    }
    if params.spike_period == 0 {
        return Err(Error::InvalidInput("spike period must be >= 1".into()));
    }
    if let ConfidenceProfile::QueryDip { high_prob } = params.profile {
        if !(0.0..=1.0).contains(&high_prob) {
            return Err(Error::InvalidInput(format!("high_prob {high_prob} not in [0, 1]")));
        }
    }
    if let Some(n) = params.needle {
        if n.query_step >= params.length {
            return Err(Error::InvalidInput(format!(
                "query step {} beyond trace length {}",
                n.query_step, params.length
            )));
        }
        if n.position >= (params.prefill + n.query_step) as u64 {
            return Err(Error::InvalidInput(format!(
                "needle position {} is not in the cache by query step {}",
                n.position, n.query_step
            )));
        }
    }
    let header = TraceHeader {
        shape: params.shape,
        prefill: params.prefill,
        seed: rng.next_u64(),
        needle: params.needle,
    };
    let query = params.needle.map(|n| n.query_step);
    let steps = (0..params.length)
        .map(|t| {
            let high = profile_is_high(params.profile, t, query, rng);
            let spikes = match params.needle {
                Some(n) if n.position < (params.prefill + t) as u64
                    && (t % params.spike_period == 0 || t == n.query_step) =>
                {
                    vec![Spike {
                        position: n.position,
                        mass: params.spike_mass,
                    }]
                }
                _ => Vec::new(),
            };
            TraceStep {
                step: t,
                target_confidence: Some(if high { HIGH_TARGET } else { LOW_TARGET }),
                logits: None,
                top_token: rng.below(params.shape.vocab_size as u64) as usize,
                spikes,
                background_seed: rng.next_u64(),
                kv_seed: rng.next_u64(),
            }
        })
        .collect();
    Ok(SyntheticTrace { header, steps })
}

impl SyntheticTrace {
    pub fn write_jsonl<W: Write>(&self, mut w: W) -> Result<()> {
        serde_json::to_writer(&mut w, &TraceLine::Header(self.header.clone()))?;
        w.write_all(b"\n")?;
        for s in &self.steps {
            serde_json::to_writer(&mut w, &TraceLine::Step(s.clone()))?;
            w.write_all(b"\n")?;
        }
        Ok(())
    }

    pub fn read_jsonl<R: BufRead>(r: R) -> Result<Self> {
        let mut header = None;
        let mut steps = Vec::new();
        for (n, line) in r.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let parsed: TraceLine = serde_json::from_str(&line)
                .map_err(|e| Error::InvalidInput(format!("trace line {}: {e}", n + 1)))?;
            match (parsed, &header) {
                (TraceLine::Header(h), None) => header = Some(h),
                (TraceLine::Header(_), Some(_)) => {
                    return Err(Error::InvalidInput(format!("trace line {}: second header", n + 1)))
                }
                (TraceLine::Step(_), None) => {
                    return Err(Error::InvalidInput("trace must start with a header line".into()))
                }
                (TraceLine::Step(s), Some(_)) => {
                    if s.step != steps.len() {
                        return Err(Error::InvalidInput(format!(
                            "trace line {}: step {} out of order",
                            n + 1,
                            s.step
                        )));
                    }
                    if s.spikes.iter().map(|x| x.mass).sum::<f64>() > 1.0 + 1e-12 {
                        return Err(Error::InvalidInput(format!("trace line {}: spike mass exceeds 1", n + 1)));
                    }
                    steps.push(s);
                }
            }
        }
        let header = header.ok_or_else(|| Error::InvalidInput("empty trace".into()))?;
        header.shape.validate()?;
        Ok(Self { header, steps })
    }
}
