//! Comparison policies on the same cache and attention substrate.
//!
//! Sliding window keeps the newest entries. Heavy hitter keeps the protected
//! window plus the entries with the largest cumulative attention. Matched-rate
//! variants replay a recorded eviction schedule (same step, layer and count)
//! and change only which entries are evicted.

use std::collections::BTreeMap;
use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kv_cache::LayerCache;
use crate::policy::rank::{evict_by_key, evict_lowest, protected_count};
use crate::record::{read_jsonl, write_jsonl, ScheduleEvent};
use crate::rng::SeededRng;

/// Keep the `window` entries with the largest original positions.
pub fn sliding_window_step(cache: &mut LayerCache, window: usize) -> Result<usize> {
    if window == 0 {
        return Err(Error::InvalidInput("sliding window must be >= 1".into()));
    }
    let len = cache.len();
    if len <= window {
        return Ok(0);
    }
    let cut = len - window;
    let keep: Vec<bool> = (0..len).map(|i| i >= cut).collect();
    cache.compact(&keep)
}

/// Shrink to `cap` by evicting the lowest cumulative-attention candidates.
pub fn heavy_hitter_step(cache: &mut LayerCache, cap: usize, protected_p: usize) -> Result<usize> {
    if cap < protected_p {
        return Err(Error::InvalidInput(format!(
            "cap {cap} is smaller than the protected window {protected_p}"
        )));
    }
    if cache.len() <= cap {
        return Ok(0);
    }
    let excess = cache.len() - cap;
    evict_by_key(cache, excess, protected_p, |_, m| m.cumulative_attention)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MatchedMode {
    Random,
    RecencyOnly,
    AttentionOnly,
}

impl MatchedMode {
    pub fn name(self) -> &'static str {
        match self {
            MatchedMode::Random => "random",
            MatchedMode::RecencyOnly => "recency",
            MatchedMode::AttentionOnly => "attention",
        }
    }
}

/// A recorded schedule replayed with a different victim rule.
#[derive(Debug, Clone)]
pub struct MatchedRatePolicy {
    mode: MatchedMode,
    events: BTreeMap<(usize, usize), usize>,
    consumed: usize,
    rng: SeededRng,
}

impl MatchedRatePolicy {
    pub fn mode(&self) -> MatchedMode {
        self.mode
    }

    /// Total entries the schedule evicts.
    pub fn scheduled_total(&self) -> usize {
        self.events.values().sum()
    }

    /// Events not yet replayed.
    pub fn remaining(&self) -> usize {
        self.events.len() - self.consumed
    }

    /// Evict the scheduled count for `(step, layer)`, or nothing if there is
    /// no event. Errors if the cache cannot supply that many candidates.
    pub fn apply(&mut self, step: usize, layer: usize, cache: &mut LayerCache, protected_p: usize) -> Result<usize> {
        let Some(&count) = self.events.get(&(step, layer)) else {
            return Ok(0);
        };
        let candidates = cache.len() - protected_count(cache.len(), protected_p);
        if count > candidates {
            return Err(Error::Schedule(format!(
                "step {step} layer {layer}: scheduled {count} evictions but only {candidates} candidates"
            )));
        }
        self.consumed += 1;
        match self.mode {
            MatchedMode::Random => {
                let victims = self.rng.sample_without_replacement(candidates, count);
                let mut keep = vec![true; cache.len()];
                for v in victims {
                    keep[v] = false;
                }
                cache.compact(&keep)
            }
            MatchedMode::RecencyOnly => evict_lowest(cache, count, protected_p, 0.0),
            MatchedMode::AttentionOnly => evict_lowest(cache, count, protected_p, 1.0),
        }
    }
}

/// Build a replay policy. Duplicate `(step, layer)` events are an error.
pub fn matched_rate_variant(schedule: &[ScheduleEvent], mode: MatchedMode, rng: SeededRng) -> Result<MatchedRatePolicy> {
    let mut events = BTreeMap::new();
    for e in schedule {
        if e.evict_count == 0 {
            continue;
        }
        if events.insert((e.step, e.layer), e.evict_count).is_some() {
            return Err(Error::Schedule(format!(
                "duplicate event for step {} layer {}",
                e.step, e.layer
            )));
        }
    }
    Ok(MatchedRatePolicy {
        mode,
        events,
        consumed: 0,
        rng,
    })
}

pub fn write_schedule<W: Write>(schedule: &[ScheduleEvent], w: W) -> Result<()> {
    write_jsonl(schedule, w)
}

pub fn read_schedule<R: BufRead>(r: R) -> Result<Vec<ScheduleEvent>> {
    read_jsonl(r)
}
