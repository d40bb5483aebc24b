//! Candidate ranking and budget enforcement for one layer.
//!
//! The protected window is the `P` entries with the largest original
//! positions; everything else is a candidate. Candidates are scored by
//! `s = alpha * a_hat + (1 - alpha) * r_hat`, where `a_hat` is the EMA
//! attention mass and `r_hat` the generation step, each min-max normalized
//! over the candidates of this layer (a constant feature normalizes to 0).
//! Victims are the lowest scores; ties evict the older entry first.

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kv_cache::{LayerCache, TokenMeta};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RankScore {
    pub attention_norm: f64,
    pub recency_norm: f64,
    pub composite: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Candidate {
    /// Storage index in the cache.
    pub index: usize,
    pub original_position: u64,
    pub score: RankScore,
}

/// Number of protected entries in a cache of length `len`.
pub fn protected_count(len: usize, protected_p: usize) -> usize {
    protected_p.min(len)
}

fn min_max(values: impl Iterator<Item = f64> + Clone) -> impl Fn(f64) -> f64 {
    let (lo, hi) = values.fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), x| (lo.min(x), hi.max(x)));
    let span = hi - lo;
    move |x| if span > 0.0 { (x - lo) / span } else { 0.0 }
}

/// Scores for every non-protected entry, in storage order.
pub fn rank_candidates(cache: &LayerCache, alpha: f64, protected_p: usize) -> Vec<Candidate> {
    let n = cache.len() - protected_count(cache.len(), protected_p);
    // Storage is sorted by original position, so the protected set is the tail.
    let metas = &cache.metas()[..n];
    let attn = min_max(metas.iter().map(|m| m.ema_attention));
    let recency = min_max(metas.iter().map(|m| m.generation_step as f64));
    metas
        .iter()
        .enumerate()
        .map(|(index, m)| {
            let a = attn(m.ema_attention);
            let r = recency(m.generation_step as f64);
            Candidate {
                index,
                original_position: m.original_position,
                score: RankScore {
                    attention_norm: a,
                    recency_norm: r,
                    composite: alpha * a + (1.0 - alpha) * r,
                },
            }
        })
        .collect()
}

/// Ascending by key, then older position, then storage index.
fn victim_order(a: (f64, u64, usize), b: (f64, u64, usize)) -> Ordering {
    a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2))
}

/// Evict the `count` lowest-keyed non-protected entries and compact.
pub(crate) fn evict_by_key(
    cache: &mut LayerCache,
    count: usize,
    protected_p: usize,
    key: impl Fn(usize, &TokenMeta) -> f64,
) -> Result<usize> {
    if count == 0 {
        return Ok(0);
    }
    let n = cache.len() - protected_count(cache.len(), protected_p);
    if count > n {
        return Err(Error::InvalidInput(format!(
            "cannot evict {count} entries from {n} candidates"
        )));
    }
    let mut order: Vec<(f64, u64, usize)> = cache.metas()[..n]
        .iter()
        .enumerate()
        .map(|(i, m)| (key(i, m), m.original_position, i))
        .collect();
    order.sort_by(|a, b| victim_order(*a, *b));
    let mut keep = vec![true; cache.len()];
    for &(_, _, i) in &order[..count] {
        keep[i] = false;
    }
    cache.compact(&keep)
}

/// Evict exactly `count` candidates by composite score.
pub fn evict_lowest(cache: &mut LayerCache, count: usize, protected_p: usize, alpha: f64) -> Result<usize> {
    if count == 0 {
        return Ok(0);
    }
    let scores: Vec<f64> = rank_candidates(cache, alpha, protected_p)
        .iter()
        .map(|c| c.score.composite)
        .collect();
    evict_by_key(cache, count, protected_p, |i, _| scores[i])
}

/// Shrink the cache to at most `budget` entries. No-op when it already fits.
pub fn evict_to_budget(cache: &mut LayerCache, budget: usize, protected_p: usize, alpha: f64) -> Result<usize> {
    if budget < protected_p {
        return Err(Error::InvalidInput(format!(
            "budget {budget} is smaller than the protected window {protected_p}"
        )));
    }
    if cache.len() <= budget {
        return Ok(0);
    }
    evict_lowest(cache, cache.len() - budget, protected_p, alpha)
}

/// `max(n_min, floor(n0 * beta^(layer / num_layers)))`.
pub fn pyramid_budget(layer: usize, num_layers: usize, n0: usize, beta: f64, n_min: usize) -> usize {
    let exponent = layer as f64 / num_layers as f64;
    let raw = (n0 as f64 * beta.powf(exponent)).floor() as usize;
    raw.max(n_min)
}
