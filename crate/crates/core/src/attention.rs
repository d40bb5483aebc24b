//! Single-query attention over a cache.
//!
//! [`naive_attention`] is the dense reference. [`tiled_attention`] walks the
//! compacted cache in blocks of `b` entries per head, dequantizing INT8
//! entries as it reads, and keeps an online softmax state (running max,
//! normalizer, weighted accumulator) so the result matches the dense
//! computation. Scores use the same `q . k / sqrt(head_dim)` expression and
//! summation order in both paths, so a single block reproduces the dense
//! result bit for bit.

use crate::error::{Error, Result};
use crate::kv_cache::LayerCache;

/// Per-head attention weights over cache entries, `[heads x len]`.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionRows {
    pub heads: usize,
    pub len: usize,
    pub weights: Vec<f64>,
}

impl AttentionRows {
    pub fn new(heads: usize, len: usize, weights: Vec<f64>) -> Result<Self> {
        if weights.len() != heads * len {
            return Err(Error::Shape(format!(
                "{} weights for {heads} heads x {len} entries",
                weights.len()
            )));
        }
        Ok(Self { heads, len, weights })
    }

    pub fn uniform(heads: usize, len: usize) -> Self {
        let w = if len == 0 { 0.0 } else { 1.0 / len as f64 };
        Self {
            heads,
            len,
            weights: vec![w; heads * len],
        }
    }

    pub fn row(&self, h: usize) -> &[f64] {
        &self.weights[h * self.len..(h + 1) * self.len]
    }

    /// Mean over heads for each entry.
    pub fn head_mean(&self) -> Vec<f64> {
        let mut mean = vec![0.0; self.len];
        for h in 0..self.heads {
            for (m, &w) in mean.iter_mut().zip(self.row(h)) {
                *m += w;
            }
        }
        let inv = 1.0 / self.heads as f64;
        mean.iter_mut().for_each(|m| *m *= inv);
        mean
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttentionOutput {
    /// `[heads x head_dim]`.
    pub output: Vec<f64>,
    pub rows: AttentionRows,
}

/// Running state of a blockwise softmax for one head.
#[derive(Debug, Clone, PartialEq)]
pub struct OnlineSoftmaxState {
    pub running_max: f64,
    pub normalizer: f64,
    /// Sum of `exp(s_i - running_max) * v_i` so far.
    pub accumulator: Vec<f64>,
}

impl OnlineSoftmaxState {
    pub fn new(head_dim: usize) -> Self {
        Self {
            running_max: f64::NEG_INFINITY,
            normalizer: 0.0,
            accumulator: vec![0.0; head_dim],
        }
    }

    /// Fold in one block: `scores[j]` pairs with `values[j * d .. (j + 1) * d]`.
    pub fn absorb(&mut self, scores: &[f64], values: &[f64]) {
        let d = self.accumulator.len();
        debug_assert_eq!(values.len(), scores.len() * d);
        let block_max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        if block_max == f64::NEG_INFINITY {
            return;
        }
        let new_max = self.running_max.max(block_max);
        let correction = (self.running_max - new_max).exp();
        let mut block_z = 0.0;
        let mut block_acc = vec![0.0; d];
        for (j, &s) in scores.iter().enumerate() {
            let e = (s - new_max).exp();
            block_z += e;
            for (a, &v) in block_acc.iter_mut().zip(&values[j * d..(j + 1) * d]) {
                *a += e * v;
            }
        }
        self.normalizer = self.normalizer * correction + block_z;
        for (a, b) in self.accumulator.iter_mut().zip(block_acc) {
            *a = *a * correction + b;
        }
        self.running_max = new_max;
    }

    pub fn finish(&self) -> Vec<f64> {
        self.accumulator.iter().map(|a| a / self.normalizer).collect()
    }
}

#[inline]
fn score(q: &[f64], k: &[f64], inv_sqrt_d: f64) -> f64 {
    let mut dot = 0.0;
    for (a, b) in q.iter().zip(k) {
        dot += a * b;
    }
    dot * inv_sqrt_d
}

/// Dense attention. `keys` and `values` are `[n x heads x head_dim]`.
pub fn naive_attention(
    query: &[f64],
    keys: &[f64],
    values: &[f64],
    heads: usize,
    head_dim: usize,
) -> Result<AttentionOutput> {
    let lanes = heads * head_dim;
    if query.len() != lanes || keys.len() != values.len() || !keys.len().is_multiple_of(lanes) {
        return Err(Error::Shape(format!(
            "query {} / keys {} / values {} inconsistent with {heads}x{head_dim}",
            query.len(),
            keys.len(),
            values.len()
        )));
    }
    let n = keys.len() / lanes;
    if n == 0 {
        return Err(Error::EmptyCache);
    }
    let inv_sqrt_d = 1.0 / (head_dim as f64).sqrt();
    let mut output = vec![0.0; lanes];
    let mut weights = vec![0.0; heads * n];
    for h in 0..heads {
        let q = &query[h * head_dim..(h + 1) * head_dim];
        let lane = |i: usize| i * lanes + h * head_dim..i * lanes + (h + 1) * head_dim;
        let scores: Vec<f64> = (0..n).map(|i| score(q, &keys[lane(i)], inv_sqrt_d)).collect();
        let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
        let mut z = 0.0;
        let mut acc = vec![0.0; head_dim];
        for (i, &e) in exps.iter().enumerate() {
            z += e;
            for (a, &v) in acc.iter_mut().zip(&values[lane(i)]) {
                *a += e * v;
            }
        }
        for (o, a) in output[h * head_dim..(h + 1) * head_dim].iter_mut().zip(&acc) {
            *o = a / z;
        }
        for (w, e) in weights[h * n..(h + 1) * n].iter_mut().zip(&exps) {
            *w = e / z;
        }
    }
    Ok(AttentionOutput {
        output,
        rows: AttentionRows { heads, len: n, weights },
    })
}

/// Blockwise attention over `cache` with block size `block`.
pub fn tiled_attention(query: &[f64], cache: &LayerCache, block: usize) -> Result<AttentionOutput> {
    let (heads, d) = (cache.heads(), cache.head_dim());
    if query.len() != heads * d {
        return Err(Error::Shape(format!(
            "query has {} elements, cache expects {}",
            query.len(),
            heads * d
        )));
    }
    if block == 0 {
        return Err(Error::InvalidInput("block size must be >= 1".into()));
    }
    let n = cache.len();
    if n == 0 {
        return Err(Error::EmptyCache);
    }
    let inv_sqrt_d = 1.0 / (d as f64).sqrt();
    let mut output = vec![0.0; heads * d];
    let mut weights = vec![0.0; heads * n];
    let mut kbuf = vec![0.0; d];
    let mut vblock = vec![0.0; block.min(n) * d];
    for h in 0..heads {
        let q = &query[h * d..(h + 1) * d];
        let head_scores = &mut weights[h * n..(h + 1) * n];
        let mut state = OnlineSoftmaxState::new(d);
        for start in (0..n).step_by(block) {
            let end = (start + block).min(n);
            for i in start..end {
                cache.read_key_head(i, h, &mut kbuf);
                head_scores[i] = score(q, &kbuf, inv_sqrt_d);
                let j = i - start;
                cache.read_value_head(i, h, &mut vblock[j * d..(j + 1) * d]);
            }
            state.absorb(&head_scores[start..end], &vblock[..(end - start) * d]);
        }
        for s in head_scores.iter_mut() {
            *s = (*s - state.running_max).exp() / state.normalizer;
        }
        output[h * d..(h + 1) * d].copy_from_slice(&state.finish());
    }
    Ok(AttentionOutput {
        output,
        rows: AttentionRows { heads, len: n, weights },
    })
}

/// `max |a - b| / max |b|` (normwise relative error).
pub fn max_relative_error(a: &[f64], b: &[f64]) -> f64 {
    let scale = b.iter().fold(0.0f64, |m, x| m.max(x.abs())).max(f64::MIN_POSITIVE);
    a.iter().zip(b).fold(0.0f64, |m, (x, y)| m.max((x - y).abs())) / scale
}
