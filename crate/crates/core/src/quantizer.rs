//! Symmetric INT8 quantization with per-(head, channel) scales.
//!
//! A segment is the set of tokens quantized together. Each lane (one head,
//! one channel) stores its absolute maximum; the scale is `absmax / 127`
//! and codes are `round_half_away(x / scale)` clamped to `[-127, 127]`.
//! Keeping the absmax rather than the divided scale makes the lane maximum
//! reconstruct exactly.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kv_cache::{LayerCache, Precision};

pub const INT8_LIMIT: f64 = 127.0;

/// Per-lane scale data for one tensor (K or V) of one segment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LaneScales {
    absmax: Vec<f32>,
}

impl LaneScales {
    pub fn from_absmax(absmax: Vec<f32>) -> Self {
        Self { absmax }
    }

    pub fn lanes(&self) -> usize {
        self.absmax.len()
    }

    pub fn absmax(&self) -> &[f32] {
        &self.absmax
    }

    /// `max |x| / 127` for `lane`.
    pub fn scale(&self, lane: usize) -> f64 {
        self.absmax[lane] as f64 / INT8_LIMIT
    }

    pub fn scales(&self) -> Vec<f64> {
        (0..self.lanes()).map(|l| self.scale(l)).collect()
    }

    #[inline]
    pub fn dequantize_code(&self, lane: usize, code: i8) -> f64 {
        code as f64 * self.absmax[lane] as f64 / INT8_LIMIT
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct QuantizedSegment {
    /// `[n_tokens x lanes]`, token-major.
    pub codes: Vec<i8>,
    pub scales: LaneScales,
}

#[inline]
fn encode(x: f32, absmax: f32) -> i8 {
    if absmax == 0.0 {
        return 0;
    }
    // x * 127 is exact in f64, so ties land exactly on .5.
    let q = (x as f64 * INT8_LIMIT / absmax as f64).round();
    q.clamp(-INT8_LIMIT, INT8_LIMIT) as i8
}

/// Quantize `values` laid out as `[n_tokens x lanes]`.
pub fn quantize_segment(values: &[f32], lanes: usize) -> Result<QuantizedSegment> {
    if lanes == 0 || values.is_empty() || !values.len().is_multiple_of(lanes) {
        return Err(Error::Shape(format!(
            "segment of {} values does not tile {} lanes with at least one token",
            values.len(),
            lanes
        )));
    }
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidInput("non-finite value in segment".into()));
    }
    let mut absmax = vec![0.0f32; lanes];
    for row in values.chunks_exact(lanes) {
        for (m, &x) in absmax.iter_mut().zip(row) {
            *m = m.max(x.abs());
        }
    }
    let codes = values
        .chunks_exact(lanes)
        .flat_map(|row| row.iter().zip(&absmax).map(|(&x, &m)| encode(x, m)))
        .collect();
    Ok(QuantizedSegment {
        codes,
        scales: LaneScales::from_absmax(absmax),
    })
}

/// Codes `[n_tokens x lanes]` back to reals.
pub fn dequantize(codes: &[i8], scales: &LaneScales) -> Result<Vec<f64>> {
    let lanes = scales.lanes();
    if lanes == 0 || !codes.len().is_multiple_of(lanes) {
        return Err(Error::Shape(format!(
            "{} codes do not tile {} lanes",
            codes.len(),
            lanes
        )));
    }
    Ok(codes
        .chunks_exact(lanes)
        .flat_map(|row| row.iter().enumerate().map(|(l, &c)| scales.dequantize_code(l, c)))
        .collect())
}

/// Quantize every HIGH entry with `generation_step <= current_step - w`.
///
/// All such entries become one new segment, but only when at least
/// `min_group` are pending; otherwise nothing changes. Returns the number
/// of entries quantized.
pub fn apply_fp16_window(cache: &mut LayerCache, w: usize, current_step: i64, min_group: usize) -> usize {
    let cutoff = current_step as i128 - w as i128;
    let pending: Vec<usize> = (0..cache.len())
        .filter(|&i| {
            cache.precision(i) == Precision::High && (cache.meta(i).generation_step as i128) <= cutoff
        })
        .collect();
    if pending.is_empty() || pending.len() < min_group.max(1) {
        return 0;
    }
    cache.quantize_entries(&pending);
    pending.len()
}
