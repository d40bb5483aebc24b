//! Per-layer KV storage.
//!
//! Entries live in preallocated token-major arrays `[capacity x heads x head_dim]`
//! with parallel metadata and a precision tag per entry. The valid prefix is
//! always contiguous and sorted by original position; compaction preserves
//! that order. INT8 entries keep their codes in parallel `i8` arrays and point
//! at the [`QuantSegment`] holding their scales.

use std::collections::BTreeMap;
use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use crate::attention::AttentionRows;
use crate::error::{Error, Result};
use crate::quantizer::{quantize_segment, LaneScales};

/// Tolerance on per-head attention row sums.
pub const ROW_SUM_TOLERANCE: f64 = 1e-4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct SegmentId(pub u32);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Precision {
    /// Two bytes per element in the accounting model.
    High,
    Int8(SegmentId),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TokenMeta {
    pub original_position: u64,
    /// Nonpositive for prefill tokens; `t` for the token generated at step `t`.
    pub generation_step: i64,
    pub ema_attention: f64,
    /// Sum of head-mean attention over every observation.
    pub cumulative_attention: f64,
    pub seen_once: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct QuantSegment {
    pub keys: LaneScales,
    pub values: LaneScales,
    pub member_count: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerCache {
    heads: usize,
    head_dim: usize,
    capacity: usize,
    valid_len: usize,
    keys: Vec<f32>,
    values: Vec<f32>,
    key_codes: Vec<i8>,
    value_codes: Vec<i8>,
    meta: Vec<TokenMeta>,
    precision: Vec<Precision>,
    segments: BTreeMap<SegmentId, QuantSegment>,
    next_segment: u32,
}

impl LayerCache {
    pub fn new(heads: usize, head_dim: usize) -> Self {
        Self::with_capacity(heads, head_dim, 16)
    }

    pub fn with_capacity(heads: usize, head_dim: usize, capacity: usize) -> Self {
        assert!(heads > 0 && head_dim > 0, "cache needs positive heads and head_dim");
        let capacity = capacity.max(1);
        let lanes = heads * head_dim;
        Self {
            heads,
            head_dim,
            capacity,
            valid_len: 0,
            keys: vec![0.0; capacity * lanes],
            values: vec![0.0; capacity * lanes],
            key_codes: vec![0; capacity * lanes],
            value_codes: vec![0; capacity * lanes],
            meta: Vec::with_capacity(capacity),
            precision: Vec::with_capacity(capacity),
            segments: BTreeMap::new(),
            next_segment: 0,
        }
    }

    pub fn heads(&self) -> usize {
        self.heads
    }

    pub fn head_dim(&self) -> usize {
        self.head_dim
    }

    pub fn lanes(&self) -> usize {
        self.heads * self.head_dim
    }

    pub fn len(&self) -> usize {
        self.valid_len
    }

    pub fn is_empty(&self) -> bool {
        self.valid_len == 0
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn meta(&self, i: usize) -> &TokenMeta {
        &self.meta[i]
    }

    pub fn metas(&self) -> &[TokenMeta] {
        &self.meta
    }

    pub fn metas_mut(&mut self) -> &mut [TokenMeta] {
        &mut self.meta
    }

    pub fn precision(&self, i: usize) -> Precision {
        self.precision[i]
    }

    pub fn segments(&self) -> &BTreeMap<SegmentId, QuantSegment> {
        &self.segments
    }

    pub fn segment(&self, id: SegmentId) -> Option<&QuantSegment> {
        self.segments.get(&id)
    }

    pub fn int8_len(&self) -> usize {
        self.precision.iter().filter(|p| matches!(p, Precision::Int8(_))).count()
    }

    pub fn positions(&self) -> Vec<u64> {
        self.meta.iter().map(|m| m.original_position).collect()
    }

    pub fn contains_position(&self, position: u64) -> bool {
        self.meta
            .binary_search_by_key(&position, |m| m.original_position)
            .is_ok()
    }

    fn grow(&mut self) {
        let new_cap = self.capacity * 2;
        let lanes = self.lanes();
        self.keys.resize(new_cap * lanes, 0.0);
        self.values.resize(new_cap * lanes, 0.0);
        self.key_codes.resize(new_cap * lanes, 0);
        self.value_codes.resize(new_cap * lanes, 0);
        self.capacity = new_cap;
    }

    /// Store a new HIGH-precision entry at the end of the valid prefix.
    pub fn append(&mut self, k: &[f32], v: &[f32], original_position: u64, generation_step: i64) -> Result<()> {
        let lanes = self.lanes();
        if k.len() != lanes || v.len() != lanes {
            return Err(Error::Shape(format!(
                "append expects {lanes} elements per tensor, got k={} v={}",
                k.len(),
                v.len()
            )));
        }
        if let Some(last) = self.meta.last() {
            if original_position <= last.original_position {
                return Err(Error::InvalidInput(format!(
                    "original position {original_position} does not follow {}",
                    last.original_position
                )));
            }
        }
        if self.valid_len == self.capacity {
            self.grow();
        }
        let at = self.valid_len * lanes;
        self.keys[at..at + lanes].copy_from_slice(k);
        self.values[at..at + lanes].copy_from_slice(v);
        self.meta.push(TokenMeta {
            original_position,
            generation_step,
            ema_attention: 0.0,
            cumulative_attention: 0.0,
            seen_once: false,
        });
        self.precision.push(Precision::High);
        self.valid_len += 1;
        Ok(())
    }

    /// Raw stored K lanes of a HIGH entry (`None` for INT8 entries).
    pub fn raw_key(&self, i: usize) -> Option<&[f32]> {
        let lanes = self.lanes();
        (self.precision[i] == Precision::High).then(|| &self.keys[i * lanes..(i + 1) * lanes])
    }

    pub fn raw_value(&self, i: usize) -> Option<&[f32]> {
        let lanes = self.lanes();
        (self.precision[i] == Precision::High).then(|| &self.values[i * lanes..(i + 1) * lanes])
    }

    /// Write the key of entry `i`, head `h` into `out` (`head_dim` reals),
    /// dequantizing on the fly.
    #[inline]
    pub fn read_key_head(&self, i: usize, h: usize, out: &mut [f64]) {
        self.read_head(i, h, out, true)
    }

    #[inline]
    pub fn read_value_head(&self, i: usize, h: usize, out: &mut [f64]) {
        self.read_head(i, h, out, false)
    }

    #[inline]
    fn read_head(&self, i: usize, h: usize, out: &mut [f64], key: bool) {
        let d = self.head_dim;
        let base = i * self.lanes() + h * d;
        match self.precision[i] {
            Precision::High => {
                let src = if key { &self.keys } else { &self.values };
                for (o, &x) in out.iter_mut().zip(&src[base..base + d]) {
                    *o = x as f64;
                }
            }
            Precision::Int8(id) => {
                let seg = &self.segments[&id];
                let (codes, scales) = if key {
                    (&self.key_codes, &seg.keys)
                } else {
                    (&self.value_codes, &seg.values)
                };
                for (c, o) in out.iter_mut().enumerate() {
                    *o = scales.dequantize_code(h * d + c, codes[base + c]);
                }
            }
        }
    }

    /// Dense `[len x heads x head_dim]` keys after dequantization.
    pub fn dequantized_keys(&self) -> Vec<f64> {
        self.dequantized(true)
    }

    pub fn dequantized_values(&self) -> Vec<f64> {
        self.dequantized(false)
    }

    fn dequantized(&self, key: bool) -> Vec<f64> {
        let d = self.head_dim;
        let mut out = vec![0.0; self.valid_len * self.lanes()];
        for i in 0..self.valid_len {
            for h in 0..self.heads {
                let at = i * self.lanes() + h * d;
                self.read_head(i, h, &mut out[at..at + d], key);
            }
        }
        out
    }

    /// Fold one step of head-averaged attention into each entry's EMA and
    /// cumulative mass. The first observation of an entry sets the EMA
    /// directly.
    pub fn update_attention_ema(&mut self, rows: &AttentionRows, lambda: f64) -> Result<()> {
        if rows.len != self.valid_len || rows.heads != self.heads {
            return Err(Error::Shape(format!(
                "attention rows are {}x{}, cache has {} heads and {} entries",
                rows.heads, rows.len, self.heads, self.valid_len
            )));
        }
        if self.valid_len == 0 {
            return Ok(());
        }
        for h in 0..rows.heads {
            let sum: f64 = rows.row(h).iter().sum();
            if (sum - 1.0).abs() > ROW_SUM_TOLERANCE {
                return Err(Error::InvalidInput(format!(
                    "attention row for head {h} sums to {sum}"
                )));
            }
        }
        let mean = rows.head_mean();
        for (m, &a) in self.meta.iter_mut().zip(&mean) {
            if m.seen_once {
                m.ema_attention = lambda * m.ema_attention + (1.0 - lambda) * a;
            } else {
                m.ema_attention = a;
                m.seen_once = true;
            }
            m.cumulative_attention += a;
        }
        Ok(())
    }

    /// Move surviving entries to the front, preserving order. Returns the
    /// number of entries dropped.
    pub fn compact(&mut self, keep: &[bool]) -> Result<usize> {
        if keep.len() != self.valid_len {
            return Err(Error::Shape(format!(
                "keep mask has {} entries, cache has {}",
                keep.len(),
                self.valid_len
            )));
        }
        let lanes = self.lanes();
        let mut w = 0;
        for r in 0..self.valid_len {
            if keep[r] {
                if w != r {
                    self.keys.copy_within(r * lanes..(r + 1) * lanes, w * lanes);
                    self.values.copy_within(r * lanes..(r + 1) * lanes, w * lanes);
                    self.key_codes.copy_within(r * lanes..(r + 1) * lanes, w * lanes);
                    self.value_codes.copy_within(r * lanes..(r + 1) * lanes, w * lanes);
                    self.meta[w] = self.meta[r];
                    self.precision[w] = self.precision[r];
                }
                w += 1;
            } else if let Precision::Int8(id) = self.precision[r] {
                let seg = self.segments.get_mut(&id).expect("INT8 entry references a live segment");
                seg.member_count -= 1;
                if seg.member_count == 0 {
                    self.segments.remove(&id);
                }
            }
        }
        let evicted = self.valid_len - w;
        self.meta.truncate(w);
        self.precision.truncate(w);
        self.valid_len = w;
        Ok(evicted)
    }

    /// Drop the `r` entries with the largest original positions.
    pub fn drop_newest(&mut self, r: usize) -> usize {
        let keep_n = self.valid_len.saturating_sub(r);
        let mask: Vec<bool> = (0..self.valid_len).map(|i| i < keep_n).collect();
        self.compact(&mask).expect("mask matches length")
    }

    /// Quantize the given HIGH entries into one new segment.
    pub(crate) fn quantize_entries(&mut self, indices: &[usize]) -> SegmentId {
        let lanes = self.lanes();
        let mut kbuf = Vec::with_capacity(indices.len() * lanes);
        let mut vbuf = Vec::with_capacity(indices.len() * lanes);
        for &i in indices {
            debug_assert_eq!(self.precision[i], Precision::High);
            kbuf.extend_from_slice(&self.keys[i * lanes..(i + 1) * lanes]);
            vbuf.extend_from_slice(&self.values[i * lanes..(i + 1) * lanes]);
        }
        let kq = quantize_segment(&kbuf, lanes).expect("finite cache contents");
        let vq = quantize_segment(&vbuf, lanes).expect("finite cache contents");
        let id = SegmentId(self.next_segment);
        self.next_segment += 1;
        for (j, &i) in indices.iter().enumerate() {
            let src = j * lanes..(j + 1) * lanes;
            let dst = i * lanes..(i + 1) * lanes;
            self.key_codes[dst.clone()].copy_from_slice(&kq.codes[src.clone()]);
            self.value_codes[dst.clone()].copy_from_slice(&vq.codes[src]);
            self.keys[dst.clone()].fill(0.0);
            self.values[dst].fill(0.0);
            self.precision[i] = Precision::Int8(id);
        }
        self.segments.insert(
            id,
            QuantSegment {
                keys: kq.scales,
                values: vq.scales,
                member_count: indices.len(),
            },
        );
        id
    }

    /// Analytic footprint: 2 bytes per HIGH element, 1 per INT8 element, for
    /// both K and V, plus two 4-byte scale arrays per live segment.
    pub fn memory_bytes(&self) -> usize {
        let lanes = self.lanes();
        let entries: usize = self
            .precision
            .iter()
            .map(|p| match p {
                Precision::High => lanes * 2 * 2,
                Precision::Int8(_) => lanes * 2,
            })
            .sum();
        entries + self.segments.len() * 4 * lanes * 2
    }

    /// Debug snapshot: a little-endian header `(layer_id, valid_len, heads,
    /// head_dim)` as `u32`s, then dequantized K and V as `f64` row-major
    /// `[valid_len x heads x head_dim]`, then per entry `original_position: u64`,
    /// `generation_step: i64`, `ema_attention: f64`, `cumulative_attention: f64`,
    /// `seen_once: u8`, and a precision tag `i64` (-1 for HIGH, else the segment id).
    pub fn write_snapshot<W: Write>(&self, layer_id: u32, mut w: W) -> Result<()> {
        for x in [layer_id, self.valid_len as u32, self.heads as u32, self.head_dim as u32] {
            w.write_all(&x.to_le_bytes())?;
        }
        for x in self.dequantized_keys().into_iter().chain(self.dequantized_values()) {
            w.write_all(&x.to_le_bytes())?;
        }
        for (m, p) in self.meta.iter().zip(&self.precision) {
            w.write_all(&m.original_position.to_le_bytes())?;
            w.write_all(&m.generation_step.to_le_bytes())?;
            w.write_all(&m.ema_attention.to_le_bytes())?;
            w.write_all(&m.cumulative_attention.to_le_bytes())?;
            w.write_all(&[m.seen_once as u8])?;
            let tag: i64 = match p {
                Precision::High => -1,
                Precision::Int8(SegmentId(id)) => *id as i64,
            };
            w.write_all(&tag.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn snapshot_bytes(&self, layer_id: u32) -> Vec<u8> {
        let mut buf = Vec::new();
        self.write_snapshot(layer_id, &mut buf).expect("writing to a Vec cannot fail");
        buf
    }
}

/// Decoded form of [`LayerCache::write_snapshot`].
#[derive(Debug, Clone, PartialEq)]
pub struct Snapshot {
    pub layer_id: u32,
    pub heads: usize,
    pub head_dim: usize,
    pub keys: Vec<f64>,
    pub values: Vec<f64>,
    pub meta: Vec<TokenMeta>,
    /// `None` for HIGH, `Some(segment)` for INT8.
    pub precision: Vec<Option<u32>>,
}

impl Snapshot {
    pub fn read<R: Read>(mut r: R) -> Result<Self> {
        fn take<const N: usize, R: Read>(r: &mut R) -> Result<[u8; N]> {
            let mut b = [0u8; N];
            r.read_exact(&mut b)?;
            Ok(b)
        }
        let layer_id = u32::from_le_bytes(take(&mut r)?);
        let len = u32::from_le_bytes(take(&mut r)?) as usize;
        let heads = u32::from_le_bytes(take(&mut r)?) as usize;
        let head_dim = u32::from_le_bytes(take(&mut r)?) as usize;
        let n = len * heads * head_dim;
        let read_f64s = |r: &mut R| -> Result<Vec<f64>> {
            (0..n).map(|_| Ok(f64::from_le_bytes(take(r)?))).collect()
        };
        let keys = read_f64s(&mut r)?;
        let values = read_f64s(&mut r)?;
        let mut meta = Vec::with_capacity(len);
        let mut precision = Vec::with_capacity(len);
        for _ in 0..len {
            let original_position = u64::from_le_bytes(take(&mut r)?);
            let generation_step = i64::from_le_bytes(take(&mut r)?);
            let ema_attention = f64::from_le_bytes(take(&mut r)?);
            let cumulative_attention = f64::from_le_bytes(take(&mut r)?);
            let [seen] = take::<1, _>(&mut r)?;
            let tag = i64::from_le_bytes(take(&mut r)?);
            meta.push(TokenMeta {
                original_position,
                generation_step,
                ema_attention,
                cumulative_attention,
                seen_once: seen != 0,
            });
            precision.push((tag >= 0).then_some(tag as u32));
        }
        Ok(Self {
            layer_id,
            heads,
            head_dim,
            keys,
            values,
            meta,
            precision,
        })
    }
}
