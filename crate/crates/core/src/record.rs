//! Per-step trace rows, recorded eviction schedules, and JSONL helpers.

use std::io::{BufRead, Write};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::confidence::{ConfidenceFeatures, Tier};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerStep {
    pub layer: usize,
    /// Active budget for this layer, if the policy has one.
    pub budget: Option<usize>,
    pub len_before: usize,
    pub len_after_evict: usize,
    pub len_after_append: usize,
    pub evicted: usize,
    pub quantized: usize,
    pub int8_entries: usize,
    pub bytes: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub confidence: ConfidenceFeatures,
    pub tier: Tier,
    /// Budget chosen by the confidence rule before any per-layer adjustment.
    pub budget: usize,
    pub layers: Vec<LayerStep>,
    pub memory_bytes: usize,
    pub token: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub needle_present: Option<bool>,
}

impl StepRecord {
    pub fn evicted(&self) -> usize {
        self.layers.iter().map(|l| l.evicted).sum()
    }

    pub fn max_len(&self) -> usize {
        self.layers.iter().map(|l| l.len_after_append).max().unwrap_or(0)
    }

    pub fn mean_len(&self) -> f64 {
        if self.layers.is_empty() {
            return 0.0;
        }
        self.layers.iter().map(|l| l.len_after_append as f64).sum::<f64>() / self.layers.len() as f64
    }
}

/// One eviction event: at `step`, `layer` dropped `evict_count` entries.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScheduleEvent {
    pub step: usize,
    pub layer: usize,
    pub evict_count: usize,
}

pub fn write_jsonl<T: Serialize, W: Write>(items: &[T], mut w: W) -> Result<()> {
    for item in items {
        serde_json::to_writer(&mut w, item)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

pub fn read_jsonl<T: DeserializeOwned, R: BufRead>(r: R) -> Result<Vec<T>> {
    let mut out = Vec::new();
    for (n, line) in r.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(
            serde_json::from_str(&line)
                .map_err(|e| Error::InvalidInput(format!("line {}: {e}", n + 1)))?,
        );
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_jsonl_round_trip() {
        let events = vec![
            ScheduleEvent { step: 3, layer: 0, evict_count: 5 },
            ScheduleEvent { step: 3, layer: 1, evict_count: 4 },
        ];
        let mut buf = Vec::new();
        write_jsonl(&events, &mut buf).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert_eq!(text.lines().next().unwrap(), r#"{"step":3,"layer":0,"evict_count":5}"#);
        let back: Vec<ScheduleEvent> = read_jsonl(buf.as_slice()).unwrap();
        assert_eq!(back, events);
    }

    #[test]
    fn bad_line_reports_position() {
        let err = read_jsonl::<ScheduleEvent, _>("{}\n".as_bytes()).unwrap_err();
        assert!(err.to_string().contains("line 1"));
    }
}
