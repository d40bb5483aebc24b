//! KL divergence, Pearson correlation, the context-ablation experiment and
//! trace summaries.

use serde::{Deserialize, Serialize};

use crate::confidence::{confidence_score, ConfidenceWeights};
use crate::error::{Error, Result};
use crate::policy::Engine;
use crate::record::StepRecord;
use crate::rng::SeededRng;
use crate::simulator::driver::{prefill, Driver, ModelDriver};

/// Floor applied to `q` before taking logs.
pub const KL_FLOOR: f64 = 1e-12;
pub const HISTOGRAM_BINS: usize = 20;
pub const DECILES: usize = 10;

/// `sum p_i ln(p_i / max(q_i, floor))` in nats; zero-probability terms of `p`
/// contribute nothing. Rounding can push an identical pair a hair below
/// zero, so the result is clamped at 0.
pub fn kl_divergence(p: &[f64], q: &[f64]) -> Result<f64> {
    if p.len() != q.len() {
        return Err(Error::Shape(format!("distributions of length {} and {}", p.len(), q.len())));
    }
    let kl: f64 = p
        .iter()
        .zip(q)
        .filter(|(&pi, _)| pi > 0.0)
        .map(|(&pi, &qi)| pi * (pi / qi.max(KL_FLOOR)).ln())
        .sum();
    Ok(kl.max(0.0))
}

/// Sample correlation coefficient.
pub fn pearson(xs: &[f64], ys: &[f64]) -> Result<f64> {
    if xs.len() != ys.len() {
        return Err(Error::Shape(format!("series of length {} and {}", xs.len(), ys.len())));
    }
    let n = xs.len();
    if n < 3 {
        return Err(Error::Undefined(format!("pearson needs at least 3 pairs, got {n}")));
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / n as f64;
    let (mx, my) = (mean(xs), mean(ys));
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (&x, &y) in xs.iter().zip(ys) {
        let (dx, dy) = (x - mx, y - my);
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(Error::Undefined("correlation with a constant series".into()));
    }
    Ok((sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AblationPair {
    pub step: usize,
    pub confidence: f64,
    pub kl: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DecileBin {
    pub index: usize,
    pub count: usize,
    pub mean_confidence: f64,
    pub mean_kl: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationResult {
    pub ablate_r: usize,
    pub pairs: Vec<AblationPair>,
    /// `None` when either series is constant.
    pub pearson: Option<f64>,
    pub bins: Vec<DecileBin>,
    /// Sampled steps skipped because a layer held `ablate_r` entries or fewer.
    pub skipped: usize,
}

/// Equal-count bins over pairs sorted by confidence.
pub fn decile_bins(pairs: &[AblationPair]) -> Vec<DecileBin> {
    let mut sorted = pairs.to_vec();
    sorted.sort_by(|a, b| a.confidence.total_cmp(&b.confidence).then(a.step.cmp(&b.step)));
    let n = sorted.len();
    (0..DECILES)
        .filter_map(|k| {
            let chunk = &sorted[k * n / DECILES..(k + 1) * n / DECILES];
            if chunk.is_empty() {
                return None;
            }
            let m = chunk.len() as f64;
            Some(DecileBin {
                index: k,
                count: chunk.len(),
                mean_confidence: chunk.iter().map(|p| p.confidence).sum::<f64>() / m,
                mean_kl: chunk.iter().map(|p| p.kl).sum::<f64>() / m,
            })
        })
        .collect()
}

/// Decode `steps` steps with `engine`, and at `samples` steps drawn
/// uniformly without replacement also rerun the forward pass on a copy of
/// the caches with the newest `ablate_r` entries removed, recording
/// `KL(p_full || p_ablated)` against the step's confidence.
///
/// Only steps whose full context exceeds `ablate_r` are eligible. The live
/// engine evolves exactly as in a plain decode run.
pub fn ablation_experiment(
    engine: &mut Engine,
    driver: &mut ModelDriver,
    steps: usize,
    ablate_r: usize,
    samples: usize,
    rng: &mut SeededRng,
) -> Result<AblationResult> {
    let context = driver.prefill_len();
    let eligible: Vec<usize> = (0..steps).filter(|t| context + t > ablate_r).collect();
    if eligible.is_empty() {
        return Err(Error::InvalidInput(format!(
            "no step has more than {ablate_r} tokens of context"
        )));
    }
    if samples > eligible.len() {
        return Err(Error::InvalidInput(format!(
            "{samples} samples requested but only {} eligible steps",
            eligible.len()
        )));
    }
    let mut sampled = vec![false; steps];
    for i in rng.sample_without_replacement(eligible.len(), samples) {
        sampled[eligible[i]] = true;
    }

    let weights = ConfidenceWeights::from(engine.config());
    prefill(engine, driver)?;
    let mut pairs = Vec::with_capacity(samples);
    let mut skipped = 0;
    for (t, &ablate) in sampled.iter().enumerate() {
        let input = driver.step_input(t, engine.caches())?;
        if ablate {
            if engine.caches().iter().any(|c| c.len() <= ablate_r) {
                skipped += 1;
            } else {
                let mut copies = engine.caches().to_vec();
                copies.iter_mut().for_each(|c| {
                    c.drop_newest(ablate_r);
                });
                let out = driver.model.forward(driver.current_token(), &copies, driver.path)?;
                let full = engine.sampling_distribution(&input.logits)?;
                let ablated = engine.sampling_distribution(&out.logits)?;
                pairs.push(AblationPair {
                    step: t,
                    confidence: confidence_score(&full, weights)?.score,
                    kl: kl_divergence(&full, &ablated)?,
                });
            }
        }
        let (_, token) = engine.step(&input)?;
        driver.observe_token(token);
    }
    if pairs.is_empty() {
        return Err(Error::InvalidInput(format!(
            "every sampled step had at most {ablate_r} cached tokens"
        )));
    }
    let cs: Vec<f64> = pairs.iter().map(|p| p.confidence).collect();
    let kls: Vec<f64> = pairs.iter().map(|p| p.kl).collect();
    Ok(AblationResult {
        ablate_r,
        pearson: pearson(&cs, &kls).ok(),
        bins: decile_bins(&pairs),
        pairs,
        skipped,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceSummary {
    pub steps: usize,
    /// Mean over steps of the mean per-layer length after append.
    pub mean_len: f64,
    pub max_len: usize,
    /// Fraction of steps that evicted anything.
    pub eviction_rate: f64,
    pub total_evicted: usize,
    pub peak_bytes: usize,
    pub mean_bytes: f64,
    pub final_bytes: usize,
    /// INT8 share of the retained entries after the last step's window pass
    /// (the token appended afterwards is not counted).
    pub quantized_fraction: f64,
    pub mean_confidence: f64,
    /// Fraction of steps in the tight tier.
    pub high_fraction: f64,
    /// Counts per confidence bin `[k/20, (k+1)/20)`; the last bin includes 1.
    pub confidence_histogram: Vec<usize>,
    /// Fraction of needle checks that found the needle, if the trace has any.
    pub needle_retention: Option<f64>,
}

pub fn summarize_trace(records: &[StepRecord]) -> Result<TraceSummary> {
    let last = records
        .last()
        .ok_or_else(|| Error::InvalidInput("cannot summarize an empty trace".into()))?;
    let n = records.len() as f64;
    let mut histogram = vec![0usize; HISTOGRAM_BINS];
    for r in records {
        let bin = ((r.confidence.score * HISTOGRAM_BINS as f64).floor() as usize).min(HISTOGRAM_BINS - 1);
        histogram[bin] += 1;
    }
    let checks: Vec<bool> = records.iter().filter_map(|r| r.needle_present).collect();
    let int8: usize = last.layers.iter().map(|l| l.int8_entries).sum();
    let entries: usize = last.layers.iter().map(|l| l.len_after_evict).sum();
    Ok(TraceSummary {
        steps: records.len(),
        mean_len: records.iter().map(StepRecord::mean_len).sum::<f64>() / n,
        max_len: records.iter().map(StepRecord::max_len).max().unwrap_or(0),
        eviction_rate: records.iter().filter(|r| r.evicted() > 0).count() as f64 / n,
        total_evicted: records.iter().map(StepRecord::evicted).sum(),
        peak_bytes: records.iter().map(|r| r.memory_bytes).max().unwrap_or(0),
        mean_bytes: records.iter().map(|r| r.memory_bytes as f64).sum::<f64>() / n,
        final_bytes: last.memory_bytes,
        quantized_fraction: if entries == 0 { 0.0 } else { int8 as f64 / entries as f64 },
        mean_confidence: records.iter().map(|r| r.confidence.score).sum::<f64>() / n,
        high_fraction: records
            .iter()
            .filter(|r| r.tier == crate::confidence::Tier::High)
            .count() as f64
            / n,
        confidence_histogram: histogram,
        needle_retention: if checks.is_empty() {
            None
        } else {
            Some(checks.iter().filter(|&&b| b).count() as f64 / checks.len() as f64)
        },
    })
}
