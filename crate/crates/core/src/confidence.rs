//! Confidence estimation from the next-token distribution and the budget rule.
//!
//! `c = w_H (1 - H/ln V) + w_m sigmoid(ln p1 - ln p2) + w_p p1`, with entropy in
//! nats so the normalizer shares its base.

use serde::{Deserialize, Serialize};

use crate::config::PolicyConfig;
use crate::error::{Error, Result};

/// Floor for the runner-up probability when fewer than two entries are nonzero.
pub const SECOND_PROB_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConfidenceWeights {
    pub entropy: f64,
    pub margin: f64,
    pub top: f64,
}

impl Default for ConfidenceWeights {
    fn default() -> Self {
        Self {
            entropy: 0.4,
            margin: 0.3,
            top: 0.3,
        }
    }
}

impl From<&PolicyConfig> for ConfidenceWeights {
    fn from(cfg: &PolicyConfig) -> Self {
        Self {
            entropy: cfg.w_entropy,
            margin: cfg.w_margin,
            top: cfg.w_top,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConfidenceFeatures {
    /// Entropy divided by `ln V`, in `[0, 1]`.
    pub entropy_norm: f64,
    /// `ln p1 - ln p2` in nats.
    pub margin: f64,
    pub margin_sig: f64,
    pub top_prob: f64,
    pub score: f64,
}

/// Which budget tier a step selected.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Tier {
    High,
    Low,
}

pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Max-subtracted softmax.
pub fn stable_softmax(logits: &[f64]) -> Result<Vec<f64>> {
    if logits.len() < 2 {
        return Err(Error::InvalidInput(format!(
            "softmax needs at least 2 logits, got {}",
            logits.len()
        )));
    }
    if let Some(i) = logits.iter().position(|x| !x.is_finite()) {
        return Err(Error::InvalidInput(format!("non-finite logit at index {i}")));
    }
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut out: Vec<f64> = logits.iter().map(|&x| (x - max).exp()).collect();
    let z: f64 = out.iter().sum();
    out.iter_mut().for_each(|p| *p /= z);
    Ok(out)
}

pub fn confidence_score(dist: &[f64], weights: ConfidenceWeights) -> Result<ConfidenceFeatures> {
    let v = dist.len();
    if v < 2 {
        return Err(Error::InvalidInput(format!("distribution over {v} < 2 outcomes")));
    }
    if dist.iter().any(|&p| p < 0.0 || !p.is_finite()) {
        return Err(Error::InvalidInput("probabilities must be finite and nonnegative".into()));
    }
    let total: f64 = dist.iter().sum();
    if (total - 1.0).abs() > 1e-6 {
        return Err(Error::InvalidInput(format!("probabilities sum to {total}, not 1")));
    }

    let entropy: f64 = dist
        .iter()
        .filter(|&&p| p > 0.0)
        .map(|&p| -p * p.ln())
        .sum();
    let entropy_norm = (entropy / (v as f64).ln()).clamp(0.0, 1.0);

    let (mut p1, mut p2) = (0.0f64, 0.0f64);
    for &p in dist {
        if p > p1 {
            p2 = p1;
            p1 = p;
        } else if p > p2 {
            p2 = p;
        }
    }
    let margin = (p1.ln() - p2.max(SECOND_PROB_FLOOR).ln()).max(0.0);
    let margin_sig = sigmoid(margin);
    let score = weights.entropy * (1.0 - entropy_norm) + weights.margin * margin_sig + weights.top * p1;

    Ok(ConfidenceFeatures {
        entropy_norm,
        margin,
        margin_sig,
        top_prob: p1,
        score,
    })
}

/// `c >= tau` is confident; the boundary belongs to the tight tier.
pub fn select_tier(score: f64, tau: f64) -> Tier {
    if score >= tau {
        Tier::High
    } else {
        Tier::Low
    }
}

pub fn select_budget(score: f64, cfg: &PolicyConfig) -> usize {
    match select_tier(score, cfg.tau) {
        Tier::High => cfg.n_high,
        Tier::Low => cfg.n_low,
    }
}
