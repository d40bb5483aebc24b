//! One decoding step of cache management.
//!
//! Order of operations per step: softmax of the logits, confidence score,
//! budget tier, then for each layer {EMA update, eviction if the layer is
//! over budget, FP16-window quantization}, then append of the new K/V at
//! high precision and sampling of the next token. Baseline policies share
//! this path and only swap the eviction rule.

use serde::{Deserialize, Serialize};

use crate::attention::AttentionRows;
use crate::baselines::{heavy_hitter_step, sliding_window_step, MatchedRatePolicy};
use crate::confidence::{confidence_score, select_tier, stable_softmax, ConfidenceWeights, Tier};
use crate::config::{ModelShape, PolicyConfig, SamplingMode};
use crate::error::{Error, Result};
use crate::kv_cache::{LayerCache, ROW_SUM_TOLERANCE};
use crate::policy::rank::{evict_to_budget, pyramid_budget};
use crate::quantizer::apply_fp16_window;
use crate::record::{LayerStep, ScheduleEvent, StepRecord};
use crate::rng::SeededRng;

/// Eviction rule applied to each layer after the EMA update.
#[derive(Debug, Clone)]
pub enum Policy {
    /// Confidence-gated budget with attention/recency ranking.
    ConfKv,
    /// Never evict.
    Full,
    /// Keep the newest `window` entries.
    SlidingWindow { window: usize },
    /// Keep the protected window plus the highest cumulative attention up to `cap`.
    HeavyHitter { cap: usize },
    /// Replay a recorded schedule with a different victim rule.
    MatchedRate(MatchedRatePolicy),
}

impl Policy {
    pub fn name(&self) -> String {
        match self {
            Policy::ConfKv => "confkv".into(),
            Policy::Full => "full".into(),
            Policy::SlidingWindow { .. } => "sliding".into(),
            Policy::HeavyHitter { .. } => "heavy-hitter".into(),
            Policy::MatchedRate(m) => format!("matched-{}", m.mode().name()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct EngineOptions {
    /// Quantize entries outside the FP16 window.
    pub int8: bool,
    /// Per-layer pyramid budgets (only affects [`Policy::ConfKv`]). The
    /// config's `pyramid_enabled` flag has the same effect.
    pub pyramid: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct KvPair {
    pub k: Vec<f32>,
    pub v: Vec<f32>,
}

/// Everything the model (or a trace) produces for one step.
#[derive(Debug, Clone, PartialEq)]
pub struct StepInput {
    pub logits: Vec<f64>,
    /// Per layer, rows over the cache as it was during the forward pass.
    pub attention: Vec<AttentionRows>,
    /// Per layer, the K/V of the current input token.
    pub new_kv: Vec<KvPair>,
    pub needle_present: Option<bool>,
}

#[derive(Debug, Clone)]
pub struct Engine {
    cfg: PolicyConfig,
    shape: ModelShape,
    policy: Policy,
    options: EngineOptions,
    weights: ConfidenceWeights,
    caches: Vec<LayerCache>,
    rng: SeededRng,
    prefill_len: Option<usize>,
    next_position: u64,
    step: usize,
    schedule: Vec<ScheduleEvent>,
    layer_invocations: u64,
}

impl Engine {
    pub fn new(cfg: PolicyConfig, shape: ModelShape, policy: Policy, options: EngineOptions) -> Result<Self> {
        cfg.validate()?;
        shape.validate()?;
        match &policy {
            Policy::SlidingWindow { window } if *window == 0 => {
                return Err(Error::InvalidInput("sliding window must be >= 1".into()))
            }
            Policy::HeavyHitter { cap } if *cap < cfg.protected_p => {
                return Err(Error::InvalidInput(format!(
                    "heavy-hitter cap {cap} is below the protected window {}",
                    cfg.protected_p
                )))
            }
            _ => {}
        }
        let caches = (0..shape.num_layers)
            .map(|_| LayerCache::with_capacity(shape.num_heads, shape.head_dim, cfg.n_low.max(16) + 1))
            .collect();
        Ok(Self {
            weights: ConfidenceWeights::from(&cfg),
            rng: SeededRng::derive(cfg.seed, 0x5A4D_504C),
            cfg,
            shape,
            policy,
            options,
            caches,
            prefill_len: None,
            next_position: 0,
            step: 0,
            schedule: Vec::new(),
            layer_invocations: 0,
        })
    }

    pub fn config(&self) -> &PolicyConfig {
        &self.cfg
    }

    pub fn shape(&self) -> ModelShape {
        self.shape
    }

    pub fn policy(&self) -> &Policy {
        &self.policy
    }

    pub fn options(&self) -> EngineOptions {
        self.options
    }

    pub fn caches(&self) -> &[LayerCache] {
        &self.caches
    }

    /// Eviction events recorded so far (nonzero counts only).
    pub fn schedule(&self) -> &[ScheduleEvent] {
        &self.schedule
    }

    /// Index of the next decoding step.
    pub fn current_step(&self) -> usize {
        self.step
    }

    /// How many per-layer policy applications have run, across all steps.
    pub fn layer_invocations(&self) -> u64 {
        self.layer_invocations
    }

    pub fn memory_bytes(&self) -> usize {
        self.caches.iter().map(LayerCache::memory_bytes).sum()
    }

    /// Snapshot of every layer, concatenated.
    pub fn snapshot(&self) -> Vec<u8> {
        let mut out = Vec::new();
        for (l, c) in self.caches.iter().enumerate() {
            c.write_snapshot(l as u32, &mut out).expect("writing to a Vec cannot fail");
        }
        out
    }

    /// Declare how many prefill tokens will follow; they get generation
    /// steps `-len ..= -1`.
    pub fn begin_prefill(&mut self, len: usize) -> Result<()> {
        if self.prefill_len.is_some() || self.next_position != 0 {
            return Err(Error::InvalidInput("prefill already started".into()));
        }
        self.prefill_len = Some(len);
        Ok(())
    }

    pub fn append_prefill(&mut self, kv: &[KvPair]) -> Result<()> {
        let prefill = self
            .prefill_len
            .ok_or_else(|| Error::InvalidInput("begin_prefill must be called first".into()))?;
        if self.next_position as usize >= prefill {
            return Err(Error::InvalidInput(format!("more than {prefill} prefill tokens")));
        }
        self.check_kv(kv)?;
        let step = self.next_position as i64 - prefill as i64;
        for (cache, pair) in self.caches.iter_mut().zip(kv) {
            cache.append(&pair.k, &pair.v, self.next_position, step)?;
        }
        self.next_position += 1;
        Ok(())
    }

    fn check_kv(&self, kv: &[KvPair]) -> Result<()> {
        if kv.len() != self.shape.num_layers {
            return Err(Error::Shape(format!(
                "{} K/V pairs for {} layers",
                kv.len(),
                self.shape.num_layers
            )));
        }
        let lanes = self.shape.lanes();
        if let Some(bad) = kv.iter().position(|p| p.k.len() != lanes || p.v.len() != lanes) {
            return Err(Error::Shape(format!("K/V for layer {bad} is not {lanes} wide")));
        }
        Ok(())
    }

    /// Distribution used for both confidence and sampling.
    pub fn sampling_distribution(&self, logits: &[f64]) -> Result<Vec<f64>> {
        match self.cfg.sampling_mode {
            SamplingMode::Greedy => stable_softmax(logits),
            SamplingMode::Temperature(t) => {
                let scaled: Vec<f64> = logits.iter().map(|x| x / t).collect();
                stable_softmax(&scaled)
            }
        }
    }

    /// Pyramid budgets are on if either the options or the config ask for them.
    pub fn pyramid_active(&self) -> bool {
        self.options.pyramid || self.cfg.pyramid_enabled
    }

    /// Active budget and protected window for `layer` under `tier`.
    pub fn layer_budget(&self, layer: usize, tier: Tier) -> (usize, usize) {
        let base = match tier {
            Tier::High => self.cfg.n_high,
            Tier::Low => self.cfg.n_low,
        };
        let budget = if self.pyramid_active() {
            pyramid_budget(
                layer,
                self.shape.num_layers,
                base,
                self.cfg.pyramid_beta,
                self.cfg.pyramid_n_min,
            )
        } else {
            base
        };
        (budget, self.cfg.protected_p.min(budget))
    }

    fn validate_input(&self, input: &StepInput) -> Result<()> {
        if input.logits.len() != self.shape.vocab_size {
            return Err(Error::Shape(format!(
                "{} logits for vocabulary {}",
                input.logits.len(),
                self.shape.vocab_size
            )));
        }
        if input.attention.len() != self.shape.num_layers {
            return Err(Error::Shape(format!(
                "attention for {} layers, model has {}",
                input.attention.len(),
                self.shape.num_layers
            )));
        }
        for (l, (rows, cache)) in input.attention.iter().zip(&self.caches).enumerate() {
            if rows.heads != cache.heads() || rows.len != cache.len() {
                return Err(Error::Shape(format!(
                    "layer {l}: attention rows {}x{} vs cache {}x{}",
                    rows.heads,
                    rows.len,
                    cache.heads(),
                    cache.len()
                )));
            }
            if rows.len > 0 {
                for h in 0..rows.heads {
                    let s: f64 = rows.row(h).iter().sum();
                    if (s - 1.0).abs() > ROW_SUM_TOLERANCE {
                        return Err(Error::InvalidInput(format!(
                            "layer {l} head {h}: attention row sums to {s}"
                        )));
                    }
                }
            }
        }
        self.check_kv(&input.new_kv)
    }

    fn sample(&mut self, dist: &[f64]) -> usize {
        match self.cfg.sampling_mode {
            SamplingMode::Greedy => {
                let mut best = 0;
                for (i, &p) in dist.iter().enumerate() {
                    if p > dist[best] {
                        best = i;
                    }
                }
                best
            }
            SamplingMode::Temperature(_) => {
                let u = self.rng.next_f64();
                let mut acc = 0.0;
                for (i, &p) in dist.iter().enumerate() {
                    acc += p;
                    if u < acc {
                        return i;
                    }
                }
                dist.len() - 1
            }
        }
    }

    /// Run one decoding step. Returns the trace row and the sampled token.
    pub fn step(&mut self, input: &StepInput) -> Result<(StepRecord, usize)> {
        let prefill = self.prefill_len.unwrap_or(0);
        if self.next_position as usize != prefill + self.step {
            return Err(Error::InvalidInput(format!(
                "prefill incomplete: {} of {prefill} tokens appended",
                self.next_position
            )));
        }
        self.validate_input(input)?;

        let dist = self.sampling_distribution(&input.logits)?;
        let confidence = confidence_score(&dist, self.weights)?;
        let tier = select_tier(confidence.score, self.cfg.tau);
        let budget = match tier {
            Tier::High => self.cfg.n_high,
            Tier::Low => self.cfg.n_low,
        };
        let t = self.step;

        let mut layers = Vec::with_capacity(self.caches.len());
        for l in 0..self.caches.len() {
            let (layer_budget, protected) = self.layer_budget(l, tier);
            let cfg = &self.cfg;
            let cache = &mut self.caches[l];
            let len_before = cache.len();
            cache.update_attention_ema(&input.attention[l], cfg.ema_lambda)?;

            let (evicted, reported_budget) = match &mut self.policy {
                Policy::ConfKv => {
                    let n = if cache.len() > layer_budget {
                        evict_to_budget(cache, layer_budget, protected, cfg.alpha)?
                    } else {
                        0
                    };
                    (n, Some(layer_budget))
                }
                Policy::Full => (0, None),
                Policy::SlidingWindow { window } => (sliding_window_step(cache, *window)?, Some(*window)),
                Policy::HeavyHitter { cap } => (heavy_hitter_step(cache, *cap, cfg.protected_p)?, Some(*cap)),
                Policy::MatchedRate(m) => (m.apply(t, l, cache, cfg.protected_p)?, None),
            };
            self.layer_invocations += 1;
            if evicted > 0 {
                self.schedule.push(ScheduleEvent {
                    step: t,
                    layer: l,
                    evict_count: evicted,
                });
            }
            let len_after_evict = cache.len();
            let quantized = if self.options.int8 {
                apply_fp16_window(cache, cfg.fp16_window_w, t as i64, cfg.int8_group)
            } else {
                0
            };
            layers.push(LayerStep {
                layer: l,
                budget: reported_budget,
                len_before,
                len_after_evict,
                len_after_append: 0,
                evicted,
                quantized,
                int8_entries: 0,
                bytes: 0,
            });
        }

        for ((cache, pair), row) in self.caches.iter_mut().zip(&input.new_kv).zip(&mut layers) {
            cache.append(&pair.k, &pair.v, self.next_position, t as i64)?;
            row.len_after_append = cache.len();
            row.int8_entries = cache.int8_len();
            row.bytes = cache.memory_bytes();
        }
        self.next_position += 1;
        self.step += 1;

        let token = self.sample(&dist);
        let record = StepRecord {
            step: t,
            confidence,
            tier,
            budget,
            memory_bytes: layers.iter().map(|l| l.bytes).sum(),
            layers,
            token,
            needle_present: input.needle_present,
        };
        Ok((record, token))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_cfg() -> PolicyConfig {
        PolicyConfig {
            n_high: 8,
            n_low: 16,
            protected_p: 2,
            pyramid_n_min: 4,
            fp16_window_w: 4,
            int8_group: 1,
            ..PolicyConfig::default()
        }
    }

    fn shape() -> ModelShape {
        ModelShape::new(2, 1, 2, 4).unwrap()
    }

    fn input(engine: &Engine, logits: Vec<f64>) -> StepInput {
        StepInput {
            logits,
            attention: engine
                .caches()
                .iter()
                .map(|c| AttentionRows::uniform(c.heads(), c.len()))
                .collect(),
            new_kv: (0..engine.shape().num_layers)
                .map(|_| KvPair {
                    k: vec![1.0, 2.0],
                    v: vec![3.0, 4.0],
                })
                .collect(),
            needle_present: None,
        }
    }

    const CONFIDENT: [f64; 4] = [20.0, 0.0, 0.0, 0.0];
    const UNSURE: [f64; 4] = [0.0, 0.0, 0.0, 0.0];

    fn prefilled(policy: Policy, options: EngineOptions, n: usize) -> Engine {
        let mut e = Engine::new(small_cfg(), shape(), policy, options).unwrap();
        e.begin_prefill(n).unwrap();
        for _ in 0..n {
            let kv = input(&e, UNSURE.to_vec()).new_kv;
            e.append_prefill(&kv).unwrap();
        }
        e
    }

    #[test]
    fn prefill_steps_are_nonpositive() {
        let e = prefilled(Policy::ConfKv, EngineOptions::default(), 3);
        let steps: Vec<i64> = e.caches()[0].metas().iter().map(|m| m.generation_step).collect();
        assert_eq!(steps, vec![-3, -2, -1]);
    }

    #[test]
    fn confident_step_enforces_tight_budget() {
        let mut e = prefilled(Policy::ConfKv, EngineOptions::default(), 12);
        let inp = input(&e, CONFIDENT.to_vec());
        let (rec, _) = e.step(&inp).unwrap();
        assert_eq!(rec.tier, Tier::High);
        for l in &rec.layers {
            assert_eq!(l.len_after_evict, 8);
            assert_eq!(l.len_after_append, 9);
            assert_eq!(l.evicted, 4);
        }
        assert_eq!(e.schedule().len(), 2);
    }

    #[test]
    fn uncertain_step_below_loose_budget_only_appends() {
        let mut e = prefilled(Policy::ConfKv, EngineOptions::default(), 12);
        let inp = input(&e, UNSURE.to_vec());
        let (rec, _) = e.step(&inp).unwrap();
        assert_eq!(rec.tier, Tier::Low);
        assert!(rec.layers.iter().all(|l| l.evicted == 0 && l.len_after_append == 13));
    }

    #[test]
    fn greedy_ties_go_to_smallest_id() {
        let mut e = prefilled(Policy::Full, EngineOptions::default(), 1);
        let inp = input(&e, vec![1.0, 3.0, 3.0, 0.0]);
        assert_eq!(e.step(&inp).unwrap().1, 1);
    }

    #[test]
    fn appended_entry_is_not_quantized_same_step() {
        let mut e = prefilled(Policy::Full, EngineOptions { int8: true, pyramid: false }, 0);
        let mut cfg_w0 = small_cfg();
        cfg_w0.fp16_window_w = 0;
        e.cfg = cfg_w0;
        let inp = input(&e, UNSURE.to_vec());
        let (rec, _) = e.step(&inp).unwrap();
        assert_eq!(rec.layers[0].int8_entries, 0);
        let inp = input(&e, UNSURE.to_vec());
        let (rec, _) = e.step(&inp).unwrap();
        assert_eq!(rec.layers[0].quantized, 1);
        assert_eq!(rec.layers[0].int8_entries, 1);
    }

    #[test]
    fn rejects_unnormalized_rows_without_mutation() {
        let mut e = prefilled(Policy::ConfKv, EngineOptions::default(), 3);
        let snap = e.snapshot();
        let mut inp = input(&e, UNSURE.to_vec());
        inp.attention[1].weights[0] = 0.9;
        assert!(e.step(&inp).is_err());
        assert_eq!(e.snapshot(), snap);
        let mut inp = input(&e, UNSURE.to_vec());
        inp.attention.pop();
        assert!(matches!(e.step(&inp), Err(Error::Shape(_))));
    }

    #[test]
    fn step_before_prefill_complete_fails() {
        let mut e = Engine::new(small_cfg(), shape(), Policy::ConfKv, EngineOptions::default()).unwrap();
        e.begin_prefill(2).unwrap();
        let inp = input(&e, UNSURE.to_vec());
        assert!(e.step(&inp).is_err());
    }

    #[test]
    fn pyramid_layers_get_smaller_budgets() {
        let mut cfg = small_cfg();
        cfg.n_high = 16;
        cfg.n_low = 32;
        cfg.pyramid_n_min = 4;
        let shape = ModelShape::new(4, 1, 2, 4).unwrap();
        let e = Engine::new(cfg, shape, Policy::ConfKv, EngineOptions { int8: false, pyramid: true }).unwrap();
        let budgets: Vec<usize> = (0..4).map(|l| e.layer_budget(l, Tier::High).0).collect();
        assert_eq!(budgets, vec![16, 13, 11, 9]);
    }
}
