//! Drivers feed per-step inputs to the engine; [`run_decode`] is the loop.

use std::collections::HashMap;
use std::io::Write;

use crate::confidence::ConfidenceWeights;
use crate::config::ModelShape;
use crate::error::{Error, Result};
use crate::kv_cache::LayerCache;
use crate::policy::{Engine, KvPair, StepInput};
use crate::record::StepRecord;
use crate::rng::SeededRng;
use crate::simulator::model::{AttentionPath, ReferenceModel};
use crate::simulator::trace::{invert_top_mass, materialize_rows, seeded_kv, two_mass, SyntheticTrace};

/// Source of model outputs for a decode run.
pub trait Driver {
    fn shape(&self) -> ModelShape;

    fn prefill_len(&self) -> usize;

    /// K/V for prefill token `index`, given the caches built so far.
    fn prefill_kv(&mut self, index: usize, caches: &[LayerCache]) -> Result<Vec<KvPair>>;

    /// Inputs for decoding step `step` against the current caches.
    fn step_input(&mut self, step: usize, caches: &[LayerCache]) -> Result<StepInput>;

    /// The token the engine sampled at the last step.
    fn observe_token(&mut self, _token: usize) {}
}

/// Drives the engine with [`ReferenceModel`] forward passes.
#[derive(Debug, Clone)]
pub struct ModelDriver {
    pub model: ReferenceModel,
    /// `prefill + 1` tokens; the last one is the input at step 0.
    prompt: Vec<usize>,
    current: usize,
    pub path: AttentionPath,
}

impl ModelDriver {
    pub fn new(model: ReferenceModel, prompt: Vec<usize>, path: AttentionPath) -> Result<Self> {
        let Some(&current) = prompt.last() else {
            return Err(Error::InvalidInput("prompt must hold at least one token".into()));
        };
        if let Some(&bad) = prompt.iter().find(|&&t| t >= model.shape.vocab_size) {
            return Err(Error::InvalidInput(format!("prompt token {bad} outside vocabulary")));
        }
        Ok(Self {
            model,
            prompt,
            current,
            path,
        })
    }

    /// A seeded random prompt of `prefill + 1` tokens.
    pub fn random_prompt(vocab: usize, prefill: usize, seed: u64) -> Vec<usize> {
        let mut rng = SeededRng::derive(seed, 0x5052_4F4D);
        (0..=prefill).map(|_| rng.below(vocab as u64) as usize).collect()
    }

    /// Token that will be fed at the next step.
    pub fn current_token(&self) -> usize {
        self.current
    }
}

impl Driver for ModelDriver {
    fn shape(&self) -> ModelShape {
        self.model.shape
    }

    fn prefill_len(&self) -> usize {
        self.prompt.len() - 1
    }

    fn prefill_kv(&mut self, index: usize, caches: &[LayerCache]) -> Result<Vec<KvPair>> {
        Ok(self.model.forward(self.prompt[index], caches, self.path)?.new_kv)
    }

    fn step_input(&mut self, _step: usize, caches: &[LayerCache]) -> Result<StepInput> {
        let out = self.model.forward(self.current, caches, self.path)?;
        Ok(StepInput {
            logits: out.logits,
            attention: out.attention,
            new_kv: out.new_kv,
            needle_present: None,
        })
    }

    fn observe_token(&mut self, token: usize) {
        self.current = token;
    }
}

/// Replays a [`SyntheticTrace`].
#[derive(Debug, Clone)]
pub struct TraceDriver {
    trace: SyntheticTrace,
    weights: ConfidenceWeights,
    /// Inverted top mass per target confidence (keyed by bit pattern).
    top_mass: HashMap<u64, f64>,
}

impl TraceDriver {
    pub fn new(trace: SyntheticTrace, weights: ConfidenceWeights) -> Self {
        Self {
            trace,
            weights,
            top_mass: HashMap::new(),
        }
    }

    pub fn trace(&self) -> &SyntheticTrace {
        &self.trace
    }
}

impl Driver for TraceDriver {
    fn shape(&self) -> ModelShape {
        self.trace.header.shape
    }

    fn prefill_len(&self) -> usize {
        self.trace.header.prefill
    }

    fn prefill_kv(&mut self, index: usize, _caches: &[LayerCache]) -> Result<Vec<KvPair>> {
        let seed = SeededRng::derive(self.trace.header.seed, index as u64).next_u64();
        Ok(seeded_kv(seed, self.shape()))
    }

    fn step_input(&mut self, step: usize, caches: &[LayerCache]) -> Result<StepInput> {
        let available = self.trace.steps.len();
        let s = self
            .trace
            .steps
            .get(step)
            .ok_or(Error::DriverExhausted { step, available })?;
        let shape = self.shape();
        let logits = match (&s.logits, s.target_confidence) {
            (Some(l), _) => l.clone(),
            (None, Some(target)) => {
                if s.top_token >= shape.vocab_size {
                    return Err(Error::InvalidInput(format!("trace step {step}: top token outside vocabulary")));
                }
                let p1 = match self.top_mass.get(&target.to_bits()) {
                    Some(&p1) => p1,
                    None => {
                        let p1 = invert_top_mass(target, shape.vocab_size, self.weights)?;
                        self.top_mass.insert(target.to_bits(), p1);
                        p1
                    }
                };
                two_mass(p1, shape.vocab_size, s.top_token).iter().map(|p| p.ln()).collect()
            }
            (None, None) => {
                return Err(Error::InvalidInput(format!(
                    "trace step {step} has neither logits nor a target confidence"
                )))
            }
        };
        let attention = caches
            .iter()
            .enumerate()
            .map(|(l, c)| materialize_rows(s, l, c))
            .collect();
        let needle_present = self
            .trace
            .header
            .needle
            .filter(|n| n.query_step == step)
            .map(|n| caches.iter().all(|c| c.contains_position(n.position)));
        Ok(StepInput {
            logits,
            attention,
            new_kv: seeded_kv(s.kv_seed, shape),
            needle_present,
        })
    }
}

/// Feed the driver's prefill tokens into a fresh engine.
pub fn prefill(engine: &mut Engine, driver: &mut dyn Driver) -> Result<()> {
    if driver.shape() != engine.shape() {
        return Err(Error::Shape(format!(
            "driver shape {:?} differs from engine shape {:?}",
            driver.shape(),
            engine.shape()
        )));
    }
    let len = driver.prefill_len();
    engine.begin_prefill(len)?;
    for i in 0..len {
        let kv = driver.prefill_kv(i, engine.caches())?;
        engine.append_prefill(&kv)?;
    }
    Ok(())
}

/// Prefill the engine from the driver, then run `steps` decoding steps.
/// Each record is also written to `sink` as one JSON line.
pub fn run_decode(
    engine: &mut Engine,
    driver: &mut dyn Driver,
    steps: usize,
    mut sink: Option<&mut dyn Write>,
) -> Result<Vec<StepRecord>> {
    prefill(engine, driver)?;
    let mut records = Vec::with_capacity(steps);
    for t in 0..steps {
        let input = driver.step_input(t, engine.caches())?;
        let (record, token) = engine.step(&input)?;
        driver.observe_token(token);
        if let Some(w) = sink.as_deref_mut() {
            serde_json::to_writer(&mut *w, &record)?;
            w.write_all(b"\n")?;
        }
        records.push(record);
    }
    Ok(records)
}
