//! Turning flags into configs, drivers and engines.

use std::fmt;
use std::fs::File;
use std::io::BufReader;
use std::path::PathBuf;

use anyhow::{Context, Result};
use confkv_core::baselines::{matched_rate_variant, MatchedMode};
use confkv_core::confidence::ConfidenceWeights;
use confkv_core::policy::{Engine, EngineOptions, Policy};
use confkv_core::record::ScheduleEvent;
use confkv_core::simulator::{
    generate_needle_trace, AttentionPath, ConfidenceProfile, Driver, ModelDriver, Needle, ReferenceModel,
    SyntheticTrace, TraceDriver, TraceParams,
};
use confkv_core::{ModelShape, PolicyConfig, Profile, SeededRng};
use serde_json::Value;

use crate::args::CommonArgs;

/// Bad flags or config; maps to exit code 1.
#[derive(Debug)]
pub struct UsageError(pub String);

impl fmt::Display for UsageError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

pub fn usage(msg: impl Into<String>) -> anyhow::Error {
    UsageError(msg.into()).into()
}

/// Config file, then `--set` overrides, then `CONFKV_SEED`, then `--seed`.
pub fn load_config(common: &CommonArgs) -> Result<PolicyConfig> {
    let profile: Profile = common.profile.parse()?;
    let text = match &common.config {
        Some(path) => std::fs::read_to_string(path)
            .map_err(|e| usage(format!("cannot read config {}: {e}", path.display())))?,
        None => "{}".to_string(),
    };
    let mut cfg = PolicyConfig::from_json_with_profile(&text, profile)?;
    for item in &common.overrides {
        let (key, raw) = item
            .split_once('=')
            .ok_or_else(|| usage(format!("--set expects key=value, got `{item}`")))?;
        let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
        cfg = cfg.with_override(key.trim(), value)?;
    }
    cfg = cfg.with_env_overrides()?;
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    Ok(cfg)
}

pub fn shape_from(common: &CommonArgs) -> Result<ModelShape> {
    ModelShape::new(common.layers, common.heads, common.head_dim, common.vocab).map_err(|e| usage(e.to_string()))
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum DriverSource {
    Model,
    Synthetic,
    Trace(PathBuf),
}

impl DriverSource {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "model" => Ok(DriverSource::Model),
            "synthetic" => Ok(DriverSource::Synthetic),
            _ => match s.strip_prefix("trace:") {
                Some(path) if !path.is_empty() => Ok(DriverSource::Trace(PathBuf::from(path))),
                _ => Err(usage(format!("unknown driver `{s}` (model, synthetic, trace:<path>)"))),
            },
        }
    }

    pub fn label(&self) -> String {
        match self {
            DriverSource::Model => "model".into(),
            DriverSource::Synthetic => "synthetic".into(),
            DriverSource::Trace(p) => format!("trace:{}", p.display()),
        }
    }
}

pub fn parse_profile(s: &str) -> Result<ConfidenceProfile> {
    let (name, arg) = match s.split_once(':') {
        Some((n, a)) => (n, Some(a)),
        None => (s, None),
    };
    let bad = || usage(format!("bad synthetic profile `{s}`"));
    match (name, arg) {
        ("always-high", None) => Ok(ConfidenceProfile::AlwaysHigh),
        ("always-low", None) => Ok(ConfidenceProfile::AlwaysLow),
        ("alternating", Some(k)) => Ok(ConfidenceProfile::Alternating {
            low_run: k.parse().map_err(|_| bad())?,
        }),
        ("query-dip", None) => Ok(ConfidenceProfile::QueryDip { high_prob: 0.75 }),
        ("query-dip", Some(p)) => {
            let high_prob: f64 = p.parse().map_err(|_| bad())?;
            if !(0.0..=1.0).contains(&high_prob) {
                return Err(bad());
            }
            Ok(ConfidenceProfile::QueryDip { high_prob })
        }
        _ => Err(bad()),
    }
}

/// Seed for run `index` of a multi-run command; run 0 uses the base seed.
pub fn run_seed(base: u64, index: usize) -> u64 {
    if index == 0 {
        base
    } else {
        SeededRng::derive(base, index as u64).next_u64()
    }
}

/// The synthetic trace the `synthetic` driver would replay.
pub fn synthetic_trace(common: &CommonArgs, shape: ModelShape, steps: usize, seed: u64) -> Result<SyntheticTrace> {
    let profile = parse_profile(&common.synthetic_profile)?;
    let mut params = TraceParams::new(shape, common.prefill, steps, profile);
    if common.needle_age > 0 {
        if steps == 0 {
            return Err(usage("a needle needs at least one step"));
        }
        let query_step = steps - 1;
        let newest = common.prefill + query_step;
        if common.needle_age > newest {
            return Err(usage(format!(
                "needle age {} exceeds the {newest} tokens before the query",
                common.needle_age
            )));
        }
        params.needle = Some(Needle {
            position: (newest - common.needle_age) as u64,
            query_step,
        });
    }
    let mut rng = SeededRng::derive(seed, 0x5452_4143);
    generate_needle_trace(&mut rng, &params).map_err(|e| usage(e.to_string()))
}

pub fn model_driver(common: &CommonArgs, cfg: &PolicyConfig, shape: ModelShape, seed: u64) -> Result<ModelDriver> {
    let model = ReferenceModel::new(shape, seed)?;
    let prompt = ModelDriver::random_prompt(shape.vocab_size, common.prefill, seed);
    Ok(ModelDriver::new(model, prompt, AttentionPath::Tiled(cfg.block_size_b))?)
}

pub fn read_trace(path: &PathBuf) -> Result<SyntheticTrace> {
    let file = File::open(path).map_err(|e| usage(format!("cannot open trace {}: {e}", path.display())))?;
    SyntheticTrace::read_jsonl(BufReader::new(file))
        .map_err(|e| usage(format!("bad trace {}: {e}", path.display())))
}

/// A ready driver plus the model shape it implies.
pub fn make_driver(
    source: &DriverSource,
    common: &CommonArgs,
    cfg: &PolicyConfig,
    steps: usize,
    seed: u64,
) -> Result<(Box<dyn Driver + Send>, ModelShape)> {
    let weights = ConfidenceWeights::from(cfg);
    match source {
        DriverSource::Model => {
            let shape = shape_from(common)?;
            Ok((Box::new(model_driver(common, cfg, shape, seed)?), shape))
        }
        DriverSource::Synthetic => {
            let shape = shape_from(common)?;
            let trace = synthetic_trace(common, shape, steps, seed)?;
            Ok((Box::new(TraceDriver::new(trace, weights)), shape))
        }
        DriverSource::Trace(path) => {
            let trace = read_trace(path)?;
            let shape = trace.header.shape;
            if trace.steps.len() < steps {
                return Err(usage(format!(
                    "trace {} has {} steps, {steps} requested",
                    path.display(),
                    trace.steps.len()
                )));
            }
            Ok((Box::new(TraceDriver::new(trace, weights)), shape))
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PolicyKind {
    ConfKv,
    ConfKvInt8,
    ConfKvPyramid,
    Full,
    Sliding,
    HeavyHitter,
    Matched(MatchedMode),
}

impl PolicyKind {
    pub fn parse(s: &str) -> Result<Self> {
        Ok(match s.trim() {
            "confkv" => PolicyKind::ConfKv,
            "confkv-int8" => PolicyKind::ConfKvInt8,
            "confkv-l" => PolicyKind::ConfKvPyramid,
            "full" => PolicyKind::Full,
            "sliding" => PolicyKind::Sliding,
            "heavy-hitter" => PolicyKind::HeavyHitter,
            "matched-random" => PolicyKind::Matched(MatchedMode::Random),
            "matched-recency" => PolicyKind::Matched(MatchedMode::RecencyOnly),
            "matched-attention" => PolicyKind::Matched(MatchedMode::AttentionOnly),
            other => return Err(usage(format!("unknown policy `{other}`"))),
        })
    }

    pub fn name(self) -> String {
        match self {
            PolicyKind::ConfKv => "confkv".into(),
            PolicyKind::ConfKvInt8 => "confkv-int8".into(),
            PolicyKind::ConfKvPyramid => "confkv-l".into(),
            PolicyKind::Full => "full".into(),
            PolicyKind::Sliding => "sliding".into(),
            PolicyKind::HeavyHitter => "heavy-hitter".into(),
            PolicyKind::Matched(m) => format!("matched-{}", m.name()),
        }
    }

    pub fn uses_window(self) -> bool {
        matches!(self, PolicyKind::Sliding | PolicyKind::HeavyHitter)
    }
}

/// Build an engine. `window` feeds sliding/heavy-hitter; `schedule` feeds
/// the matched-rate replays.
pub fn build_engine(
    kind: PolicyKind,
    cfg: &PolicyConfig,
    shape: ModelShape,
    window: usize,
    schedule: Option<&[ScheduleEvent]>,
    seed: u64,
) -> Result<Engine> {
    let mut options = EngineOptions::default();
    let policy = match kind {
        PolicyKind::ConfKv => Policy::ConfKv,
        PolicyKind::ConfKvInt8 => {
            options.int8 = true;
            Policy::ConfKv
        }
        PolicyKind::ConfKvPyramid => {
            options.pyramid = true;
            Policy::ConfKv
        }
        PolicyKind::Full => Policy::Full,
        PolicyKind::Sliding => Policy::SlidingWindow { window },
        PolicyKind::HeavyHitter => Policy::HeavyHitter {
            cap: window.max(cfg.protected_p),
        },
        PolicyKind::Matched(mode) => {
            let schedule = schedule.context("matched-rate policies need a recorded confkv schedule")?;
            let rng = SeededRng::derive(seed, 0x4D41_5443);
            Policy::MatchedRate(matched_rate_variant(schedule, mode, rng)?)
        }
    };
    Engine::new(cfg.clone(), shape, policy, options).map_err(|e| usage(e.to_string()))
}
