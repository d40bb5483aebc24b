//! Subcommand implementations.

use std::io::Write;

use anyhow::Result;
use confkv_core::analysis::{ablation_experiment, summarize_trace, AblationResult, TraceSummary};
use confkv_core::baselines::write_schedule;
use confkv_core::policy::Engine;
use confkv_core::record::{ScheduleEvent, StepRecord};
use confkv_core::simulator::run_decode;
use confkv_core::{PolicyConfig, SeededRng};
use rayon::prelude::*;
use serde::Serialize;
use serde_json::Value;

use crate::args::{AblateArgs, CommonArgs, CompareArgs, DecodeArgs, GenTraceArgs, SweepArgs};
use crate::output::{create, ensure_dir, summary_values, write_csv, write_json, SUMMARY_COLUMNS};
use crate::setup::{
    build_engine, load_config, make_driver, model_driver, run_seed, shape_from, synthetic_trace, usage, DriverSource,
    PolicyKind,
};

/// Sliding window used by `decode` when none is given.
const DEFAULT_SLIDING_WINDOW: usize = 512;

struct RunOutput {
    records: Vec<StepRecord>,
    engine: Engine,
}

#[allow(clippy::too_many_arguments)]
fn run_policy(
    kind: PolicyKind,
    cfg: &PolicyConfig,
    source: &DriverSource,
    common: &CommonArgs,
    steps: usize,
    window: usize,
    schedule: Option<&[ScheduleEvent]>,
    seed: u64,
    sink: Option<&mut dyn Write>,
) -> Result<RunOutput> {
    let (mut driver, shape) = make_driver(source, common, cfg, steps, seed)?;
    let mut engine = build_engine(kind, cfg, shape, window, schedule, seed)?;
    let records = run_decode(&mut engine, driver.as_mut(), steps, sink)?;
    Ok(RunOutput { records, engine })
}

fn needle_checks(records: &[StepRecord]) -> usize {
    records.iter().filter(|r| r.needle_present.is_some()).count()
}

#[derive(Serialize)]
struct DecodeSummary<'a> {
    policy: String,
    driver: String,
    config_hash: String,
    config: &'a PolicyConfig,
    window: Option<usize>,
    summary: TraceSummary,
}

pub fn decode(args: &DecodeArgs) -> Result<()> {
    let cfg = load_config(&args.common)?;
    let kind = PolicyKind::parse(&args.policy)?;
    if matches!(kind, PolicyKind::Matched(_)) {
        return Err(usage("matched-rate policies are only available through `compare`"));
    }
    let source = DriverSource::parse(&args.common.driver)?;
    let window = match kind {
        PolicyKind::Sliding => args.window.unwrap_or(DEFAULT_SLIDING_WINDOW),
        PolicyKind::HeavyHitter => args.window.unwrap_or(cfg.n_low),
        _ => 0,
    };
    if kind.uses_window() && window == 0 {
        return Err(usage("--window must be >= 1"));
    }
    ensure_dir(&args.out)?;
    let mut trace = create(&args.out.join("trace.jsonl"))?;
    let run = run_policy(kind, &cfg, &source, &args.common, args.steps, window, None, cfg.seed, Some(&mut trace))?;
    trace.flush()?;
    if run.records.is_empty() {
        return Err(usage("--steps must be >= 1"));
    }
    let summary = summarize_trace(&run.records)?;
    let hash = cfg.hash();

    let mut header = vec!["policy", "driver", "window", "config_hash"];
    header.extend(SUMMARY_COLUMNS);
    let mut row = vec![
        kind.name(),
        source.label(),
        if kind.uses_window() { window.to_string() } else { String::new() },
        hash.clone(),
    ];
    row.extend(summary_values(&summary, needle_checks(&run.records)));
    write_csv(&args.out.join("summary.csv"), &header, &[row])?;
    write_json(
        &args.out.join("summary.json"),
        &DecodeSummary {
            policy: kind.name(),
            driver: source.label(),
            config_hash: hash,
            config: &cfg,
            window: kind.uses_window().then_some(window),
            summary: summary.clone(),
        },
    )?;
    let mut sched = create(&args.out.join("schedule.jsonl"))?;
    write_schedule(run.engine.schedule(), &mut sched)?;
    sched.flush()?;

    println!(
        "{}: {} steps, mean len {:.1}, peak bytes {}, eviction rate {:.3}",
        kind.name(),
        summary.steps,
        summary.mean_len,
        summary.peak_bytes,
        summary.eviction_rate
    );
    Ok(())
}

struct PolicyRun {
    window: Option<usize>,
    summary: TraceSummary,
    checks: usize,
}

fn compare_one(
    kinds: &[PolicyKind],
    cfg: &PolicyConfig,
    source: &DriverSource,
    args: &CompareArgs,
    seed: u64,
) -> Result<(Vec<PolicyRun>, Vec<ScheduleEvent>)> {
    let reference = run_policy(PolicyKind::ConfKv, cfg, source, &args.common, args.steps, 0, None, seed, None)?;
    let ref_summary = summarize_trace(&reference.records)?;
    let schedule = reference.engine.schedule().to_vec();
    let window = args.window.unwrap_or_else(|| (ref_summary.mean_len.round() as usize).max(1));
    let mut runs = Vec::with_capacity(kinds.len());
    for &kind in kinds {
        let (summary, checks) = if kind == PolicyKind::ConfKv {
            (ref_summary.clone(), needle_checks(&reference.records))
        } else {
            let run = run_policy(kind, cfg, source, &args.common, args.steps, window, Some(&schedule), seed, None)?;
            (summarize_trace(&run.records)?, needle_checks(&run.records))
        };
        runs.push(PolicyRun {
            window: kind.uses_window().then_some(window),
            summary,
            checks,
        });
    }
    Ok((runs, schedule))
}

fn mean_of(values: impl Iterator<Item = f64>) -> f64 {
    let (sum, n) = values.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    if n == 0 {
        0.0
    } else {
        sum / n as f64
    }
}

#[derive(Serialize)]
struct CompareRow {
    policy: String,
    runs: usize,
    window: Option<f64>,
    steps: usize,
    mean_len: f64,
    max_len: f64,
    eviction_rate: f64,
    total_evicted: f64,
    peak_bytes: f64,
    mean_bytes: f64,
    final_bytes: f64,
    quantized_fraction: f64,
    mean_confidence: f64,
    high_fraction: f64,
    needle_retention: Option<f64>,
    needle_checks: usize,
}

fn aggregate(kind: PolicyKind, runs: &[&PolicyRun]) -> CompareRow {
    let m = |f: &dyn Fn(&PolicyRun) -> f64| mean_of(runs.iter().map(|r| f(r)));
    let windows: Vec<f64> = runs.iter().filter_map(|r| r.window.map(|w| w as f64)).collect();
    let retention: Vec<f64> = runs.iter().filter_map(|r| r.summary.needle_retention).collect();
    let checks: usize = runs.iter().map(|r| r.checks).sum();
    CompareRow {
        policy: kind.name(),
        runs: runs.len(),
        window: (!windows.is_empty()).then(|| mean_of(windows.iter().copied())),
        steps: runs[0].summary.steps,
        mean_len: m(&|r| r.summary.mean_len),
        max_len: m(&|r| r.summary.max_len as f64),
        eviction_rate: m(&|r| r.summary.eviction_rate),
        total_evicted: m(&|r| r.summary.total_evicted as f64),
        peak_bytes: m(&|r| r.summary.peak_bytes as f64),
        mean_bytes: m(&|r| r.summary.mean_bytes),
        final_bytes: m(&|r| r.summary.final_bytes as f64),
        quantized_fraction: m(&|r| r.summary.quantized_fraction),
        mean_confidence: m(&|r| r.summary.mean_confidence),
        high_fraction: m(&|r| r.summary.high_fraction),
        needle_retention: (!retention.is_empty()).then(|| mean_of(retention.iter().copied())),
        needle_checks: checks,
    }
}

pub fn compare(args: &CompareArgs) -> Result<()> {
    let cfg = load_config(&args.common)?;
    let kinds = args
        .policies
        .iter()
        .map(|p| PolicyKind::parse(p))
        .collect::<Result<Vec<_>>>()?;
    if kinds.len() < 2 {
        return Err(usage("compare needs at least two policies"));
    }
    if args.runs == 0 || args.steps == 0 {
        return Err(usage("--runs and --steps must be >= 1"));
    }
    if args.window == Some(0) {
        return Err(usage("--window must be >= 1"));
    }
    let source = DriverSource::parse(&args.common.driver)?;
    if args.runs > 1 && matches!(source, DriverSource::Trace(_)) {
        return Err(usage("--runs > 1 needs a seeded driver (model or synthetic)"));
    }
    ensure_dir(&args.out)?;

    let results = (0..args.runs)
        .into_par_iter()
        .map(|r| compare_one(&kinds, &cfg, &source, args, run_seed(cfg.seed, r)))
        .collect::<Result<Vec<_>>>()?;

    let hash = cfg.hash();
    let rows: Vec<CompareRow> = kinds
        .iter()
        .enumerate()
        .map(|(i, &k)| aggregate(k, &results.iter().map(|(runs, _)| &runs[i]).collect::<Vec<_>>()))
        .collect();
    let header = [
        "policy",
        "runs",
        "window",
        "config_hash",
        "steps",
        "mean_len",
        "max_len",
        "eviction_rate",
        "total_evicted",
        "peak_bytes",
        "mean_bytes",
        "final_bytes",
        "quantized_fraction",
        "mean_confidence",
        "high_fraction",
        "needle_retention",
        "needle_checks",
    ];
    let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    let csv_rows: Vec<Vec<String>> = rows
        .iter()
        .map(|r| {
            vec![
                r.policy.clone(),
                r.runs.to_string(),
                opt(r.window),
                hash.clone(),
                r.steps.to_string(),
                r.mean_len.to_string(),
                r.max_len.to_string(),
                r.eviction_rate.to_string(),
                r.total_evicted.to_string(),
                r.peak_bytes.to_string(),
                r.mean_bytes.to_string(),
                r.final_bytes.to_string(),
                r.quantized_fraction.to_string(),
                r.mean_confidence.to_string(),
                r.high_fraction.to_string(),
                opt(r.needle_retention),
                r.needle_checks.to_string(),
            ]
        })
        .collect();
    write_csv(&args.out.join("compare.csv"), &header, &csv_rows)?;
    write_json(&args.out.join("compare.json"), &rows)?;
    let mut sched = create(&args.out.join("schedule.jsonl"))?;
    write_schedule(&results[0].1, &mut sched)?;
    sched.flush()?;

    for r in &rows {
        let retention = opt(r.needle_retention);
        println!(
            "{:<18} mean len {:>8.1}  peak bytes {:>10.0}  evicted {:>8.0}  retention {}",
            r.policy,
            r.mean_len,
            r.peak_bytes,
            r.total_evicted,
            if retention.is_empty() { "-".into() } else { retention }
        );
    }
    Ok(())
}

#[derive(Serialize)]
struct AblationSummary<'a> {
    policy: String,
    config_hash: String,
    steps: usize,
    samples: usize,
    ablate_r: usize,
    pearson: Option<f64>,
    skipped: usize,
    bins: &'a [confkv_core::analysis::DecileBin],
}

pub fn ablate(args: &AblateArgs) -> Result<()> {
    let cfg = load_config(&args.common)?;
    let kind = PolicyKind::parse(&args.policy)?;
    if matches!(kind, PolicyKind::Matched(_)) || kind.uses_window() {
        return Err(usage("ablate supports confkv, confkv-int8, confkv-l and full"));
    }
    if DriverSource::parse(&args.common.driver)? != DriverSource::Model {
        return Err(usage("ablate needs the model driver"));
    }
    if args.samples == 0 || args.samples > args.steps {
        return Err(usage(format!(
            "--samples must be in 1..={} (the number of steps)",
            args.steps
        )));
    }
    let shape = shape_from(&args.common)?;
    let mut driver = model_driver(&args.common, &cfg, shape, cfg.seed)?;
    let mut engine = build_engine(kind, &cfg, shape, 0, None, cfg.seed)?;
    let mut rng = SeededRng::derive(cfg.seed, 0x4142_4C54);
    let result: AblationResult = ablation_experiment(&mut engine, &mut driver, args.steps, args.ablate_r, args.samples, &mut rng)
        .map_err(|e| match e {
            confkv_core::Error::InvalidInput(m) => usage(m),
            other => other.into(),
        })?;

    ensure_dir(&args.out)?;
    let hash = cfg.hash();
    let rows: Vec<Vec<String>> = result
        .pairs
        .iter()
        .map(|p| vec![p.step.to_string(), p.confidence.to_string(), p.kl.to_string(), hash.clone()])
        .collect();
    write_csv(&args.out.join("pairs.csv"), &["step", "confidence", "kl", "config_hash"], &rows)?;
    write_json(
        &args.out.join("summary.json"),
        &AblationSummary {
            policy: kind.name(),
            config_hash: hash,
            steps: args.steps,
            samples: result.pairs.len(),
            ablate_r: args.ablate_r,
            pearson: result.pearson,
            skipped: result.skipped,
            bins: &result.bins,
        },
    )?;
    match result.pearson {
        Some(r) => println!("pearson r = {r:.6} over {} pairs", result.pairs.len()),
        None => println!("pearson r = undefined (constant series) over {} pairs", result.pairs.len()),
    }
    Ok(())
}

fn sweep_key(param: &str) -> Result<&'static str> {
    Ok(match param {
        "tau" => "tau",
        "n_high" => "n_high",
        "w" => "fp16_window_w",
        "alpha" => "alpha",
        other => return Err(usage(format!("unknown sweep parameter `{other}` (tau, n_high, w, alpha)"))),
    })
}

fn sweep_value(param: &str, raw: &str) -> Result<Value> {
    let raw = raw.trim();
    let bad = || usage(format!("bad value `{raw}` for {param}"));
    match param {
        "tau" | "alpha" => {
            let v: f64 = raw.parse().map_err(|_| bad())?;
            serde_json::Number::from_f64(v).map(Value::Number).ok_or_else(bad)
        }
        "w" if raw == "inf" => Ok(Value::from(u64::MAX)),
        _ => raw.parse::<u64>().map(Value::from).map_err(|_| bad()),
    }
}

pub fn sweep(args: &SweepArgs) -> Result<()> {
    let base = load_config(&args.common)?;
    let key = sweep_key(&args.param)?;
    let kind = PolicyKind::parse(&args.policy)?;
    if matches!(kind, PolicyKind::Matched(_)) {
        return Err(usage("sweep does not support matched-rate policies"));
    }
    if args.steps == 0 {
        return Err(usage("--steps must be >= 1"));
    }
    let source = DriverSource::parse(&args.common.driver)?;
    let cfgs = args
        .values
        .iter()
        .map(|raw| {
            let value = sweep_value(&args.param, raw)?;
            Ok((raw.trim().to_string(), base.with_override(key, value)?))
        })
        .collect::<Result<Vec<_>>>()?;
    ensure_dir(&args.out)?;

    let window = match kind {
        PolicyKind::Sliding => DEFAULT_SLIDING_WINDOW,
        PolicyKind::HeavyHitter => base.n_low,
        _ => 0,
    };
    let summaries = cfgs
        .par_iter()
        .map(|(_, cfg)| {
            let run = run_policy(kind, cfg, &source, &args.common, args.steps, window, None, cfg.seed, None)?;
            Ok((summarize_trace(&run.records)?, needle_checks(&run.records)))
        })
        .collect::<Result<Vec<_>>>()?;

    let mut header = vec!["param", "value", "policy", "config_hash"];
    header.extend(SUMMARY_COLUMNS);
    let rows: Vec<Vec<String>> = cfgs
        .iter()
        .zip(&summaries)
        .map(|((raw, cfg), (s, checks))| {
            let mut row = vec![args.param.clone(), raw.clone(), kind.name(), cfg.hash()];
            row.extend(summary_values(s, *checks));
            row
        })
        .collect();
    write_csv(&args.out.join("sweep.csv"), &header, &rows)?;
    for ((raw, _), (s, _)) in cfgs.iter().zip(&summaries) {
        println!(
            "{}={:<8} eviction rate {:.3}  peak bytes {}  quantized {:.3}",
            args.param, raw, s.eviction_rate, s.peak_bytes, s.quantized_fraction
        );
    }
    Ok(())
}

pub fn gen_trace(args: &GenTraceArgs) -> Result<()> {
    let cfg = load_config(&args.common)?;
    let shape = shape_from(&args.common)?;
    let trace = synthetic_trace(&args.common, shape, args.steps, cfg.seed)?;
    if let Some(parent) = args.out.parent().filter(|p| !p.as_os_str().is_empty()) {
        ensure_dir(parent)?;
    }
    let mut w = create(&args.out)?;
    trace.write_jsonl(&mut w)?;
    w.flush()?;
    println!("wrote {} steps to {}", trace.steps.len(), args.out.display());
    Ok(())
}
