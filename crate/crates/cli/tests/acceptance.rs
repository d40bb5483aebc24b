//! Acceptance suite: one PASS/FAIL line per criterion.
//!
//! Runs without the libtest harness so the summary lines are always shown.
//! Exits nonzero if any criterion fails.

use std::collections::BTreeSet;
use std::path::Path;
use std::process::Command;
use std::time::{Duration, Instant};

use confkv_core::analysis::{ablation_experiment, kl_divergence, pearson, summarize_trace};
use confkv_core::attention::{max_relative_error, naive_attention, tiled_attention};
use confkv_core::baselines::{matched_rate_variant, MatchedMode};
use confkv_core::confidence::{confidence_score, stable_softmax, ConfidenceWeights, Tier};
use confkv_core::kv_cache::LayerCache;
use confkv_core::policy::{evict_to_budget, pyramid_budget, Engine, EngineOptions, Policy};
use confkv_core::quantizer::{apply_fp16_window, dequantize, quantize_segment};
use confkv_core::record::StepRecord;
use confkv_core::simulator::{
    generate_needle_trace, run_decode, AttentionPath, ConfidenceProfile, ModelDriver, Needle, ReferenceModel,
    SyntheticTrace, TraceDriver, TraceParams,
};
use confkv_core::{ModelShape, PolicyConfig, SeededRng};

type Outcome = Result<String, String>;
type Criterion = (&'static str, fn() -> Outcome);
type CliCase<'a> = (&'a str, Vec<String>, Vec<(&'a str, &'a str)>);

fn check(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn within(elapsed: Duration, limit_s: u64, what: &str) -> Result<(), String> {
    check(elapsed.as_secs_f64() < limit_s as f64, || {
        format!("{what} took {:.1}s, limit {limit_s}s", elapsed.as_secs_f64())
    })
}

// Criterion 1 -----------------------------------------------------------------

fn attention_exactness() -> Outcome {
    let start = Instant::now();
    let mut rng = SeededRng::new(0xA771);
    let blocks = [1usize, 2, 3, 16, 128];
    let mut worst: f64 = 0.0;
    let mut int8_cases = 0;
    for case in 0..1000 {
        let len = 1 + rng.below(512) as usize;
        let b = blocks[case % blocks.len()];
        let heads = 1 + rng.below(4) as usize;
        let d = 1 + rng.below(24) as usize;
        let spread = rng.uniform(0.1, 3.0);
        let mut cache = LayerCache::new(heads, d);
        for i in 0..len {
            let k: Vec<f32> = (0..heads * d).map(|_| (rng.normal() * spread) as f32).collect();
            let v: Vec<f32> = (0..heads * d).map(|_| rng.normal() as f32).collect();
            cache.append(&k, &v, i as u64, i as i64).map_err(|e| e.to_string())?;
        }
        // Mixed precision: two quantization passes leave an INT8 prefix in
        // up to two segments and a HIGH tail.
        if case % 4 != 0 {
            let first = rng.below(len as u64 + 1) as i64;
            apply_fp16_window(&mut cache, 0, first - 1, 1);
            let second = first + rng.below((len as i64 - first + 1) as u64) as i64;
            apply_fp16_window(&mut cache, 0, second - 1, 1);
            if cache.int8_len() > 0 {
                int8_cases += 1;
            }
        }
        let q: Vec<f64> = (0..heads * d).map(|_| rng.normal()).collect();
        let tiled = tiled_attention(&q, &cache, b).map_err(|e| e.to_string())?;
        let naive = naive_attention(&q, &cache.dequantized_keys(), &cache.dequantized_values(), heads, d)
            .map_err(|e| e.to_string())?;
        let err = max_relative_error(&tiled.output, &naive.output)
            .max(max_relative_error(&tiled.rows.weights, &naive.rows.weights));
        worst = worst.max(err);
        check(err <= 1e-5, || format!("case {case}: len {len} b {b} relative error {err:e}"))?;
        for h in 0..heads {
            let s: f64 = tiled.rows.row(h).iter().sum();
            check((s - 1.0).abs() <= 1e-6, || format!("case {case}: head {h} weights sum to {s}"))?;
        }
    }
    within(start.elapsed(), 60, "1000 attention cases")?;
    Ok(format!("1000 cases ({int8_cases} with INT8 entries), worst relative error {worst:.2e}"))
}

// Criterion 2 -----------------------------------------------------------------

/// Survivor positions by an independent full sort.
fn oracle_survivors(positions: &[u64], steps: &[i64], emas: &[f64], budget: usize, p: usize, alpha: f64) -> BTreeSet<u64> {
    let n = positions.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by_key(|&i| positions[i]);
    let protected: BTreeSet<usize> = order.iter().rev().take(p.min(n)).copied().collect();
    let cands: Vec<usize> = (0..n).filter(|i| !protected.contains(i)).collect();
    if n <= budget {
        return positions.iter().copied().collect();
    }
    let norm = |vals: Vec<f64>| {
        let lo = vals.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = vals.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let span = hi - lo;
        vals.into_iter().map(move |x| if span > 0.0 { (x - lo) / span } else { 0.0 }).collect::<Vec<_>>()
    };
    let a = norm(cands.iter().map(|&i| emas[i]).collect());
    let r = norm(cands.iter().map(|&i| steps[i] as f64).collect());
    let mut scored: Vec<(f64, u64, usize)> = cands
        .iter()
        .enumerate()
        .map(|(j, &i)| (alpha * a[j] + (1.0 - alpha) * r[j], positions[i], i))
        .collect();
    scored.sort_by(|x, y| x.0.partial_cmp(&y.0).unwrap().then(x.1.cmp(&y.1)).then(x.2.cmp(&y.2)));
    let victims: BTreeSet<usize> = scored.iter().take(n - budget).map(|s| s.2).collect();
    (0..n).filter(|i| !victims.contains(i)).map(|i| positions[i]).collect()
}

fn eviction_oracle() -> Outcome {
    let start = Instant::now();
    let mut rng = SeededRng::new(0xE71C);
    let mut evictions = 0usize;
    for case in 0..10_000 {
        let n = 1 + rng.below(400) as usize;
        let p = rng.below(65) as usize;
        let budget = p + rng.below((n + 20) as u64) as usize;
        let alpha = match case % 5 {
            0 => 0.0,
            1 => 1.0,
            _ => rng.next_f64(),
        };
        let levels = if case % 3 == 0 { 1 + rng.below(4) } else { 0 };
        let mut cache = LayerCache::new(1, 1);
        let mut pos = rng.below(50);
        let mut step = -(rng.below(100) as i64);
        let (mut positions, mut steps, mut emas) = (vec![], vec![], vec![]);
        for _ in 0..n {
            let ema = if levels > 0 { rng.below(levels) as f64 / levels as f64 } else { rng.next_f64() };
            cache.append(&[0.0], &[0.0], pos, step).map_err(|e| e.to_string())?;
            cache.metas_mut().last_mut().unwrap().ema_attention = ema;
            positions.push(pos);
            steps.push(step);
            emas.push(ema);
            pos += 1 + rng.below(3);
            step += 1 + rng.below(2) as i64;
        }
        let expected = oracle_survivors(&positions, &steps, &emas, budget, p, alpha);
        let protected: Vec<u64> = positions.iter().rev().take(p).copied().collect();
        evictions += evict_to_budget(&mut cache, budget, p, alpha).map_err(|e| format!("case {case}: {e}"))?;
        let got: BTreeSet<u64> = cache.positions().into_iter().collect();
        check(got == expected, || format!("case {case}: survivor set differs from the oracle"))?;
        check(cache.len() <= budget, || format!("case {case}: {} > budget {budget}", cache.len()))?;
        check(protected.iter().all(|q| got.contains(q)), || format!("case {case}: protected entry evicted"))?;
    }
    within(start.elapsed(), 120, "10000 eviction cases")?;
    Ok(format!("10000 fuzzed caches match the full-sort oracle ({evictions} evictions)"))
}

// Criterion 3 -----------------------------------------------------------------

fn confidence_formula() -> Outcome {
    let w = ConfidenceWeights::default();
    let one_hot = {
        let mut d = vec![1e-12; 8];
        d[0] = 1.0 - 7e-12;
        d
    };
    let examples = [
        (one_hot, 1.0),
        (vec![0.25; 4], 0.225),
        (vec![0.9, 0.1], 0.4 * (1.0 - (-(0.9f64 * 0.9f64.ln() + 0.1 * 0.1f64.ln()) / 2f64.ln())) + 0.3 * 0.9 + 0.3 * 0.9),
    ];
    for (d, want) in &examples {
        let c = confidence_score(d, w).map_err(|e| e.to_string())?.score;
        check((c - want).abs() <= 1e-6, || format!("{d:?}: c = {c}, expected {want}"))?;
    }
    let mut rng = SeededRng::new(0xC0F1);
    for case in 0..1000 {
        let v = 2 + rng.below(200) as usize;
        let logits: Vec<f64> = (0..v).map(|_| rng.normal() * rng.uniform(0.1, 4.0)).collect();
        let p = stable_softmax(&logits).map_err(|e| e.to_string())?;
        let gamma = rng.uniform(1.0, 5.0);
        let sharpened = stable_softmax(&logits.iter().map(|l| l * gamma).collect::<Vec<_>>()).map_err(|e| e.to_string())?;
        let c0 = confidence_score(&p, w).map_err(|e| e.to_string())?.score;
        let c1 = confidence_score(&sharpened, w).map_err(|e| e.to_string())?.score;
        check(c1 >= c0 - 1e-12, || format!("case {case}: sharpening by {gamma} lowered c from {c0} to {c1}"))?;
    }
    Ok("3 examples within 1e-6; sharpening monotone on 1000 distributions".into())
}

// Criterion 4 -----------------------------------------------------------------

fn quantization() -> Outcome {
    let mut rng = SeededRng::new(0x0A17);
    let mut total = 0usize;
    while total < 1_000_000 {
        let lanes = 1 + rng.below(64) as usize;
        let tokens = 1 + rng.below(256) as usize;
        let spread = 10f64.powf(rng.uniform(-3.0, 3.0));
        let vals: Vec<f32> = (0..lanes * tokens).map(|_| (rng.normal() * spread) as f32).collect();
        let seg = quantize_segment(&vals, lanes).map_err(|e| e.to_string())?;
        let back = dequantize(&seg.codes, &seg.scales).map_err(|e| e.to_string())?;
        for (i, (&x, &y)) in vals.iter().zip(&back).enumerate() {
            let bound = seg.scales.scale(i % lanes) / 2.0;
            check((x as f64 - y).abs() <= bound, || format!("|{x} - {y}| exceeds scale/2 = {bound}"))?;
        }
        total += vals.len();
    }
    let (mut err, mut mag) = (0.0, 0.0);
    for _ in 0..50 {
        let lanes = 64;
        let vals: Vec<f32> = (0..lanes * 128).map(|_| rng.normal() as f32).collect();
        let seg = quantize_segment(&vals, lanes).map_err(|e| e.to_string())?;
        let back = dequantize(&seg.codes, &seg.scales).map_err(|e| e.to_string())?;
        for (&x, &y) in vals.iter().zip(&back) {
            err += (x as f64 - y).abs();
            mag += (x as f64).abs();
        }
    }
    let rel = err / mag;
    check(rel <= 0.015, || format!("mean relative roundtrip error {:.3}%", rel * 100.0))?;
    Ok(format!(
        "{total} elements within scale/2; mean relative error {:.3}% on unit-Gaussian 128-token segments",
        rel * 100.0
    ))
}

// Criterion 5 -----------------------------------------------------------------

const RETENTION_TRACES: u64 = 200;

fn small_shape() -> ModelShape {
    ModelShape::new(2, 2, 8, 64).unwrap()
}

fn needle_trace(seed: u64, prefill: usize, len: usize, age_lo: usize, age_hi: usize) -> SyntheticTrace {
    let mut rng = SeededRng::new(seed);
    let q = len - 1;
    let age = age_lo + rng.below((age_hi - age_lo + 1) as u64) as usize;
    let mut p = TraceParams::new(small_shape(), prefill, len, ConfidenceProfile::QueryDip { high_prob: 0.75 });
    p.needle = Some(Needle {
        position: (prefill + q - age) as u64,
        query_step: q,
    });
    generate_needle_trace(&mut rng, &p).unwrap()
}

fn needle_found(cfg: &PolicyConfig, policy: Policy, trace: &SyntheticTrace) -> Result<(bool, Engine), String> {
    let mut engine = Engine::new(cfg.clone(), trace.header.shape, policy, EngineOptions::default()).map_err(|e| e.to_string())?;
    let mut driver = TraceDriver::new(trace.clone(), ConfidenceWeights::from(cfg));
    let records = run_decode(&mut engine, &mut driver, trace.steps.len(), None).map_err(|e| e.to_string())?;
    let q = trace.header.needle.unwrap().query_step;
    Ok((records[q].needle_present.unwrap(), engine))
}

fn matched_rate_ordering() -> Outcome {
    let start = Instant::now();
    let cfg = PolicyConfig::default();
    let modes = [MatchedMode::AttentionOnly, MatchedMode::RecencyOnly, MatchedMode::Random];
    let mut kept = [0usize; 3];
    for seed in 0..RETENTION_TRACES {
        let trace = needle_trace(seed, 32, 400, cfg.protected_p + 1, 2 * cfg.n_high);
        let (_, reference) = needle_found(&cfg, Policy::ConfKv, &trace)?;
        for (k, mode) in modes.iter().enumerate() {
            let replay = matched_rate_variant(reference.schedule(), *mode, SeededRng::derive(seed, 77)).map_err(|e| e.to_string())?;
            let (found, _) = needle_found(&cfg, Policy::MatchedRate(replay), &trace)?;
            kept[k] += found as usize;
        }
    }
    let pct = kept.map(|k| 100.0 * k as f64 / RETENTION_TRACES as f64);
    let [attn, rec, rand] = pct;

    let mut sliding_kept = 0;
    for seed in 0..RETENTION_TRACES {
        // Before the query step evicts, the window holds 512 retained entries plus
        // the token appended last step, so age 513 is still inside it.
        let trace = needle_trace(1000 + seed, 640, 200, 514, 839);
        let (found, _) = needle_found(&cfg, Policy::SlidingWindow { window: 512 }, &trace)?;
        sliding_kept += found as usize;
    }
    let detail = format!(
        "retention attention_only {attn:.1}%, recency_only {rec:.1}%, random {rand:.1}%; sliding-512 on older needles {sliding_kept}/{RETENTION_TRACES}"
    );
    check(attn >= rec + 10.0 && rec >= rand + 10.0, || format!("ordering violated: {detail}"))?;
    check(sliding_kept == 0, || format!("sliding window kept an out-of-window needle: {detail}"))?;
    within(start.elapsed(), 300, "retention experiment")?;
    Ok(detail)
}

// Criterion 6 -----------------------------------------------------------------

fn sawtooth() -> Outcome {
    let cfg = PolicyConfig::default();
    let shape = small_shape();
    let prefill = 200;
    let steps = 300;
    for k in [1usize, 2, 3, 5, 8, 20] {
        let mut rng = SeededRng::new(k as u64);
        let params = TraceParams::new(shape, prefill, steps, ConfidenceProfile::Alternating { low_run: k });
        let trace = generate_needle_trace(&mut rng, &params).map_err(|e| e.to_string())?;
        let mut engine = Engine::new(cfg.clone(), shape, Policy::ConfKv, EngineOptions::default()).map_err(|e| e.to_string())?;
        let records = run_decode(&mut engine, &mut TraceDriver::new(trace, ConfidenceWeights::from(&cfg)), steps, None)
            .map_err(|e| e.to_string())?;
        let mut len = prefill;
        for r in &records {
            let high = r.step % (k + 1) == k;
            check((r.tier == Tier::High) == high, || format!("k={k} step {}: wrong tier", r.step))?;
            let after_evict = if high && len > cfg.n_high { cfg.n_high } else { len };
            for l in &r.layers {
                check(l.len_before == len && l.len_after_evict == after_evict, || {
                    format!(
                        "k={k} step {} layer {}: lengths {}->{} expected {len}->{after_evict}",
                        r.step, l.layer, l.len_before, l.len_after_evict
                    )
                })?;
                if high {
                    check(l.len_after_evict <= cfg.n_high, || format!("k={k} step {}: above N_high", r.step))?;
                }
            }
            len = after_evict + 1;
        }
    }
    Ok("closed-form cache lengths match for low runs k in {1,2,3,5,8,20}".into())
}

// Criterion 7 -----------------------------------------------------------------

fn pyramid() -> Outcome {
    let values: Vec<usize> = (0..=12).map(|l| pyramid_budget(l, 12, 128, 0.5, 96)).collect();
    for (l, &v) in values.iter().enumerate() {
        let direct = ((128.0 * 0.5f64.powf(l as f64 / 12.0)).floor() as usize).max(96);
        check(v == direct, || format!("layer {l}: {v} vs direct {direct}"))?;
    }
    check(values[0] == 128 && values[4] == 101 && values[12] == 96, || format!("{values:?}"))?;
    check(values.windows(2).all(|w| w[0] >= w[1]), || format!("not monotone: {values:?}"))?;
    let shape = ModelShape::new(12, 1, 4, 16).unwrap();
    let engine = Engine::new(PolicyConfig::default(), shape, Policy::ConfKv, EngineOptions { int8: false, pyramid: true })
        .map_err(|e| e.to_string())?;
    for l in 0..12 {
        let (b, p) = engine.layer_budget(l, Tier::High);
        check(b == values[l] && p == 32, || format!("engine layer {l}: budget {b} protected {p}"))?;
    }
    Ok(format!("budgets {values:?}"))
}

// Criterion 8 -----------------------------------------------------------------

fn run_trace(cfg: &PolicyConfig, policy: Policy, options: EngineOptions, trace: &SyntheticTrace) -> Result<Vec<StepRecord>, String> {
    let mut engine = Engine::new(cfg.clone(), trace.header.shape, policy, options).map_err(|e| e.to_string())?;
    let mut driver = TraceDriver::new(trace.clone(), ConfidenceWeights::from(cfg));
    run_decode(&mut engine, &mut driver, trace.steps.len(), None).map_err(|e| e.to_string())
}

fn memory_model() -> Outcome {
    let shape = ModelShape::default();
    let cfg = PolicyConfig {
        n_high: 1024,
        n_low: 2048,
        fp16_window_w: 32,
        int8_group: 64,
        ..PolicyConfig::default()
    };
    let mut rng = SeededRng::new(8);
    let trace = generate_needle_trace(&mut rng, &TraceParams::new(shape, 2048, 512, ConfidenceProfile::AlwaysLow))
        .map_err(|e| e.to_string())?;
    let high = summarize_trace(&run_trace(&cfg, Policy::ConfKv, EngineOptions::default(), &trace)?).map_err(|e| e.to_string())?;
    let int8 = summarize_trace(&run_trace(&cfg, Policy::ConfKv, EngineOptions { int8: true, pyramid: false }, &trace)?)
        .map_err(|e| e.to_string())?;
    check(high.max_len == int8.max_len, || "token budgets differ".into())?;
    let final_ratio = int8.final_bytes as f64 / high.final_bytes as f64;
    let peak_ratio = int8.peak_bytes as f64 / high.peak_bytes as f64;
    check(int8.quantized_fraction > 0.9, || format!("only {:.3} quantized", int8.quantized_fraction))?;
    check(final_ratio <= 0.55 && peak_ratio <= 0.55, || {
        format!("int8/high bytes final {final_ratio:.4}, peak {peak_ratio:.4}")
    })?;

    let small = PolicyConfig::default();
    let mut rng = SeededRng::new(9);
    let trace = generate_needle_trace(&mut rng, &TraceParams::new(shape, 64, 800, ConfidenceProfile::AlwaysLow))
        .map_err(|e| e.to_string())?;
    let full = run_trace(&small, Policy::Full, EngineOptions::default(), &trace)?;
    let per_token = 4 * shape.lanes() * shape.num_layers;
    for r in &full {
        check(r.memory_bytes == (64 + r.step + 1) * per_token, || format!("full-KV bytes not linear at step {}", r.step))?;
    }
    let sliding = run_trace(&small, Policy::SlidingWindow { window: 512 }, EngineOptions::default(), &trace)?;
    let plateau = 513 * per_token;
    for r in &sliding {
        let expect = ((64 + r.step).min(512) + 1) * per_token;
        check(r.memory_bytes == expect, || format!("sliding bytes {} vs {expect} at step {}", r.memory_bytes, r.step))?;
    }
    check(sliding.last().unwrap().memory_bytes == plateau, || "sliding window did not plateau".into())?;
    Ok(format!(
        "{:.1}% quantized; int8/high bytes final {final_ratio:.4}, peak {peak_ratio:.4}; full KV linear, sliding plateaus at {plateau} B",
        int8.quantized_fraction * 100.0
    ))
}

// Criterion 9 -----------------------------------------------------------------

fn analysis_machinery() -> Outcome {
    let kl = |p: &[f64], q: &[f64]| kl_divergence(p, q).map_err(|e| e.to_string());
    check(kl(&[0.9, 0.1], &[0.9, 0.1])? == 0.0, || "KL(p,p) != 0".into())?;
    check((kl(&[1.0, 0.0], &[0.5, 0.5])? - std::f64::consts::LN_2).abs() < 1e-12, || "KL((1,0),(.5,.5))".into())?;
    let (a, b) = (kl(&[0.9, 0.1], &[0.5, 0.5])?, kl(&[0.5, 0.5], &[0.9, 0.1])?);
    check((a - 0.3681).abs() < 1e-4 && (b - 0.5108).abs() < 1e-4, || format!("asymmetric KL {a} / {b}"))?;
    let r = |x: &[f64], y: &[f64]| pearson(x, y).map_err(|e| e.to_string());
    check((r(&[1.0, 2.0, 3.0, 4.0], &[3.0, 5.0, 7.0, 9.0])? - 1.0).abs() < 1e-12, || "r(2x+1) != 1".into())?;
    check((r(&[1.0, 2.0, 3.0], &[-1.0, -2.0, -3.0])? + 1.0).abs() < 1e-12, || "r(-x) != -1".into())?;
    check((r(&[1.0, 2.0, 3.0], &[1.0, 3.0, 2.0])? - 0.5).abs() < 1e-12, || "r example != 0.5".into())?;
    check(pearson(&[1.0, 2.0, 3.0], &[2.0, 2.0, 2.0]).is_err(), || "constant series accepted".into())?;

    let shape = ModelShape::default();
    let cfg = PolicyConfig::default();
    let setup = |seed: u64| {
        let model = ReferenceModel::new(shape, seed).unwrap();
        let driver = ModelDriver::new(model, ModelDriver::random_prompt(64, 256, seed), AttentionPath::Tiled(128)).unwrap();
        let engine = Engine::new(cfg.clone(), shape, Policy::Full, EngineOptions::default()).unwrap();
        (engine, driver)
    };

    let (mut engine, mut driver) = setup(5);
    let zero = ablation_experiment(&mut engine, &mut driver, 300, 0, 100, &mut SeededRng::new(1)).map_err(|e| e.to_string())?;
    check(zero.pairs.iter().all(|p| p.kl == 0.0), || "ablate_r = 0 gave nonzero KL".into())?;

    let start = Instant::now();
    let (mut engine, mut driver) = setup(6);
    let result = ablation_experiment(&mut engine, &mut driver, 1500, 256, 1200, &mut SeededRng::new(2)).map_err(|e| e.to_string())?;
    let elapsed = start.elapsed();
    within(elapsed, 60, "default ablation run")?;
    check(result.pairs.len() == 1200, || format!("{} pairs", result.pairs.len()))?;
    let r = result.pearson.ok_or("pearson undefined")?;
    check(r.is_finite(), || "non-finite pearson".into())?;
    check(result.bins.iter().all(|b| b.mean_kl.is_finite() && b.mean_confidence.is_finite()), || "non-finite bins".into())?;

    let (mut plain, mut plain_driver) = setup(6);
    run_decode(&mut plain, &mut plain_driver, 1500, None).map_err(|e| e.to_string())?;
    check(plain.snapshot() == engine.snapshot(), || "ablation changed the live engine state".into())?;
    Ok(format!(
        "KL/Pearson examples exact; ablate_r=0 all zero; 1200-sample run in {:.1}s, r = {r:.4}, engine state unchanged",
        elapsed.as_secs_f64()
    ))
}

// Criterion 10 ----------------------------------------------------------------

fn run_cli(args: &[&str], envs: &[(&str, &str)]) -> Result<(), String> {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_confkv"));
    cmd.args(args).env_remove("CONFKV_SEED");
    for (k, v) in envs {
        cmd.env(k, v);
    }
    let out = cmd.output().map_err(|e| e.to_string())?;
    check(out.status.success(), || {
        format!("confkv {} failed: {}", args.join(" "), String::from_utf8_lossy(&out.stderr))
    })
}

fn dir_bytes(dir: &Path) -> Result<Vec<(String, Vec<u8>)>, String> {
    let mut files: Vec<(String, Vec<u8>)> = std::fs::read_dir(dir)
        .map_err(|e| e.to_string())?
        .map(|e| {
            let e = e.unwrap();
            (e.file_name().to_string_lossy().into_owned(), std::fs::read(e.path()).unwrap())
        })
        .collect();
    files.sort();
    Ok(files)
}

fn determinism() -> Outcome {
    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
    let trace_path = tmp.path().join("input.jsonl");
    let trace_arg = format!("trace:{}", trace_path.display());
    let small = ["--layers", "2", "--heads", "2", "--head-dim", "8", "--prefill", "64"];
    let commands: Vec<CliCase> = vec![
        ("decode-model", vec!["decode", "--policy", "confkv-int8", "--steps", "200"], vec![]),
        ("decode-env-seed", vec!["decode", "--policy", "confkv-l", "--steps", "150"], vec![("CONFKV_SEED", "99")]),
        ("decode-trace", vec!["decode", "--policy", "heavy-hitter", "--driver", &trace_arg, "--steps", "300"], vec![]),
        (
            "compare",
            vec!["compare", "--driver", "synthetic", "--steps", "300", "--runs", "4", "--policies", "confkv,sliding,matched-random,matched-attention"],
            vec![],
        ),
        ("ablate", vec!["ablate", "--steps", "200", "--samples", "50", "--ablate-r", "32"], vec![]),
        ("sweep", vec!["sweep", "--param", "tau", "--values", "0.5,0.7,0.9", "--steps", "150"], vec![]),
    ]
    .into_iter()
    .map(|(name, args, env)| {
        let mut all: Vec<String> = args.into_iter().map(String::from).collect();
        all.extend(small.iter().map(|s| s.to_string()));
        (name, all, env)
    })
    .collect();

    let mut gen = vec!["gen-trace".to_string(), "--steps".into(), "300".into(), "--out".into()];
    gen.push(trace_path.display().to_string());
    gen.extend(small.iter().map(|s| s.to_string()));
    let gen_refs: Vec<&str> = gen.iter().map(String::as_str).collect();
    run_cli(&gen_refs, &[])?;
    let first_trace = std::fs::read(&trace_path).map_err(|e| e.to_string())?;
    run_cli(&gen_refs, &[])?;
    check(std::fs::read(&trace_path).map_err(|e| e.to_string())? == first_trace, || "gen-trace output differs".into())?;

    let mut files = 1;
    for (name, args, env) in &commands {
        let mut outputs = Vec::new();
        for rep in 0..2 {
            let out = tmp.path().join(format!("{name}-{rep}"));
            let mut full: Vec<&str> = args.iter().map(String::as_str).collect();
            let out_s = out.display().to_string();
            full.extend(["--out", &out_s]);
            run_cli(&full, env)?;
            outputs.push(dir_bytes(&out)?);
        }
        check(outputs[0] == outputs[1], || format!("{name}: outputs differ between identical runs"))?;
        check(!outputs[0].is_empty(), || format!("{name}: no outputs"))?;
        files += outputs[0].len();
    }
    Ok(format!("{} commands repeated, {files} output files byte-identical", commands.len() + 1))
}

fn main() {
    let criteria: [Criterion; 10] = [
        ("attention exactness", attention_exactness),
        ("eviction-policy oracle", eviction_oracle),
        ("confidence formula", confidence_formula),
        ("quantization", quantization),
        ("matched-rate isolation ordering", matched_rate_ordering),
        ("sawtooth behavior", sawtooth),
        ("pyramid budgets", pyramid),
        ("memory model", memory_model),
        ("analysis machinery", analysis_machinery),
        ("determinism", determinism),
    ];
    let mut failed = 0;
    for (i, (name, f)) in criteria.iter().enumerate() {
        let start = Instant::now();
        let outcome = std::panic::catch_unwind(f).unwrap_or_else(|_| Err("panicked".into()));
        let secs = start.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => println!("criterion {:>2} PASS  {name} ({secs:.1}s): {detail}", i + 1),
            Err(why) => {
                failed += 1;
                println!("criterion {:>2} FAIL  {name} ({secs:.1}s): {why}", i + 1);
            }
        }
    }
    println!("acceptance: {} of {} criteria passed", criteria.len() - failed, criteria.len());
    if failed > 0 {
        std::process::exit(1);
    }
}
