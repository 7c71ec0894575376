//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any fails. Every tolerance and time limit is pinned below.

use std::collections::HashSet;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::process::ExitCode;
use std::time::{Duration, Instant};

use moe_offload::bench::{ablation_suite, AblationPlan, CostModel};
use moe_offload::model::{train_toy, MarkovCorpus, Model, ModelConfig, Sampler, TrainConfig};
use moe_offload::prefetch::{generate, EngineOptions, SpeculationConfig};
use moe_offload::quant::{
    header_len, model_size_report, pack_codes, unpack_codes, ArchSpec, MixedQuantConfig,
    QuantScheme, QuantizedBlock,
};
use moe_offload::store::{
    steady_state_recall, CacheConfig, EventKind, ExpertKey, RecallDefinition, StoreEvent,
    TieredStore,
};
use moe_offload::trace::{replay, speculative_recall, synth, SyntheticTraceSpec, Trace};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

/// Published Mixtral-8x7B size with FP16 attention and FP16 experts.
const MIXTRAL_FP16_GIB: f64 = 86.99;
const SIZE_REL_TOL: f64 = 0.01;
/// Fraction of Mixtral parameters in experts.
const EXPERTS_FRACTION: f64 = 0.966;
const EXPERTS_FRACTION_TOL: f64 = 0.003;
const TWO_BIT_BPP_RANGE: (f64, f64) = (2.45, 2.75);
const MARKOV_SIGMAS: f64 = 3.0;
const CALIBRATED_TPS_BAND: (f64, f64) = (1.0, 10.0);
/// f32 evaluation of `scale * code + zero` on top of the analytic bound.
const DEQUANT_ULPS: f64 = 4.0;

type Outcome = Result<String, String>;
type Criterion = (&'static str, Duration, fn() -> Outcome);

fn check(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn toy(seed: u64, n_layers: usize) -> ModelConfig {
    ModelConfig {
        vocab_size: 32,
        d_model: 32,
        n_layers,
        n_heads: 4,
        d_ffn: 64,
        n_experts: 8,
        top_k_gate: 2,
        max_seq_len: 160,
        seed,
    }
}

fn recording(cache: CacheConfig, speculation: SpeculationConfig) -> EngineOptions {
    EngineOptions {
        cache,
        speculation,
        record_trace: true,
        record_hidden: true,
        background_transfers: false,
    }
}

fn record(model: &Model, prompt: &[usize], n_new: usize, seed: u64) -> Trace {
    let opts = recording(CacheConfig::default(), SpeculationConfig::default());
    generate(model, opts, prompt, n_new, &mut Sampler::categorical(seed))
        .unwrap()
        .trace
        .unwrap()
}

// 1 ------------------------------------------------------------------------

fn size_accounting() -> Outcome {
    let arch = ArchSpec::mixtral_8x7b();
    let size = |a: u8, e: u8| {
        model_size_report(&arch, &MixedQuantConfig::from_bits(a, e).unwrap())
            .unwrap()
            .total_gib
    };
    let fp16 = size(16, 16);
    check(
        (fp16 - MIXTRAL_FP16_GIB).abs() / MIXTRAL_FP16_GIB <= SIZE_REL_TOL,
        || format!("FP16 size {fp16:.3} GiB"),
    )?;
    let frac = arch.experts_fraction();
    check(
        (frac - EXPERTS_FRACTION).abs() <= EXPERTS_FRACTION_TOL,
        || format!("experts fraction {frac:.4}"),
    )?;
    for attn in [16, 4, 3, 2] {
        let s: Vec<f64> = [16, 4, 3, 2].iter().map(|&e| size(attn, e)).collect();
        check(s.windows(2).all(|w| w[0] > w[1]), || {
            format!("attn {attn}-bit: expert sizes not ordered {s:?}")
        })?;
    }
    Ok(format!(
        "FP16 {fp16:.2} GiB, experts {:.1}%, 16>4>3>2-bit ordered",
        frac * 100.0
    ))
}

// 2 ------------------------------------------------------------------------

fn bits_per_param() -> Outcome {
    let scheme = QuantScheme::new(2, 16, 128);
    let bpp = scheme.bits_per_param();
    check(
        (TWO_BIT_BPP_RANGE.0..=TWO_BIT_BPP_RANGE.1).contains(&bpp),
        || format!("bits/param {bpp}"),
    )?;
    let (rows, cols) = (256, 1024);
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let w: Vec<f32> = (0..rows * cols).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let bytes = QuantizedBlock::quantize(&w, &[rows, cols], scheme)
        .unwrap()
        .to_bytes();
    let counted = (bytes.len() - header_len(2)) as f64 * 8.0 / w.len() as f64;
    check(counted == bpp, || {
        format!("formula {bpp} vs serialized {counted}")
    })?;
    Ok(format!(
        "2-bit g16/sg128 = {bpp} bits/param, serialized {counted}"
    ))
}

// 3 ------------------------------------------------------------------------

fn speculation_transparency() -> Outcome {
    let models: Vec<Model> = (0..5).map(|s| Model::init(&toy(s, 6)).unwrap()).collect();
    let corpus = MarkovCorpus::new(32, 0);
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for run in 0..100u64 {
        let model = &models[run as usize % models.len()];
        let prompt = corpus.sequence(7, run, rng.gen_range(1..12));
        let n_new = rng.gen_range(8..40);
        let k = rng.gen_range(0..=8);
        let b = rng.gen_range(1..=4);
        let on = SpeculationConfig {
            enabled: true,
            m: rng.gen_range(1..=b),
            lookahead: rng.gen_range(1..=3),
        };
        let go = |spec| {
            let opts = EngineOptions {
                background_transfers: run % 2 == 0,
                ..recording(
                    CacheConfig {
                        k,
                        b,
                        expert_bytes: 1,
                    },
                    spec,
                )
            };
            generate(model, opts, &prompt, n_new, &mut Sampler::categorical(run)).unwrap()
        };
        let (a, z) = (go(on), go(SpeculationConfig::disabled()));
        check(a.tokens == z.tokens, || format!("run {run}: tokens differ"))?;
        check(a.final_logits == z.final_logits, || {
            format!("run {run}: final logits differ")
        })?;
    }
    Ok("100 seeded runs: tokens and final logits identical".into())
}

// 4 ------------------------------------------------------------------------

/// Explicit recency list per layer, most recent first. A miss loads, then
/// evicts the list tail to the host once the list is over capacity.
fn reference_log(k: usize, layers: usize, bytes: u64, seq: &[ExpertKey]) -> Vec<StoreEvent> {
    let mut lists = vec![Vec::<usize>::new(); layers];
    let mut out = Vec::new();
    let push = |out: &mut Vec<StoreEvent>, kind, key, pos| {
        let seq = out.len() as u64;
        let bytes_moved = match kind {
            EventKind::Hit => 0,
            _ => bytes,
        };
        out.push(StoreEvent {
            seq,
            kind,
            key,
            token_pos: pos,
            bytes_moved,
        });
    };
    for (pos, &key) in seq.iter().enumerate() {
        let list = &mut lists[key.layer];
        if let Some(p) = list.iter().position(|&e| e == key.expert) {
            list.remove(p);
            list.insert(0, key.expert);
            push(&mut out, EventKind::Hit, key, pos);
            continue;
        }
        push(&mut out, EventKind::MissLoad, key, pos);
        if k == 0 {
            continue;
        }
        list.insert(0, key.expert);
        if list.len() > k {
            let victim = list.pop().unwrap();
            push(
                &mut out,
                EventKind::EvictToHost,
                ExpertKey::new(key.layer, victim),
                pos,
            );
        }
    }
    out
}

fn lru_oracle() -> Outcome {
    let (layers, experts, n) = (4, 8, 10_000);
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut total = 0;
    for k in [0, 1, 2, 4, 8] {
        // Half the accesses repeat one of the last few keys of the layer, so
        // hits and evictions are both common.
        let mut seq: Vec<ExpertKey> = Vec::with_capacity(n);
        for _ in 0..n {
            let layer = rng.gen_range(0..layers);
            let recent: Vec<ExpertKey> = seq
                .iter()
                .rev()
                .filter(|x| x.layer == layer)
                .take(3)
                .copied()
                .collect();
            let key = if !recent.is_empty() && rng.gen_bool(0.5) {
                recent[rng.gen_range(0..recent.len())]
            } else {
                ExpertKey::new(layer, rng.gen_range(0..experts))
            };
            seq.push(key);
        }
        let cfg = CacheConfig {
            k,
            b: 0,
            expert_bytes: 7,
        };
        let mut store = TieredStore::without_payload(cfg, layers, experts).unwrap();
        for (pos, &key) in seq.iter().enumerate() {
            store.acquire(key, pos).unwrap();
        }
        let expected = reference_log(k, layers, 7, &seq);
        check(store.events() == expected.as_slice(), || {
            let at = store
                .events()
                .iter()
                .zip(&expected)
                .position(|(a, b)| a != b);
            format!("k={k}: logs diverge at {at:?}")
        })?;
        total += expected.len();
    }
    Ok(format!(
        "k in {{0,1,2,4,8}}: {total} events identical to the recency-list reference"
    ))
}

// 5 ------------------------------------------------------------------------

fn steady(events: &[StoreEvent]) -> f64 {
    steady_state_recall(events, RecallDefinition::DeviceOnly).unwrap()
}

fn lru_recall(trace: &Trace, k: usize) -> f64 {
    let cache = CacheConfig {
        k,
        b: 0,
        expert_bytes: 1,
    };
    steady(
        &replay(trace, cache, &SpeculationConfig::disabled(), None)
            .unwrap()
            .events,
    )
}

/// Top-2 routing drawn uniformly and independently per token. The cache
/// before a token is independent of the token's pair, and by symmetry holds
/// any given expert with probability k/E. Eviction passes over the token's
/// other expert, so for k >= 2 each expert hits exactly when it was resident
/// before the token. With k = 1 the first expert's load always displaces the
/// single slot, so only the first expert can hit.
fn markov_recall(k: usize, e: usize) -> f64 {
    match k {
        0 => 0.0,
        1 => 0.5 / e as f64,
        _ => (k.min(e)) as f64 / e as f64,
    }
}

fn recall_properties() -> Outcome {
    let mut traces: Vec<(String, Trace)> = Vec::new();
    let corpus = MarkovCorpus::new(32, 0);
    for s in 0..3 {
        let model = Model::init(&toy(s, 4)).unwrap();
        traces.push((
            format!("recorded seed {s}"),
            record(&model, &corpus.sequence(5, s, 8), 150, s),
        ));
    }
    for loc in [0.0, 0.5, 0.9] {
        let spec = SyntheticTraceSpec {
            n_tokens: 2000,
            n_layers: 8,
            locality: loc,
            seed: 5,
            ..Default::default()
        };
        traces.push((format!("synthetic locality {loc}"), synth(&spec).unwrap()));
    }
    for (name, t) in &traces {
        let r: Vec<f64> = (0..=8).map(|k| lru_recall(t, k)).collect();
        check(r.windows(2).all(|w| w[0] <= w[1]), || {
            format!("{name}: not monotone {r:?}")
        })?;
        check(r[8] == 1.0, || format!("{name}: recall(k=E) = {}", r[8]))?;
    }

    // Markov oracle: 10^5 tokens, locality 0. Batch means over 8 layers and
    // 10 token blocks give the standard error.
    let (n_tokens, layers, e, blocks) = (100_000, 8, 8, 10);
    let spec = SyntheticTraceSpec {
        n_tokens,
        n_layers: layers,
        n_experts: e,
        top_k: 2,
        locality: 0.0,
        seed: 55,
    };
    let trace = synth(&spec).unwrap();
    let mut summary = Vec::new();
    for k in [1, 2, 4, 6] {
        let cache = CacheConfig {
            k,
            b: 0,
            expert_bytes: 1,
        };
        let ev = replay(&trace, cache, &SpeculationConfig::disabled(), None)
            .unwrap()
            .events;
        let mut hits = vec![0f64; layers * blocks];
        let mut count = vec![0f64; layers * blocks];
        let mut seen = HashSet::new();
        for x in &ev {
            let hit = match x.kind {
                EventKind::Hit => 1.0,
                EventKind::MissLoad => 0.0,
                _ => continue,
            };
            if seen.insert(x.key) {
                continue;
            }
            let bucket = x.key.layer * blocks + x.token_pos * blocks / n_tokens;
            hits[bucket] += hit;
            count[bucket] += 1.0;
        }
        let means: Vec<f64> = hits.iter().zip(&count).map(|(h, c)| h / c).collect();
        let n = means.len() as f64;
        let mean = means.iter().sum::<f64>() / n;
        let var = means.iter().map(|m| (m - mean).powi(2)).sum::<f64>() / (n - 1.0);
        let sigma = (var / n).sqrt();
        let expected = markov_recall(k, e);
        check((mean - expected).abs() <= MARKOV_SIGMAS * sigma, || {
            format!("k={k}: measured {mean:.5} vs oracle {expected:.5} (sigma {sigma:.2e})")
        })?;
        summary.push(format!("k={k} {mean:.4}/{expected:.4}"));
    }
    Ok(format!(
        "monotone on {} traces, recall(k=E)=1; Markov oracle within 3 sigma: {}",
        traces.len(),
        summary.join(", ")
    ))
}

// 6 ------------------------------------------------------------------------

fn pooled_guess_recall(traces: &[Trace], model: &Model, lookahead: usize, m: usize) -> f64 {
    let mut weighted = 0.0;
    let mut total = 0.0;
    for t in traces {
        let n = t.records.iter().filter(|r| r.layer >= lookahead).count() as f64;
        weighted += speculative_recall(t, model, lookahead, m).unwrap() * n;
        total += n;
    }
    weighted / total
}

fn speculative_recall_ordering() -> Outcome {
    let cfg = toy(0, 12);
    let corpus = MarkovCorpus::new(cfg.vocab_size, 0);
    let train = TrainConfig {
        steps: 300,
        batch_size: 8,
        seq_len: 32,
        lr: 3e-3,
        warmup_steps: 30,
        ..Default::default()
    };
    let (model, report) = train_toy(&cfg, &corpus, &train).unwrap();
    check(report.final_loss < report.initial_loss, || {
        format!("training did not learn: {report:?}")
    })?;
    let traces: Vec<Trace> = (0..8)
        .map(|s| record(&model, &corpus.sequence(99, s, 8), 140, s))
        .collect();
    let generated: usize = traces
        .iter()
        .map(|t| t.n_tokens() - t.header.prefill_len)
        .sum();
    check(generated >= 1000, || {
        format!("only {generated} generated tokens")
    })?;
    let e = cfg.n_experts as f64;
    let mut parts = Vec::new();
    for m in [1, 2] {
        let r: Vec<f64> = [1, 2, 10]
            .iter()
            .map(|&la| pooled_guess_recall(&traces, &model, la, m))
            .collect();
        check(r[0] >= r[1] && r[1] >= r[2], || {
            format!("m={m}: lookahead 1/2/10 = {r:?}")
        })?;
        parts.push(format!("m={m}: {:.3} >= {:.3} >= {:.3}", r[0], r[1], r[2]));
        if m == 2 {
            let chance = m as f64 / e;
            check(r[0] > chance, || {
                format!("lookahead 1, m=2: {} <= chance {chance}", r[0])
            })?;
            parts.push(format!("chance {chance}"));
        }
    }
    Ok(format!(
        "{generated} tokens, loss {:.2}->{:.2}; {}",
        report.initial_loss,
        report.final_loss,
        parts.join("; ")
    ))
}

// 7 ------------------------------------------------------------------------

/// Expert loads that compute had to wait on, counting a wait on an unfinished
/// speculative transfer as one.
fn required_transfers(row: &moe_offload::bench::AblationRow) -> i64 {
    (row.report.required_loads + row.report.partial_waits) as i64
}

fn ablation_ordering() -> Outcome {
    let corpus = MarkovCorpus::new(32, 0);
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut checked = 0;
    for s in 0..4 {
        let model = Model::init(&toy(s, 6)).unwrap();
        let trace = record(&model, &corpus.sequence(8, s, 6), 60, s);
        for _ in 0..10 {
            let cost = CostModel {
                h2d_bandwidth: rng.gen_range(1e9..3e10),
                expert_bytes: rng.gen_range(1e6..1e8),
                expert_compute_time: rng.gen_range(1e-6..1e-2),
                attn_compute_time: rng.gen_range(1e-6..1e-2),
                overlap: true,
                pinned: rng.gen_bool(0.5),
                pinned_bandwidth_multiplier: rng.gen_range(1.0..2.0),
            };
            let b = rng.gen_range(1..=4);
            let plan = AblationPlan {
                cache: CacheConfig {
                    k: rng.gen_range(1..8),
                    b,
                    expert_bytes: 1,
                },
                speculation: SpeculationConfig {
                    m: rng.gen_range(1..=b),
                    ..Default::default()
                },
                k_values: vec![],
                m_values: vec![],
            };
            let rows = ablation_suite(&trace, Some(&model), &cost, &plan).unwrap();
            for pair in rows.windows(2) {
                let (a, z) = (&pair[0], &pair[1]);
                check(a.tokens_per_sec >= z.tokens_per_sec, || {
                    format!(
                        "{} {} < {} {}",
                        a.policy, a.tokens_per_sec, z.policy, z.tokens_per_sec
                    )
                })?;
                if required_transfers(a) != required_transfers(z) {
                    check(a.tokens_per_sec > z.tokens_per_sec, || {
                        format!(
                            "{} and {} tie despite different miss counts",
                            a.policy, z.policy
                        )
                    })?;
                }
            }
            checked += 1;
        }
    }

    // Mixtral-like: 32 layers, 8 experts, top-2, k=2 (a 12 GB card), the
    // calibrated 2-bit expert size and PCIe 3.0 bandwidth.
    let model = Model::init(&toy(11, 32)).unwrap();
    let trace = record(&model, &corpus.sequence(9, 0, 16), 100, 11);
    let plan = AblationPlan {
        cache: CacheConfig {
            k: 2,
            b: 4,
            expert_bytes: 1,
        },
        speculation: SpeculationConfig {
            enabled: true,
            m: 2,
            lookahead: 1,
        },
        k_values: vec![],
        m_values: vec![],
    };
    let rows = ablation_suite(
        &trace,
        Some(&model),
        &CostModel::mixtral_calibrated(),
        &plan,
    )
    .unwrap();
    let tps: Vec<f64> = rows.iter().map(|r| r.tokens_per_sec).collect();
    check(tps.windows(2).all(|w| w[0] > w[1]), || {
        format!("calibrated rows not strictly ordered {tps:?}")
    })?;
    let full = tps[0];
    check(
        (CALIBRATED_TPS_BAND.0..=CALIBRATED_TPS_BAND.1).contains(&full),
        || format!("calibrated full algorithm {full:.3} tok/s"),
    )?;
    Ok(format!(
        "{checked} random cost models ordered; calibrated full/no-preload/no-cache/naive = {:.2}/{:.2}/{:.2}/{:.2} tok/s",
        tps[0], tps[1], tps[2], tps[3]
    ))
}

// 8 ------------------------------------------------------------------------

fn quantizer_properties() -> Outcome {
    let schemes = [
        QuantScheme::preset(2).unwrap(),
        QuantScheme::preset(3).unwrap(),
        QuantScheme::preset(4).unwrap(),
        QuantScheme::new(2, 8, 64),
        QuantScheme::new(3, 32, 32),
        QuantScheme::new(4, 128, 128),
    ];
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut worst_ratio: f64 = 0.0;
    for i in 0..1000 {
        let scheme = schemes[i % schemes.len()];
        let rows = rng.gen_range(1..12);
        let cols = rng.gen_range(1..300);
        let spread = 10f32.powf(rng.gen_range(-3.0..2.0));
        let offset = rng.gen_range(-2.0..2.0f32);
        let normal = Normal::new(offset, spread).unwrap();
        let w: Vec<f32> = (0..rows * cols)
            .map(|_| match i % 3 {
                0 => normal.sample(&mut rng),
                1 => offset + spread * rng.gen_range(-1.0..1.0f32),
                _ => (normal.sample(&mut rng) * 4.0).round() * spread,
            })
            .collect();
        let q = QuantizedBlock::quantize(&w, &[rows, cols], scheme).unwrap();
        let deq = q.dequantize().unwrap();
        let zhat = q.dequantized_zeros().unwrap();
        let g = scheme.group_size;
        let padded_cols = cols.div_ceil(g) * g;
        for r in 0..rows {
            let row = &w[r * cols..(r + 1) * cols];
            for c in 0..cols {
                let group = c / g;
                // Exact group minimum, with the row padded by its last value.
                let mut z = row[group * g..((group + 1) * g).min(cols)]
                    .iter()
                    .copied()
                    .fold(f32::INFINITY, f32::min) as f64;
                if (group + 1) * g > cols {
                    z = z.min(row[cols - 1] as f64);
                }
                let flat = r * padded_cols + c;
                let zi = flat / g;
                let bound = q.scale_at(flat) as f64 / 2.0 + (z - zhat[zi] as f64).abs();
                let err = (row[c] as f64 - deq[r * cols + c] as f64).abs();
                let slack = DEQUANT_ULPS * f32::EPSILON as f64 * (row[c].abs() as f64 + bound);
                check(err <= bound + slack, || {
                    format!("matrix {i} {scheme:?}: error {err:e} exceeds bound {bound:e}")
                })?;
                if bound > 0.0 {
                    worst_ratio = worst_ratio.max(err / bound);
                }
            }
        }
    }

    // Every window of eight 3-bit codes packs into a distinct 24-bit pattern
    // and unpacks back to itself.
    let mut seen = vec![false; 1 << 24];
    let mut codes = [0u8; 8];
    for v in 0u32..(1 << 24) {
        for (j, c) in codes.iter_mut().enumerate() {
            *c = ((v >> (21 - 3 * j)) & 7) as u8;
        }
        let packed = pack_codes(&codes, 3);
        check(packed.len() == 3, || {
            "8 codes did not pack into 3 bytes".into()
        })?;
        let word = packed[0] as usize | (packed[1] as usize) << 8 | (packed[2] as usize) << 16;
        check(!seen[word], || format!("window {v:o} collides"))?;
        seen[word] = true;
        check(unpack_codes(&packed, 3, 8).unwrap() == codes, || {
            format!("window {v:o} does not round trip")
        })?;
    }
    Ok(format!(
        "1000 matrices within bound (worst error/bound {worst_ratio:.3}); 8^8 3-bit windows bijective"
    ))
}

// 9 ------------------------------------------------------------------------

fn trace_round_trip() -> Outcome {
    let models: Vec<Model> = (0..5)
        .map(|s| Model::init(&toy(20 + s, 5)).unwrap())
        .collect();
    let corpus = MarkovCorpus::new(32, 0);
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut events = 0;
    for run in 0..50u64 {
        let model = &models[run as usize % models.len()];
        let b = rng.gen_range(1..=4);
        let cache = CacheConfig {
            k: rng.gen_range(0..=8),
            b,
            expert_bytes: 3,
        };
        let spec = if run % 5 == 4 {
            SpeculationConfig::disabled()
        } else {
            SpeculationConfig {
                enabled: true,
                m: rng.gen_range(1..=b),
                lookahead: rng.gen_range(1..=3),
            }
        };
        let prompt = corpus.sequence(10, run, rng.gen_range(1..10));
        let live = generate(
            model,
            recording(cache, spec),
            &prompt,
            rng.gen_range(10..40),
            &mut Sampler::categorical(run),
        )
        .unwrap();
        let trace = live.trace.unwrap();
        let mut buf = Vec::new();
        let loaded = if run % 2 == 0 {
            trace.write_jsonl(&mut buf).unwrap();
            Trace::read_jsonl(buf.as_slice()).unwrap()
        } else {
            trace.write_binary(&mut buf).unwrap();
            Trace::read_binary(buf.as_slice()).unwrap()
        };
        check(loaded == trace, || {
            format!("run {run}: trace changed in serialization")
        })?;
        let replayed = replay(&loaded, cache, &spec, Some(model)).unwrap();
        check(replayed.events == live.events, || {
            let at = replayed
                .events
                .iter()
                .zip(&live.events)
                .position(|(a, b)| a != b);
            format!("run {run}: replayed log diverges at {at:?}")
        })?;
        events += live.events.len();
    }
    Ok(format!("50 runs, {events} events reproduced exactly"))
}

fn main() -> ExitCode {
    let criteria: [Criterion; 9] = [
        ("size accounting", Duration::from_secs(1), size_accounting),
        ("bits per parameter", Duration::from_secs(1), bits_per_param),
        (
            "speculation transparency",
            Duration::from_secs(120),
            speculation_transparency,
        ),
        (
            "LRU oracle equivalence",
            Duration::from_secs(10),
            lru_oracle,
        ),
        (
            "recall properties",
            Duration::from_secs(60),
            recall_properties,
        ),
        (
            "speculative recall ordering",
            Duration::from_secs(300),
            speculative_recall_ordering,
        ),
        (
            "ablation ordering",
            Duration::from_secs(30),
            ablation_ordering,
        ),
        (
            "quantizer properties",
            Duration::from_secs(30),
            quantizer_properties,
        ),
        (
            "trace round trip",
            Duration::from_secs(60),
            trace_round_trip,
        ),
    ];
    let mut failed = 0;
    for (i, (name, limit, f)) in criteria.into_iter().enumerate() {
        let start = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|_| Err("panicked".into()));
        let took = start.elapsed();
        let outcome = match outcome {
            Ok(detail) if took > limit => Err(format!("{detail}; too slow")),
            other => other,
        };
        let (status, detail) = match outcome {
            Ok(d) => ("PASS", d),
            Err(d) => {
                failed += 1;
                ("FAIL", d)
            }
        };
        println!(
            "{status} {}. {name}: {detail} [{:.2}s, limit {}s]",
            i + 1,
            took.as_secs_f64(),
            limit.as_secs()
        );
    }
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
