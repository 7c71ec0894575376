use std::io::Write;

use serde::Serialize;

use super::{naive_windows, simulate_latency, simulate_windows, CostModel, LatencyReport};
use crate::model::Model;
use crate::prefetch::SpeculationConfig;
use crate::store::{count_hits, CacheConfig, RecallDefinition};
use crate::trace::{replay, speculative_recall, Trace};
use crate::{Error, Result};

/// Which configurations [`ablation_suite`] runs besides the four fixed
/// policies.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AblationPlan {
    /// Cache size and staging buffers of the "full" and "no_preload" rows.
    pub cache: CacheConfig,
    pub speculation: SpeculationConfig,
    pub k_values: Vec<usize>,
    pub m_values: Vec<usize>,
}

impl Default for AblationPlan {
    fn default() -> Self {
        Self {
            cache: CacheConfig::default(),
            speculation: SpeculationConfig::default(),
            k_values: vec![0, 1, 2, 4, 8],
            m_values: vec![0, 1, 2],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AblationRow {
    pub policy: String,
    pub k: usize,
    pub m: usize,
    pub recall: f64,
    pub tokens_per_sec: f64,
    pub stall_frac: f64,
    #[serde(skip)]
    pub report: LatencyReport,
}

/// Run the ablation policies over `trace`:
///
/// - `full`: LRU cache of size k plus speculative staging.
/// - `no_preload`: the same cache without speculation.
/// - `no_cache`: k = 0, no speculation.
/// - `naive`: every layer transfers all of its experts on every token.
///
/// then a `k_sweep` and an `m_sweep`. Rows that speculate need `model` and a
/// trace with hidden states; with `model` set to `None` they are left out and
/// the k sweep runs without speculation.
pub fn ablation_suite(
    trace: &Trace,
    model: Option<&Model>,
    cost: &CostModel,
    plan: &AblationPlan,
) -> Result<Vec<AblationRow>> {
    cost.validate()?;
    let h = &trace.header;
    let cache = CacheConfig {
        expert_bytes: cost.expert_bytes.round() as u64,
        ..plan.cache
    };
    let spec = SpeculationConfig {
        enabled: true,
        ..plan.speculation
    };
    let run = |policy: &str, k: usize, spec: SpeculationConfig| -> Result<AblationRow> {
        let b = if spec.enabled {
            cache.b.max(spec.m)
        } else {
            cache.b
        };
        let out = replay(trace, CacheConfig { k, b, ..cache }, &spec, model)?;
        let report = simulate_latency(&out.events, h.prefill_len, cost)?;
        Ok(AblationRow {
            policy: policy.into(),
            k,
            m: if spec.enabled { spec.m } else { 0 },
            recall: out.recall,
            tokens_per_sec: report.tokens_per_sec,
            stall_frac: report.stall_fraction(),
            report,
        })
    };

    let mut rows = Vec::new();
    if model.is_some() {
        rows.push(run("full", cache.k, spec)?);
    }
    rows.push(run("no_preload", cache.k, SpeculationConfig::disabled())?);
    rows.push(run("no_cache", 0, SpeculationConfig::disabled())?);
    let decoded = trace.n_tokens() - h.prefill_len;
    let naive = simulate_windows(
        &naive_windows(decoded, h.n_layers, h.top_k, h.n_experts),
        cost,
    )?;
    rows.push(AblationRow {
        policy: "naive".into(),
        k: 0,
        m: 0,
        recall: 0.0,
        tokens_per_sec: naive.tokens_per_sec,
        stall_frac: naive.stall_fraction(),
        report: naive,
    });
    for &k in &plan.k_values {
        let s = if model.is_some() {
            spec
        } else {
            SpeculationConfig::disabled()
        };
        rows.push(run("k_sweep", k, s)?);
    }
    if model.is_some() {
        for &m in &plan.m_values {
            rows.push(run("m_sweep", cache.k, SpeculationConfig { m, ..spec })?);
        }
    }
    Ok(rows)
}

pub fn write_ablation_csv<W: Write>(rows: &[AblationRow], mut w: W) -> Result<()> {
    writeln!(w, "policy,k,m,recall,tokens_per_sec,stall_frac")?;
    for r in rows {
        writeln!(
            w,
            "{},{},{},{},{},{}",
            r.policy, r.k, r.m, r.recall, r.tokens_per_sec, r.stall_frac
        )?;
    }
    Ok(())
}

/// One point of a recall curve. `kind` is `lru` (x = k, lookahead 0) or
/// `speculative` (x = m).
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RecallPoint {
    pub kind: &'static str,
    pub k_or_m: usize,
    pub lookahead: usize,
    pub recall: f64,
}

/// Steady-state LRU recall against k (compulsory first-use misses left
/// out), pooled over all traces, and, when a model is given,
/// speculative recall against m for each lookahead. Lookaheads at or past
/// the layer count produce no points.
pub fn recall_curves(
    traces: &[Trace],
    model: Option<&Model>,
    k_values: &[usize],
    lookaheads: &[usize],
    m_values: &[usize],
) -> Result<Vec<RecallPoint>> {
    if traces.is_empty() {
        return Err(Error::Empty("no traces"));
    }
    let mut out = Vec::new();
    for &k in k_values {
        let (mut hits, mut total) = (0, 0);
        for t in traces {
            let cache = CacheConfig {
                k,
                b: 0,
                expert_bytes: 1,
            };
            let ev = replay(t, cache, &SpeculationConfig::disabled(), None)?.events;
            let (h, n) = count_hits(&ev, RecallDefinition::DeviceOnly, true);
            hits += h;
            total += n;
        }
        if total == 0 {
            return Err(Error::Empty("traces never reuse an expert"));
        }
        out.push(RecallPoint {
            kind: "lru",
            k_or_m: k,
            lookahead: 0,
            recall: hits as f64 / total as f64,
        });
    }
    let Some(model) = model else { return Ok(out) };
    for &lookahead in lookaheads {
        for &m in m_values {
            let (mut weighted, mut total) = (0.0, 0usize);
            for t in traces {
                let n = t.records.iter().filter(|r| r.layer >= lookahead).count() * t.header.top_k;
                if n == 0 {
                    continue;
                }
                weighted += speculative_recall(t, model, lookahead, m)? * n as f64;
                total += n;
            }
            if total == 0 {
                // Deeper than the model: no point to report.
                continue;
            }
            out.push(RecallPoint {
                kind: "speculative",
                k_or_m: m,
                lookahead,
                recall: weighted / total as f64,
            });
        }
    }
    Ok(out)
}

pub fn write_recall_csv<W: Write>(points: &[RecallPoint], mut w: W) -> Result<()> {
    writeln!(w, "kind,k_or_m,lookahead,recall")?;
    for p in points {
        writeln!(w, "{},{},{},{}", p.kind, p.k_or_m, p.lookahead, p.recall)?;
    }
    Ok(())
}
