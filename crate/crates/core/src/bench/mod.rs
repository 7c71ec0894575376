//! Transfer/compute cost model.
//!
//! The simulator walks an event log one layer window at a time. A window is
//! one layer of one decoded token: attention plus `top_k` expert applications
//! of compute, preceded by whatever required transfers the acquisitions
//! caused. There is a single host-to-device channel.
//!
//! - Required loads (misses) stall compute for their full transfer time.
//! - Speculative loads queue on the channel and make progress, in issue
//!   order, only while some layer computes. Required loads preempt them, so
//!   speculation never delays a miss. A staging hit on a transfer that has
//!   not finished waits for the remainder. With `overlap` off, speculative
//!   transfers simply stall.
//! - Staging hits on completed transfers, promotions and evictions are free.
//!   Evictions go device-to-host, the other direction of a full-duplex link.
//!
//! Prefill windows are not timed; staging done during prefill counts as
//! complete when decoding starts.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::store::{EventKind, ExpertKey, StoreEvent};
use crate::{Error, Result};

mod report;

pub use report::{
    ablation_suite, recall_curves, write_ablation_csv, write_recall_csv, AblationPlan, AblationRow,
    RecallPoint,
};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CostModel {
    /// Bytes per second.
    pub h2d_bandwidth: f64,
    pub expert_bytes: f64,
    /// Seconds per expert application.
    pub expert_compute_time: f64,
    /// Seconds per layer, including gate, norms and embeddings.
    pub attn_compute_time: f64,
    pub overlap: bool,
    pub pinned: bool,
    pub pinned_bandwidth_multiplier: f64,
}

impl Default for CostModel {
    fn default() -> Self {
        Self::mixtral_calibrated()
    }
}

impl CostModel {
    /// Mixtral-8x7B experts at 2-bit (g16/sg128, 2.625 bits per parameter)
    /// over a 12 GB/s PCIe 3.0 link. Expert compute is the time to stream one
    /// quantized expert through a ~300 GB/s memory system; per-layer attention
    /// and bookkeeping is half a millisecond.
    pub fn mixtral_calibrated() -> Self {
        let expert_bytes = 3.0 * 4096.0 * 14336.0 * 2.625 / 8.0;
        Self {
            h2d_bandwidth: 12e9,
            expert_bytes,
            expert_compute_time: expert_bytes / 300e9,
            attn_compute_time: 5e-4,
            overlap: true,
            pinned: false,
            pinned_bandwidth_multiplier: 1.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("h2d_bandwidth", self.h2d_bandwidth),
            ("expert_bytes", self.expert_bytes),
            ("expert_compute_time", self.expert_compute_time),
            ("attn_compute_time", self.attn_compute_time),
        ];
        for (name, v) in positive {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::Config(format!(
                    "cost model {name} must be positive, got {v}"
                )));
            }
        }
        if !(self.pinned_bandwidth_multiplier.is_finite()
            && self.pinned_bandwidth_multiplier >= 1.0)
        {
            return Err(Error::Config(
                "pinned_bandwidth_multiplier must be at least 1".into(),
            ));
        }
        Ok(())
    }

    pub fn effective_bandwidth(&self) -> f64 {
        if self.pinned {
            self.h2d_bandwidth * self.pinned_bandwidth_multiplier
        } else {
            self.h2d_bandwidth
        }
    }

    /// Seconds to move one expert to the device.
    pub fn transfer_time(&self) -> f64 {
        self.expert_bytes / self.effective_bandwidth()
    }
}

/// One layer of one decoded token.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct LayerWindow {
    pub token_pos: usize,
    pub layer: usize,
    /// Experts applied.
    pub acquisitions: usize,
    /// Transfers that must finish before compute.
    pub required_loads: usize,
    /// Experts served from staging, in acquisition order.
    pub staging_hits: Vec<ExpertKey>,
    /// Speculative transfers issued after the acquisitions.
    pub speculative: Vec<ExpertKey>,
}

/// Group decode-phase events into layer windows. Events tagged with a
/// position below `prefill_len` are skipped.
pub fn layer_windows(events: &[StoreEvent], prefill_len: usize) -> Vec<LayerWindow> {
    let mut out: Vec<LayerWindow> = Vec::new();
    for e in events.iter().filter(|e| e.token_pos >= prefill_len) {
        let acquisition = matches!(
            e.kind,
            EventKind::Hit | EventKind::StagingHit | EventKind::MissLoad
        );
        if acquisition {
            let fresh = out.last().is_none_or(|w| {
                w.token_pos != e.token_pos || w.layer != e.key.layer || !w.speculative.is_empty()
            });
            if fresh {
                out.push(LayerWindow {
                    token_pos: e.token_pos,
                    layer: e.key.layer,
                    ..Default::default()
                });
            }
        }
        let Some(w) = out.last_mut() else { continue };
        match e.kind {
            EventKind::Hit => w.acquisitions += 1,
            EventKind::StagingHit => {
                w.acquisitions += 1;
                w.staging_hits.push(e.key);
            }
            EventKind::MissLoad => {
                w.acquisitions += 1;
                w.required_loads += 1;
            }
            EventKind::SpeculativeLoad => w.speculative.push(e.key),
            EventKind::EvictToHost | EventKind::PromoteFromStaging => {}
        }
    }
    out
}

/// Windows of the naive policy: every layer of every token transfers all
/// `n_experts` experts and applies `top_k` of them.
pub fn naive_windows(
    n_tokens: usize,
    n_layers: usize,
    top_k: usize,
    n_experts: usize,
) -> Vec<LayerWindow> {
    (0..n_tokens)
        .flat_map(|t| {
            (0..n_layers).map(move |l| LayerWindow {
                token_pos: t,
                layer: l,
                acquisitions: top_k,
                required_loads: n_experts,
                ..Default::default()
            })
        })
        .collect()
}

/// Seconds per token, with the split `compute + overlapped + stalled`
/// equal to the total.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LatencyReport {
    pub per_token: Vec<f64>,
    pub tokens_per_sec: f64,
    /// Compute with an idle channel.
    pub compute: f64,
    /// Channel time hidden under compute.
    pub overlapped: f64,
    /// Time compute waited on the channel.
    pub stalled: f64,
    /// Misses, each a full transfer compute waited on.
    pub required_loads: usize,
    /// Staging hits that waited on an unfinished speculative transfer.
    pub partial_waits: usize,
    pub cost: CostModel,
}

impl LatencyReport {
    pub fn total(&self) -> f64 {
        self.per_token.iter().sum()
    }

    pub fn stall_fraction(&self) -> f64 {
        self.stalled / self.total()
    }

    /// Time the channel was busy.
    pub fn channel_time(&self) -> f64 {
        self.stalled + self.overlapped
    }
}

/// Simulate decode latency from a store event log.
pub fn simulate_latency(
    events: &[StoreEvent],
    prefill_len: usize,
    cost: &CostModel,
) -> Result<LatencyReport> {
    simulate_windows(&layer_windows(events, prefill_len), cost)
}

pub fn simulate_windows(windows: &[LayerWindow], cost: &CostModel) -> Result<LatencyReport> {
    cost.validate()?;
    let t = cost.transfer_time();
    let mut per_token: BTreeMap<usize, f64> = BTreeMap::new();
    // Unfinished speculative transfers and their remaining seconds.
    let mut queue: Vec<(ExpertKey, f64)> = Vec::new();
    let (mut compute_only, mut overlapped, mut stalled) = (0.0, 0.0, 0.0);
    let mut partial_waits = 0;
    for w in windows {
        let mut stall = w.required_loads as f64 * t;
        for key in &w.staging_hits {
            if let Some(i) = queue.iter().position(|(k, _)| k == key) {
                stall += queue.remove(i).1;
                partial_waits += 1;
            }
        }
        let compute = cost.attn_compute_time + w.acquisitions as f64 * cost.expert_compute_time;
        let mut hidden = 0.0;
        if cost.overlap {
            for key in &w.speculative {
                if !queue.iter().any(|(k, _)| k == key) {
                    queue.push((*key, t));
                }
            }
            let mut budget = compute;
            for (_, left) in queue.iter_mut() {
                let step = left.min(budget);
                *left -= step;
                budget -= step;
                hidden += step;
                if budget <= 0.0 {
                    break;
                }
            }
            queue.retain(|(_, left)| *left > 0.0);
        } else {
            stall += w.speculative.len() as f64 * t;
        }
        compute_only += compute - hidden;
        overlapped += hidden;
        stalled += stall;
        *per_token.entry(w.token_pos).or_default() += compute + stall;
    }
    if per_token.is_empty() {
        return Err(Error::Empty("no decode-phase events to time"));
    }
    let per_token: Vec<f64> = per_token.into_values().collect();
    let mean = per_token.iter().sum::<f64>() / per_token.len() as f64;
    Ok(LatencyReport {
        tokens_per_sec: 1.0 / mean,
        per_token,
        compute: compute_only,
        overlapped,
        stalled,
        required_loads: windows.iter().map(|w| w.required_loads).sum(),
        partial_waits,
        cost: *cost,
    })
}
