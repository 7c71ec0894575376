use std::collections::HashSet;
use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use super::ExpertKey;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EventKind {
    Hit,
    StagingHit,
    MissLoad,
    EvictToHost,
    SpeculativeLoad,
    PromoteFromStaging,
}

/// One entry of the store's append-only log. `seq` is strictly increasing.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(from = "EventRecord", into = "EventRecord")]
pub struct StoreEvent {
    pub seq: u64,
    pub kind: EventKind,
    pub key: ExpertKey,
    pub token_pos: usize,
    pub bytes_moved: u64,
}

impl StoreEvent {
    pub fn layer(&self) -> usize {
        self.key.layer
    }

    pub fn expert(&self) -> usize {
        self.key.expert
    }
}

// Flat on-disk shape of an event.
#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct EventRecord {
    seq: u64,
    kind: EventKind,
    layer: usize,
    expert: usize,
    token_pos: usize,
    bytes_moved: u64,
}

impl From<EventRecord> for StoreEvent {
    fn from(r: EventRecord) -> Self {
        Self {
            seq: r.seq,
            kind: r.kind,
            key: ExpertKey::new(r.layer, r.expert),
            token_pos: r.token_pos,
            bytes_moved: r.bytes_moved,
        }
    }
}

impl From<StoreEvent> for EventRecord {
    fn from(e: StoreEvent) -> Self {
        Self {
            seq: e.seq,
            kind: e.kind,
            layer: e.key.layer,
            expert: e.key.expert,
            token_pos: e.token_pos,
            bytes_moved: e.bytes_moved,
        }
    }
}

/// Which events count as a cache hit when computing recall.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RecallDefinition {
    /// Only `hit`.
    DeviceOnly,
    /// `hit` and `staging_hit`.
    #[default]
    DeviceOrStaging,
}

/// Fraction of expert acquisitions served without a synchronous host load.
pub fn recall(events: &[StoreEvent], def: RecallDefinition) -> Result<f64> {
    let (hits, total) = count_hits(events, def, false);
    if total == 0 {
        return Err(Error::Empty("event log has no acquisitions"));
    }
    Ok(hits as f64 / total as f64)
}

/// Recall over acquisitions that are not a key's first use. Compulsory
/// misses are left out, so a cache that holds every expert scores exactly 1.
pub fn steady_state_recall(events: &[StoreEvent], def: RecallDefinition) -> Result<f64> {
    let (hits, total) = count_hits(events, def, true);
    if total == 0 {
        return Err(Error::Empty("event log has no repeated acquisitions"));
    }
    Ok(hits as f64 / total as f64)
}

/// `(hits, acquisitions)`, optionally skipping each key's first acquisition.
pub fn count_hits(
    events: &[StoreEvent],
    def: RecallDefinition,
    skip_first_use: bool,
) -> (u64, u64) {
    let mut seen = HashSet::new();
    let mut hits = 0u64;
    let mut total = 0u64;
    for e in events {
        let hit = match e.kind {
            EventKind::Hit => true,
            EventKind::StagingHit => def == RecallDefinition::DeviceOrStaging,
            EventKind::MissLoad => false,
            _ => continue,
        };
        let first_use = seen.insert(e.key);
        if skip_first_use && first_use {
            continue;
        }
        total += 1;
        hits += hit as u64;
    }
    (hits, total)
}

pub fn write_events_jsonl<W: Write>(events: &[StoreEvent], mut w: W) -> Result<()> {
    for e in events {
        serde_json::to_writer(&mut w, e)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

pub fn read_events_jsonl<R: BufRead>(r: R) -> Result<Vec<StoreEvent>> {
    let mut out = Vec::new();
    for line in r.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line)?);
    }
    Ok(out)
}
