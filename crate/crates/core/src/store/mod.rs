//! Two-tier expert store.
//!
//! Every expert has exactly one canonical residence: the host arena or one of
//! its layer's `k` device slots. A miss moves the expert host -> device and,
//! when the layer is over capacity, moves the least recently used resident
//! back to the host. `b` staging buffers shared by all layers hold speculative
//! copies; they never displace cached experts until the copy is actually used,
//! at which point it is promoted into the layer's LRU set.
//!
//! The store can run with or without weight payloads. Trace replay only needs
//! the bookkeeping and the event log.

mod events;

pub use events::{
    count_hits, read_events_jsonl, recall, steady_state_recall, write_events_jsonl, EventKind,
    RecallDefinition, StoreEvent,
};

use std::fmt;
use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ExpertKey {
    pub layer: usize,
    pub expert: usize,
}

impl ExpertKey {
    pub const fn new(layer: usize, expert: usize) -> Self {
        Self { layer, expert }
    }
}

impl fmt::Display for ExpertKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "L{}/E{}", self.layer, self.expert)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CacheConfig {
    /// Device-resident experts per layer.
    pub k: usize,
    /// Staging buffers shared by all layers.
    pub b: usize,
    /// Bytes of one serialized expert; every load or eviction moves this much.
    pub expert_bytes: u64,
}

impl Default for CacheConfig {
    fn default() -> Self {
        Self {
            k: 2,
            b: 4,
            expert_bytes: 1,
        }
    }
}

/// What an acquire found.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AcquireKind {
    Hit,
    StagingHit,
    Miss,
}

#[derive(Debug)]
pub struct Acquired<'a> {
    pub kind: AcquireKind,
    pub events: &'a [StoreEvent],
    /// Flat expert weights, present when the store carries payloads.
    pub weights: Option<&'a [f32]>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct Staged {
    key: ExpertKey,
    /// Monotone staging counter; smaller is older.
    order: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Residence {
    Host,
    Device(usize),
}

/// Where the bytes live. The host arena is one contiguous buffer indexed by
/// key; a host region whose expert currently lives on the device is vacated
/// (filled with NaN) so any read of a non-canonical copy is visible.
#[derive(Debug, Clone)]
struct Payload {
    expert_len: usize,
    host: Vec<f32>,
    /// `n_layers * k` slots.
    device: Vec<f32>,
    staging: Vec<f32>,
    /// Transit buffer used when `k == 0`.
    scratch: Vec<f32>,
}

/// Copy of the bookkeeping, for tests and audits.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StoreSnapshot {
    /// Per layer, device-resident experts most-recent-first.
    pub lru: Vec<Vec<usize>>,
    pub staging: Vec<Option<ExpertKey>>,
}

#[derive(Debug, Clone)]
pub struct TieredStore {
    cfg: CacheConfig,
    n_layers: usize,
    n_experts: usize,
    lru: Vec<Vec<usize>>,
    residence: Vec<Residence>,
    /// Free device slots per layer.
    free_slots: Vec<Vec<usize>>,
    staging: Vec<Option<Staged>>,
    staged_counter: u64,
    events: Vec<StoreEvent>,
    next_seq: u64,
    payload: Option<Payload>,
}

impl TieredStore {
    /// Bookkeeping-only store (no weights), as used by trace replay.
    pub fn without_payload(cfg: CacheConfig, n_layers: usize, n_experts: usize) -> Result<Self> {
        if cfg.k > n_experts {
            return Err(Error::Config(format!(
                "cache size k={} exceeds {} experts per layer",
                cfg.k, n_experts
            )));
        }
        if n_layers == 0 || n_experts == 0 {
            return Err(Error::Config(
                "store needs at least one layer and expert".into(),
            ));
        }
        Ok(Self {
            cfg,
            n_layers,
            n_experts,
            lru: vec![Vec::with_capacity(cfg.k + 1); n_layers],
            residence: vec![Residence::Host; n_layers * n_experts],
            free_slots: (0..n_layers)
                .map(|l| (0..cfg.k).rev().map(|s| l * cfg.k + s).collect())
                .collect(),
            staging: vec![None; cfg.b],
            staged_counter: 0,
            events: Vec::new(),
            next_seq: 0,
            payload: None,
        })
    }

    /// Store holding real weights. `expert_data(key)` supplies each expert's
    /// flat buffer; all buffers must have the same length.
    pub fn with_payload<'a>(
        cfg: CacheConfig,
        n_layers: usize,
        n_experts: usize,
        mut expert_data: impl FnMut(ExpertKey) -> &'a [f32],
    ) -> Result<Self> {
        let mut store = Self::without_payload(cfg, n_layers, n_experts)?;
        let expert_len = expert_data(ExpertKey::new(0, 0)).len();
        let mut host = Vec::with_capacity(n_layers * n_experts * expert_len);
        for l in 0..n_layers {
            for e in 0..n_experts {
                let data = expert_data(ExpertKey::new(l, e));
                if data.len() != expert_len {
                    return Err(Error::Config(format!(
                        "expert {} has {} values, expected {expert_len}",
                        ExpertKey::new(l, e),
                        data.len()
                    )));
                }
                host.extend_from_slice(data);
            }
        }
        store.payload = Some(Payload {
            expert_len,
            host,
            device: vec![0.0; n_layers * cfg.k * expert_len],
            staging: vec![0.0; cfg.b * expert_len],
            scratch: vec![0.0; expert_len],
        });
        Ok(store)
    }

    pub fn config(&self) -> &CacheConfig {
        &self.cfg
    }

    pub fn n_layers(&self) -> usize {
        self.n_layers
    }

    pub fn n_experts(&self) -> usize {
        self.n_experts
    }

    pub fn events(&self) -> &[StoreEvent] {
        &self.events
    }

    pub fn take_events(&mut self) -> Vec<StoreEvent> {
        std::mem::take(&mut self.events)
    }

    fn index(&self, key: ExpertKey) -> usize {
        key.layer * self.n_experts + key.expert
    }

    fn check_key(&self, key: ExpertKey) -> Result<()> {
        if key.layer >= self.n_layers || key.expert >= self.n_experts {
            return Err(Error::UnknownExpert(key));
        }
        Ok(())
    }

    pub fn is_device_resident(&self, key: ExpertKey) -> bool {
        self.check_key(key).is_ok()
            && matches!(self.residence[self.index(key)], Residence::Device(_))
    }

    pub fn is_staged(&self, key: ExpertKey) -> bool {
        self.staging_slot(key).is_some()
    }

    fn staging_slot(&self, key: ExpertKey) -> Option<usize> {
        self.staging
            .iter()
            .position(|s| s.is_some_and(|s| s.key == key))
    }

    pub fn snapshot(&self) -> StoreSnapshot {
        StoreSnapshot {
            lru: self.lru.clone(),
            staging: self.staging.iter().map(|s| s.map(|s| s.key)).collect(),
        }
    }

    fn push_event(&mut self, kind: EventKind, key: ExpertKey, token_pos: usize) {
        let bytes_moved = match kind {
            EventKind::MissLoad | EventKind::EvictToHost | EventKind::SpeculativeLoad => {
                self.cfg.expert_bytes
            }
            EventKind::Hit | EventKind::StagingHit | EventKind::PromoteFromStaging => 0,
        };
        self.events.push(StoreEvent {
            seq: self.next_seq,
            kind,
            key,
            token_pos,
            bytes_moved,
        });
        self.next_seq += 1;
    }

    /// Make `key` available for computation.
    ///
    /// - device-resident: `hit`, moved to most-recent.
    /// - staged: `staging_hit` then `promote_from_staging` into the LRU set,
    ///   evicting the layer's least recently used expert if over `k`.
    /// - otherwise: `miss_load` host -> device, inserted most-recent, LRU evicted if over `k`.
    ///
    /// With `k == 0` nothing is ever cached: a miss streams through a transient
    /// buffer and a staged copy is read in place.
    pub fn acquire(&mut self, key: ExpertKey, token_pos: usize) -> Result<Acquired<'_>> {
        self.acquire_pinned(key, token_pos, &[])
    }

    /// [`acquire`](Self::acquire) for one of several experts a layer step needs.
    /// Eviction passes over experts in `pinned` (the step's other experts)
    /// whenever an unpinned resident exists, so serving one needed expert never
    /// throws out another that is already on the device.
    pub fn acquire_pinned(
        &mut self,
        key: ExpertKey,
        token_pos: usize,
        pinned: &[ExpertKey],
    ) -> Result<Acquired<'_>> {
        self.check_key(key)?;
        let first_event = self.events.len();
        let idx = self.index(key);
        let kind = if let Residence::Device(_) = self.residence[idx] {
            self.push_event(EventKind::Hit, key, token_pos);
            self.touch(key);
            AcquireKind::Hit
        } else if let Some(slot) = self.staging_slot(key) {
            self.push_event(EventKind::StagingHit, key, token_pos);
            if self.cfg.k > 0 {
                self.push_event(EventKind::PromoteFromStaging, key, token_pos);
                self.insert(key, Source::Staging(slot), token_pos, pinned);
                self.staging[slot] = None;
            }
            AcquireKind::StagingHit
        } else {
            self.push_event(EventKind::MissLoad, key, token_pos);
            if self.cfg.k > 0 {
                self.insert(key, Source::Host, token_pos, pinned);
            } else if let Some(p) = &mut self.payload {
                let n = p.expert_len;
                p.scratch.copy_from_slice(&p.host[idx * n..(idx + 1) * n]);
            }
            AcquireKind::Miss
        };
        let weights = self.payload.as_ref().map(|p| {
            let n = p.expert_len;
            match self.residence[idx] {
                Residence::Device(slot) => &p.device[slot * n..(slot + 1) * n],
                Residence::Host => match self.staging_slot(key) {
                    Some(s) => &p.staging[s * n..(s + 1) * n],
                    None => &p.scratch[..],
                },
            }
        });
        Ok(Acquired {
            kind,
            events: &self.events[first_event..],
            weights,
        })
    }

    fn touch(&mut self, key: ExpertKey) {
        let set = &mut self.lru[key.layer];
        let pos = set
            .iter()
            .position(|&e| e == key.expert)
            .expect("device-resident expert is in its LRU set");
        let e = set.remove(pos);
        set.insert(0, e);
    }

    /// Insert as most-recent, evicting the least recent unpinned resident (or
    /// the least recent overall if all are pinned) when the layer is full.
    fn insert(&mut self, key: ExpertKey, src: Source, token_pos: usize, pinned: &[ExpertKey]) {
        let layer = key.layer;
        let evicted = if self.lru[layer].len() == self.cfg.k {
            let set = &mut self.lru[layer];
            let at = set
                .iter()
                .rposition(|&e| !pinned.contains(&ExpertKey::new(layer, e)))
                .unwrap_or(set.len() - 1);
            let victim = ExpertKey::new(layer, set.remove(at));
            let vidx = self.index(victim);
            let Residence::Device(slot) = self.residence[vidx] else {
                unreachable!("LRU member is device-resident")
            };
            if let Some(p) = &mut self.payload {
                let n = p.expert_len;
                let (host, device) = (&mut p.host, &p.device);
                host[vidx * n..(vidx + 1) * n].copy_from_slice(&device[slot * n..(slot + 1) * n]);
            }
            self.residence[vidx] = Residence::Host;
            self.free_slots[layer].push(slot);
            Some(victim)
        } else {
            None
        };

        let slot = self.free_slots[layer]
            .pop()
            .expect("a slot is free after eviction");
        let idx = self.index(key);
        if let Some(p) = &mut self.payload {
            let n = p.expert_len;
            let dst = slot * n..(slot + 1) * n;
            match src {
                Source::Host => p.device[dst].copy_from_slice(&p.host[idx * n..(idx + 1) * n]),
                Source::Staging(s) => p.device[dst].copy_from_slice(&p.staging[s * n..(s + 1) * n]),
            }
            p.host[idx * n..(idx + 1) * n].fill(f32::NAN);
        }
        self.residence[idx] = Residence::Device(slot);
        self.lru[layer].insert(0, key.expert);
        if let Some(victim) = evicted {
            self.push_event(EventKind::EvictToHost, victim, token_pos);
        }
    }

    /// Copy guessed experts into staging buffers without touching any LRU set.
    ///
    /// Keys already device-resident or staged are skipped. When no buffer is
    /// free, the oldest staged entry is overwritten, except entries for
    /// `executing_layer` and entries staged by this same call; if nothing is
    /// eligible the key is dropped.
    pub fn speculative_load(
        &mut self,
        keys: &[ExpertKey],
        token_pos: usize,
        executing_layer: usize,
    ) -> Result<Vec<StoreEvent>> {
        if keys.len() > self.cfg.b {
            return Err(Error::StagingCapacity {
                requested: keys.len(),
                capacity: self.cfg.b,
            });
        }
        for &key in keys {
            self.check_key(key)?;
            if key.layer != keys[0].layer {
                return Err(Error::Config(
                    "speculative keys must all belong to one layer".into(),
                ));
            }
        }
        let first_event = self.events.len();
        let call_start = self.staged_counter;
        for &key in keys {
            if self.is_device_resident(key) || self.is_staged(key) {
                continue;
            }
            let slot = match self.staging.iter().position(Option::is_none) {
                Some(s) => Some(s),
                None => self
                    .staging
                    .iter()
                    .enumerate()
                    .filter_map(|(i, s)| s.map(|s| (i, s)))
                    .filter(|(_, s)| s.key.layer != executing_layer && s.order < call_start)
                    .min_by_key(|(_, s)| s.order)
                    .map(|(i, _)| i),
            };
            let Some(slot) = slot else { continue };
            if let Some(p) = &mut self.payload {
                let n = p.expert_len;
                let idx = key.layer * self.n_experts + key.expert;
                p.staging[slot * n..(slot + 1) * n]
                    .copy_from_slice(&p.host[idx * n..(idx + 1) * n]);
            }
            self.staging[slot] = Some(Staged {
                key,
                order: self.staged_counter,
            });
            self.staged_counter += 1;
            self.push_event(EventKind::SpeculativeLoad, key, token_pos);
        }
        Ok(self.events[first_event..].to_vec())
    }

    /// Canonical weights of `key`, wherever they live.
    pub fn canonical_weights(&self, key: ExpertKey) -> Option<&[f32]> {
        let p = self.payload.as_ref()?;
        self.check_key(key).ok()?;
        let n = p.expert_len;
        let idx = self.index(key);
        Some(match self.residence[idx] {
            Residence::Device(slot) => &p.device[slot * n..(slot + 1) * n],
            Residence::Host => &p.host[idx * n..(idx + 1) * n],
        })
    }

    /// Check the residency invariants: each layer holds at most `k` device
    /// experts, LRU sets agree with residence, every expert has exactly one
    /// canonical copy, and staging holds copies of host-resident experts only.
    pub fn audit(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Config(format!("store audit: {msg}")));
        let mut device_count = 0;
        for (layer, set) in self.lru.iter().enumerate() {
            if set.len() > self.cfg.k {
                return fail(format!("layer {layer} holds {} > k experts", set.len()));
            }
            let mut seen = set.clone();
            seen.sort_unstable();
            seen.dedup();
            if seen.len() != set.len() {
                return fail(format!("layer {layer} LRU has duplicates"));
            }
            for &e in set {
                if !matches!(
                    self.residence[layer * self.n_experts + e],
                    Residence::Device(_)
                ) {
                    return fail(format!("layer {layer} expert {e} in LRU but not on device"));
                }
            }
            device_count += set.len();
            if set.len() + self.free_slots[layer].len() != self.cfg.k {
                return fail(format!("layer {layer} slot accounting broken"));
            }
        }
        let resident = self
            .residence
            .iter()
            .filter(|r| matches!(r, Residence::Device(_)))
            .count();
        if resident != device_count {
            return fail("residence map disagrees with LRU sets".into());
        }
        let staged: Vec<_> = self.staging.iter().flatten().collect();
        if staged.len() > self.cfg.b {
            return fail("staging over capacity".into());
        }
        for s in &staged {
            if self.is_device_resident(s.key) {
                return fail(format!("staged {} is also device-resident", s.key));
            }
        }
        if let Some(p) = &self.payload {
            let n = p.expert_len;
            for (idx, r) in self.residence.iter().enumerate() {
                let host_valid = !p.host[idx * n..(idx + 1) * n].iter().any(|v| v.is_nan());
                match r {
                    Residence::Host if !host_valid && n > 0 => {
                        return fail(format!("host copy {idx} vacated while canonical"));
                    }
                    Residence::Device(_) if host_valid && n > 0 => {
                        return fail(format!("expert {idx} has two live copies"));
                    }
                    _ => {}
                }
            }
        }
        Ok(())
    }

    /// Range of event indices produced since `mark`.
    pub fn events_since(&self, mark: usize) -> Range<usize> {
        mark..self.events.len()
    }
}

#[derive(Debug, Clone, Copy)]
enum Source {
    Host,
    Staging(usize),
}
