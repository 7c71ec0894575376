//! Speculative expert loading and the per-token orchestration loop.
//!
//! For each layer the engine runs attention, routes, acquires the selected
//! experts (heaviest first), then guesses the next layer's experts by applying
//! that layer's gate to the current pre-MoE state and stages them while the
//! current layer's experts compute. Guesses only decide what is staged, so
//! outputs are the same with speculation on or off.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::model::{
    top_k_indices, GateOutcome, HiddenState, KvCache, Model, ResolvedExpert, Router, Sampler, Stage,
};
use crate::store::{CacheConfig, ExpertKey, StoreEvent, TieredStore};
use crate::trace::{Trace, TraceHeader, TraceRecord};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SpeculationConfig {
    pub enabled: bool,
    /// Experts staged per layer.
    pub m: usize,
    /// How many layers ahead the guess targets.
    pub lookahead: usize,
}

impl Default for SpeculationConfig {
    fn default() -> Self {
        Self {
            enabled: true,
            m: 2,
            lookahead: 1,
        }
    }
}

impl SpeculationConfig {
    pub fn disabled() -> Self {
        Self {
            enabled: false,
            ..Self::default()
        }
    }

    pub fn validate(&self, staging_buffers: usize) -> Result<()> {
        if self.lookahead == 0 {
            return Err(Error::Config(
                "speculation lookahead must be at least 1".into(),
            ));
        }
        if self.enabled && self.m > staging_buffers {
            return Err(Error::Config(format!(
                "speculating {} experts needs at least as many staging buffers, have {staging_buffers}",
                self.m
            )));
        }
        Ok(())
    }
}

/// Top-`m` experts of `target_layer`'s gate applied to `h`. Past the last
/// layer there is nothing to guess and the list is empty.
pub fn guess_experts<R: Router + ?Sized>(
    router: &R,
    h: &[f32],
    target_layer: usize,
    m: usize,
) -> Vec<ExpertKey> {
    if target_layer >= router.n_layers() {
        return Vec::new();
    }
    top_k_indices(&router.router_logits(target_layer, h), m)
        .into_iter()
        .map(|e| ExpertKey::new(target_layer, e))
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct EngineOptions {
    pub cache: CacheConfig,
    pub speculation: SpeculationConfig,
    pub record_trace: bool,
    /// Store pre-MoE hidden states in the trace (needed for speculative replay).
    pub record_hidden: bool,
    /// Run speculative loads on a helper thread while the current layer's
    /// experts compute. The event log is identical either way.
    pub background_transfers: bool,
}

/// Generation with experts served from a [`TieredStore`].
#[derive(Debug)]
pub struct OffloadEngine<'m> {
    model: &'m Model,
    store: TieredStore,
    opts: EngineOptions,
    kv: KvCache,
    trace: Option<Trace>,
}

impl<'m> OffloadEngine<'m> {
    pub fn new(model: &'m Model, opts: EngineOptions) -> Result<Self> {
        let cfg = model.config();
        opts.speculation.validate(opts.cache.b)?;
        let store = TieredStore::with_payload(opts.cache, cfg.n_layers, cfg.n_experts, |key| {
            model
                .params()
                .expert(key)
                .expect("key within model shape")
                .as_flat()
        })?;
        let trace = opts.record_trace.then(|| {
            let mut header =
                TraceHeader::new(cfg.n_layers, cfg.n_experts, cfg.top_k_gate, cfg.d_model);
            header.model_digest = Some(model.params().digest());
            header.records_hidden = opts.record_hidden;
            Trace::new(header)
        });
        Ok(Self {
            model,
            store,
            opts,
            kv: KvCache::new(cfg.n_layers),
            trace,
        })
    }

    pub fn store(&self) -> &TieredStore {
        &self.store
    }

    pub fn events(&self) -> &[StoreEvent] {
        self.store.events()
    }

    pub fn trace(&self) -> Option<&Trace> {
        self.trace.as_ref()
    }

    /// Positions processed so far.
    pub fn position(&self) -> usize {
        self.kv.len()
    }

    pub fn into_parts(mut self) -> (Vec<StoreEvent>, Option<Trace>) {
        (self.store.take_events(), self.trace)
    }

    fn speculation_keys(&self, h: &HiddenState) -> Vec<ExpertKey> {
        let spec = &self.opts.speculation;
        if !spec.enabled {
            return Vec::new();
        }
        guess_experts(self.model, &h.values, h.layer + spec.lookahead, spec.m)
    }

    /// Stage `keys` and run `compute`, concurrently when background transfers
    /// are on. Both orders leave the store in the same state.
    fn stage_while<T>(
        &mut self,
        keys: &[ExpertKey],
        pos: usize,
        layer: usize,
        compute: impl FnOnce() -> Result<T> + Send,
    ) -> Result<T>
    where
        T: Send,
    {
        let store = &mut self.store;
        if self.opts.background_transfers && !keys.is_empty() {
            std::thread::scope(|s| {
                let loader = s.spawn(|| store.speculative_load(keys, pos, layer));
                let out = compute();
                loader.join().expect("speculative loader panicked")?;
                out
            })
        } else {
            store.speculative_load(keys, pos, layer)?;
            compute()
        }
    }

    fn record(&mut self, outcome: &GateOutcome, h: &HiddenState) {
        if let Some(trace) = &mut self.trace {
            let hidden = self.opts.record_hidden.then(|| h.values.clone());
            trace
                .records
                .push(TraceRecord::from_outcome(outcome, hidden));
        }
    }

    /// Process a prompt one layer at a time across all its tokens: every
    /// distinct expert the layer needs is loaded once, in order of first use,
    /// before any of them computes. Returns next-token logits for the last
    /// prompt token.
    pub fn prefill(&mut self, tokens: &[usize]) -> Result<Vec<f32>> {
        if tokens.is_empty() {
            return Err(Error::Empty("prompt"));
        }
        if !self.kv.is_empty() {
            return Err(Error::Config(
                "prefill must run before any other token".into(),
            ));
        }
        let model = self.model;
        let n_layers = model.config().n_layers;
        let mut hs = tokens
            .iter()
            .enumerate()
            .map(|(pos, &tok)| model.embed(tok, pos))
            .collect::<Result<Vec<_>>>()?;
        let mut records: Vec<Option<TraceRecord>> = vec![None; tokens.len() * n_layers];

        for layer in 0..n_layers {
            let mut pre = Vec::with_capacity(tokens.len());
            for h in &mut hs {
                h.layer = layer;
                h.stage = Stage::PreAttention;
                pre.push(model.attention_block(h, self.kv.layer_mut(layer))?);
            }
            let outcomes = pre
                .iter()
                .map(|h| model.gate(h))
                .collect::<Result<Vec<_>>>()?;

            // Distinct experts in order of first use, each tagged with that token.
            let mut needed: Vec<(ExpertKey, usize)> = Vec::new();
            for (t, g) in outcomes.iter().enumerate() {
                for &key in &g.experts {
                    if !needed.iter().any(|&(k, _)| k == key) {
                        needed.push((key, t));
                    }
                }
            }
            let pinned: Vec<ExpertKey> = needed.iter().map(|&(k, _)| k).collect();
            let mut weights: HashMap<usize, Vec<f32>> = HashMap::new();
            for &(key, t) in &needed {
                let acquired = self.store.acquire_pinned(key, t, &pinned)?;
                let w = acquired.weights.ok_or(Error::MissingWeights(key))?;
                weights.insert(key.expert, w.to_vec());
            }

            let last = pre.last().expect("non-empty prompt");
            let guess = self.speculation_keys(last);
            let cfg = model.config();
            let compute = || {
                pre.iter()
                    .zip(&outcomes)
                    .map(|(h, g)| {
                        let resolved: Vec<_> = g
                            .experts
                            .iter()
                            .map(|&key| ResolvedExpert {
                                key,
                                view: crate::model::expert_view(cfg, &weights[&key.expert]),
                            })
                            .collect();
                        model.moe_forward(h, g, &resolved)
                    })
                    .collect::<Result<Vec<_>>>()
            };
            hs = self.stage_while(&guess, tokens.len() - 1, layer, compute)?;

            if let Some(trace) = &self.trace {
                let keep_hidden = trace.header.records_hidden;
                for (t, (g, h)) in outcomes.iter().zip(&pre).enumerate() {
                    let hidden = keep_hidden.then(|| h.values.clone());
                    records[t * n_layers + layer] = Some(TraceRecord::from_outcome(g, hidden));
                }
            }
        }
        if let Some(trace) = &mut self.trace {
            trace.header.prefill_len = tokens.len();
            trace
                .records
                .extend(records.into_iter().map(|r| r.expect("filled")));
        }
        Ok(model.output_logits(&hs.last().expect("non-empty prompt").values))
    }

    /// Run one token through every layer and return its next-token logits.
    pub fn step(&mut self, token: usize) -> Result<Vec<f32>> {
        let model = self.model;
        let pos = self.kv.len();
        let mut h = model.embed(token, pos)?;
        for layer in 0..model.config().n_layers {
            h.layer = layer;
            h.stage = Stage::PreAttention;
            let pre = model.attention_block(&h, self.kv.layer_mut(layer))?;
            let outcome = model.gate(&pre)?;
            // Experts arrive in descending gate weight, so the heavier one loads first.
            let mut bufs = Vec::with_capacity(outcome.experts.len());
            for &key in &outcome.experts {
                let acquired = self.store.acquire_pinned(key, pos, &outcome.experts)?;
                bufs.push(acquired.weights.ok_or(Error::MissingWeights(key))?.to_vec());
            }
            let guess = self.speculation_keys(&pre);
            let cfg = model.config();
            let compute = || {
                let resolved: Vec<_> = outcome
                    .experts
                    .iter()
                    .zip(&bufs)
                    .map(|(&key, w)| ResolvedExpert {
                        key,
                        view: crate::model::expert_view(cfg, w),
                    })
                    .collect();
                model.moe_forward(&pre, &outcome, &resolved)
            };
            h = self.stage_while(&guess, pos, layer, compute)?;
            self.record(&outcome, &pre);
        }
        Ok(model.output_logits(&h.values))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Generation {
    pub prompt_len: usize,
    /// Newly generated tokens.
    pub tokens: Vec<usize>,
    /// Next-token logits after the last generated token.
    pub final_logits: Vec<f32>,
    pub events: Vec<StoreEvent>,
    pub trace: Option<Trace>,
}

/// Prefill `prompt`, then sample and run `n_new` tokens.
pub fn generate(
    model: &Model,
    opts: EngineOptions,
    prompt: &[usize],
    n_new: usize,
    sampler: &mut Sampler,
) -> Result<Generation> {
    let total = prompt.len() + n_new;
    if total > model.config().max_seq_len {
        return Err(Error::Config(format!(
            "prompt plus {n_new} new tokens exceeds max_seq_len {}",
            model.config().max_seq_len
        )));
    }
    let mut engine = OffloadEngine::new(model, opts)?;
    let mut logits = engine.prefill(prompt)?;
    let mut tokens = Vec::with_capacity(n_new);
    for _ in 0..n_new {
        let tok = sampler.sample(&logits);
        tokens.push(tok);
        logits = engine.step(tok)?;
    }
    let (events, trace) = engine.into_parts();
    Ok(Generation {
        prompt_len: prompt.len(),
        tokens,
        final_logits: logits,
        events,
        trace,
    })
}
