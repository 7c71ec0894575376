use super::Trace;
use crate::model::{Model, Router};
use crate::prefetch::{guess_experts, SpeculationConfig};
use crate::store::{recall, CacheConfig, ExpertKey, RecallDefinition, StoreEvent, TieredStore};
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct ReplayOutcome {
    pub events: Vec<StoreEvent>,
    /// Recall under the default definition (device or staging).
    pub recall: f64,
}

/// Drive a store with a recorded trace, issuing acquires and speculative loads
/// in exactly the order the live engine would.
///
/// Speculation needs recorded hidden states and the gates of the model that
/// produced them; `model` is checked against the trace's digest when the trace
/// carries one.
pub fn replay(
    trace: &Trace,
    cache: CacheConfig,
    spec: &SpeculationConfig,
    model: Option<&Model>,
) -> Result<ReplayOutcome> {
    trace.validate()?;
    let h = &trace.header;
    let router = if spec.enabled {
        spec.validate(cache.b)?;
        if !h.records_hidden {
            return Err(Error::NoHiddenStates);
        }
        let model = model.ok_or_else(|| {
            Error::Config("speculative replay needs the model's gate weights".into())
        })?;
        check_model(trace, model)?;
        Some(model)
    } else {
        None
    };

    let l_count = h.n_layers;
    let mut store = TieredStore::without_payload(cache, l_count, h.n_experts)?;
    let speculate =
        |store: &mut TieredStore, layer: usize, pos: usize, hidden: &[f32]| -> Result<()> {
            if let Some(r) = router {
                let guess = guess_experts(r, hidden, layer + spec.lookahead, spec.m);
                store.speculative_load(&guess, pos, layer)?;
            }
            Ok(())
        };

    let prefill = h.prefill_len;
    if prefill > 0 {
        for layer in 0..l_count {
            let order = prefill_order(trace, layer);
            let pinned: Vec<ExpertKey> = order
                .iter()
                .map(|&(e, _)| ExpertKey::new(layer, e))
                .collect();
            for (key, (_, pos)) in pinned.iter().zip(&order) {
                store.acquire_pinned(*key, *pos, &pinned)?;
            }
            let last = &trace.records[(prefill - 1) * l_count + layer];
            speculate(
                &mut store,
                layer,
                prefill - 1,
                last.hidden.as_deref().unwrap_or(&[]),
            )?;
        }
    }
    for r in &trace.records[prefill * l_count..] {
        let keys: Vec<ExpertKey> = r
            .experts
            .iter()
            .map(|&e| ExpertKey::new(r.layer, e))
            .collect();
        for &key in &keys {
            store.acquire_pinned(key, r.token_pos, &keys)?;
        }
        speculate(
            &mut store,
            r.layer,
            r.token_pos,
            r.hidden.as_deref().unwrap_or(&[]),
        )?;
    }
    let events = store.take_events();
    let recall = recall(&events, RecallDefinition::default())?;
    Ok(ReplayOutcome { events, recall })
}

/// Distinct experts a layer needs during prefill, in first-use order, each
/// tagged with the first token that used it.
pub(crate) fn prefill_order(trace: &Trace, layer: usize) -> Vec<(usize, usize)> {
    let l_count = trace.header.n_layers;
    let mut order: Vec<(usize, usize)> = Vec::new();
    for t in 0..trace.header.prefill_len {
        let r = &trace.records[t * l_count + layer];
        for &e in &r.experts {
            if !order.iter().any(|&(x, _)| x == e) {
                order.push((e, r.token_pos));
            }
        }
    }
    order
}

fn check_model(trace: &Trace, model: &Model) -> Result<()> {
    let h = &trace.header;
    let cfg = model.config();
    if cfg.n_layers != h.n_layers || cfg.n_experts != h.n_experts || cfg.d_model != h.d_model {
        return Err(Error::TraceMismatch(format!(
            "trace has {}x{} experts with d_model {}, model has {}x{} with {}",
            h.n_layers, h.n_experts, h.d_model, cfg.n_layers, cfg.n_experts, cfg.d_model
        )));
    }
    if let Some(digest) = &h.model_digest {
        if *digest != model.params().digest() {
            return Err(Error::TraceMismatch(
                "model digest differs from the trace's".into(),
            ));
        }
    }
    Ok(())
}

/// Mean fraction of each record's experts that appear among the top `m`
/// experts guessed from the hidden state `lookahead` layers earlier, using
/// the target layer's gate. Records without a layer that far back are skipped.
pub fn speculative_recall<R: Router + ?Sized>(
    trace: &Trace,
    router: &R,
    lookahead: usize,
    m: usize,
) -> Result<f64> {
    trace.validate()?;
    let h = &trace.header;
    if !h.records_hidden {
        return Err(Error::NoHiddenStates);
    }
    if router.n_layers() != h.n_layers || router.n_experts() != h.n_experts {
        return Err(Error::TraceMismatch(
            "router shape differs from the trace".into(),
        ));
    }
    let mut hits = 0usize;
    let mut total = 0usize;
    for (i, r) in trace.records.iter().enumerate() {
        if r.layer < lookahead {
            continue;
        }
        let source = &trace.records[i - lookahead];
        let hidden = source.hidden.as_deref().expect("validated");
        let guess = guess_experts(router, hidden, r.layer, m);
        hits += r
            .experts
            .iter()
            .filter(|&&e| guess.iter().any(|g| g.expert == e))
            .count();
        total += r.experts.len();
    }
    if total == 0 {
        return Err(Error::Empty("no record has a layer lookahead steps back"));
    }
    Ok(hits as f64 / total as f64)
}
