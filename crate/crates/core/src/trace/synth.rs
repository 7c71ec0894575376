use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{Trace, TraceHeader, TraceRecord};
use crate::{Error, Result};

/// Model-free routing trace with first-order temporal locality.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticTraceSpec {
    pub n_tokens: usize,
    pub n_layers: usize,
    pub n_experts: usize,
    pub top_k: usize,
    /// Probability that a token reuses the previous token's experts in a layer.
    pub locality: f64,
    pub seed: u64,
}

impl Default for SyntheticTraceSpec {
    fn default() -> Self {
        Self {
            n_tokens: 1000,
            n_layers: 32,
            n_experts: 8,
            top_k: 2,
            locality: 0.5,
            seed: 0,
        }
    }
}

/// Each layer evolves independently. With probability `locality` a token
/// repeats the previous token's ordered expert list; otherwise it draws a
/// uniformly random ordered list of `top_k` distinct experts. The first token
/// always draws.
pub fn synth(spec: &SyntheticTraceSpec) -> Result<Trace> {
    if !(0.0..=1.0).contains(&spec.locality) {
        return Err(Error::Config(format!(
            "locality {} is outside [0, 1]",
            spec.locality
        )));
    }
    if spec.n_layers == 0 || spec.top_k == 0 || spec.top_k > spec.n_experts {
        return Err(Error::Config(
            "synthetic trace needs 1 <= top_k <= n_experts and n_layers >= 1".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let header = TraceHeader::new(spec.n_layers, spec.n_experts, spec.top_k, 0);
    let mut trace = Trace::new(header);
    trace.records.reserve(spec.n_tokens * spec.n_layers);
    let weights = vec![1.0 / spec.top_k as f32; spec.top_k];
    let mut previous: Vec<Vec<usize>> = vec![Vec::new(); spec.n_layers];
    for t in 0..spec.n_tokens {
        for (l, prev) in previous.iter_mut().enumerate() {
            // Draw the coin unconditionally so the stream layout does not
            // depend on the outcome.
            let reuse = rng.gen_bool(spec.locality);
            if t == 0 || !reuse {
                *prev = sample(&mut rng, spec.n_experts, spec.top_k).into_vec();
            }
            trace.records.push(TraceRecord {
                token_pos: t,
                layer: l,
                experts: prev.clone(),
                weights: weights.clone(),
                hidden: None,
            });
        }
    }
    Ok(trace)
}
