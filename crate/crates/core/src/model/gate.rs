//! Linear token-level router with top-k selection.

use serde::{Deserialize, Serialize};

use crate::store::ExpertKey;
use crate::tensor::{self, MatView};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    PreAttention,
    PreMoe,
    PostMoe,
}

/// A residual-stream vector tagged with where in the network it was taken.
#[derive(Debug, Clone, PartialEq)]
pub struct HiddenState {
    pub token_pos: usize,
    pub layer: usize,
    pub stage: Stage,
    pub values: Vec<f32>,
}

impl HiddenState {
    pub fn new(token_pos: usize, layer: usize, stage: Stage, values: Vec<f32>) -> Self {
        Self {
            token_pos,
            layer,
            stage,
            values,
        }
    }

    pub fn check_finite(&self) -> Result<()> {
        match tensor::first_non_finite(&self.values) {
            Some(index) => Err(Error::NonFinite {
                what: "hidden state",
                index,
            }),
            None => Ok(()),
        }
    }
}

/// Routing decision for one token at one layer. Experts are ordered by
/// descending gate weight.
#[derive(Debug, Clone, PartialEq)]
pub struct GateOutcome {
    pub layer: usize,
    pub token_pos: usize,
    pub experts: Vec<ExpertKey>,
    pub weights: Vec<f32>,
    pub logits: Vec<f32>,
}

impl GateOutcome {
    pub fn expert_indices(&self) -> Vec<usize> {
        self.experts.iter().map(|k| k.expert).collect()
    }
}

/// Router logits for the normalized input: `W_gate * rms_norm(h)`.
pub fn gate_logits(gate: MatView<'_>, norm_gain: &[f32], h: &[f32]) -> Vec<f32> {
    let x = tensor::rms_norm(h, norm_gain);
    gate.matvec(&x)
}

/// Indices of the `k` largest logits, largest first; ties go to the lower index.
pub fn top_k_indices(logits: &[f32], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..logits.len()).collect();
    // total_cmp gives a strict order on finite inputs; stable sort keeps
    // lower indices first among equals.
    idx.sort_by(|&a, &b| logits[b].total_cmp(&logits[a]));
    idx.truncate(k);
    idx
}

/// Softmax restricted to the selected logits (top-k renormalization).
pub fn selected_softmax(logits: &[f32], selected: &[usize]) -> Vec<f32> {
    let mut w: Vec<f32> = selected.iter().map(|&i| logits[i]).collect();
    tensor::softmax_in_place(&mut w);
    w
}

/// Build a [`GateOutcome`] from raw logits.
pub fn route(layer: usize, token_pos: usize, logits: Vec<f32>, top_k: usize) -> GateOutcome {
    let selected = top_k_indices(&logits, top_k);
    let weights = selected_softmax(&logits, &selected);
    GateOutcome {
        layer,
        token_pos,
        experts: selected
            .into_iter()
            .map(|e| ExpertKey::new(layer, e))
            .collect(),
        weights,
        logits,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn all_zero_logits_pick_lowest_indices_evenly() {
        let g = route(0, 0, vec![0.0; 8], 2);
        assert_eq!(g.expert_indices(), vec![0, 1]);
        assert_eq!(g.weights, vec![0.5, 0.5]);
    }

    #[test]
    fn top_two_of_four_hand_computed() {
        let g = route(3, 7, vec![1.0, 3.0, 2.0, -1.0], 2);
        assert_eq!(g.expert_indices(), vec![1, 2]);
        assert_eq!(g.experts[0], ExpertKey::new(3, 1));
        let e3 = 3.0f64.exp();
        let e2 = 2.0f64.exp();
        let expected = [e3 / (e3 + e2), e2 / (e3 + e2)];
        for (w, x) in g.weights.iter().zip(expected) {
            assert!((*w as f64 - x).abs() < 1e-6, "{w} vs {x}");
        }
        assert!((g.weights[0] - 0.7311).abs() < 1e-4);
        assert!((g.weights[1] - 0.2689).abs() < 1e-4);
    }

    #[test]
    fn k_equal_to_e_selects_everything() {
        let g = route(0, 0, vec![0.3, -2.0], 2);
        let mut e = g.expert_indices();
        e.sort();
        assert_eq!(e, vec![0, 1]);
        assert!((g.weights.iter().sum::<f32>() - 1.0).abs() < 1e-6);
    }

    #[test]
    fn non_finite_hidden_state_is_reported() {
        let h = HiddenState::new(0, 0, Stage::PreMoe, vec![0.0, f32::NAN]);
        assert!(matches!(
            h.check_finite(),
            Err(Error::NonFinite { index: 1, .. })
        ));
    }
}
