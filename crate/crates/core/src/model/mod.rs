//! The toy MoE transformer.
//!
//! Pre-norm decoder blocks: `x += attn(rms_norm(x))`, then
//! `x += sum_i w_i * expert_i(rms_norm(x))` over the top-k routed experts.
//! Single-token kernels here are shared by the dense reference path and the
//! offloaded engine, which is what makes the two bit-identical.

mod checkpoint;
mod config;
mod corpus;
mod gate;
mod params;
mod sampler;
mod train;

pub use checkpoint::{
    load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint, CHECKPOINT_MAGIC,
};
pub use config::ModelConfig;
pub use corpus::MarkovCorpus;
pub use gate::{
    gate_logits, route, selected_softmax, top_k_indices, GateOutcome, HiddenState, Stage,
};
pub use params::{ExpertView, ExpertWeights, LayerParams, ModelParams, NamedTensor};
pub use sampler::Sampler;
pub use train::{gate_entropy, sequence_loss, train_toy, TrainConfig, TrainReport};

use crate::store::ExpertKey;
use crate::tensor;
use crate::{Error, Result};

/// Cached keys and values for one layer, one row of `d_model` per position.
#[derive(Debug, Clone, Default)]
pub struct LayerKv {
    keys: Vec<f32>,
    values: Vec<f32>,
    len: usize,
}

impl LayerKv {
    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }
}

#[derive(Debug, Clone)]
pub struct KvCache {
    layers: Vec<LayerKv>,
}

impl KvCache {
    pub fn new(n_layers: usize) -> Self {
        Self {
            layers: vec![LayerKv::default(); n_layers],
        }
    }

    pub fn layer_mut(&mut self, layer: usize) -> &mut LayerKv {
        &mut self.layers[layer]
    }

    /// Number of positions cached (taken from the last layer, which is
    /// written last).
    pub fn len(&self) -> usize {
        self.layers.last().map_or(0, |l| l.len)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Anything that can evaluate a layer's gate on a residual vector. Replay uses
/// this to guess experts from recorded hidden states without running the model.
pub trait Router {
    fn n_layers(&self) -> usize;
    fn n_experts(&self) -> usize;
    fn router_logits(&self, layer: usize, h: &[f32]) -> Vec<f32>;
}

impl Router for Model {
    fn n_layers(&self) -> usize {
        self.config().n_layers
    }

    fn n_experts(&self) -> usize {
        self.config().n_experts
    }

    fn router_logits(&self, layer: usize, h: &[f32]) -> Vec<f32> {
        self.gate_logits(layer, h)
    }
}

/// An expert's weights resolved for one MoE application.
#[derive(Debug, Clone, Copy)]
pub struct ResolvedExpert<'a> {
    pub key: ExpertKey,
    pub view: ExpertView<'a>,
}

#[derive(Debug, Clone)]
pub struct Model {
    params: ModelParams,
}

impl Model {
    pub fn new(params: ModelParams) -> Result<Self> {
        params.config.validate()?;
        Ok(Self { params })
    }

    pub fn init(config: &ModelConfig) -> Result<Self> {
        Self::new(ModelParams::init(config)?)
    }

    pub fn config(&self) -> &ModelConfig {
        &self.params.config
    }

    pub fn params(&self) -> &ModelParams {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ModelParams {
        &mut self.params
    }

    pub fn into_params(self) -> ModelParams {
        self.params
    }

    pub fn check_token(&self, token: usize) -> Result<()> {
        let vocab = self.config().vocab_size;
        if token >= vocab {
            return Err(Error::TokenOutOfRange { token, vocab });
        }
        Ok(())
    }

    fn check_layer(&self, layer: usize) -> Result<()> {
        let n_layers = self.config().n_layers;
        if layer >= n_layers {
            return Err(Error::LayerOutOfRange { layer, n_layers });
        }
        Ok(())
    }

    /// Token plus learned absolute position embedding.
    pub fn embed(&self, token: usize, pos: usize) -> Result<HiddenState> {
        self.check_token(token)?;
        if pos >= self.config().max_seq_len {
            return Err(Error::Config(format!(
                "position {pos} exceeds max_seq_len {}",
                self.config().max_seq_len
            )));
        }
        let values = self
            .params
            .tok_emb
            .row(token)
            .iter()
            .zip(self.params.pos_emb.row(pos))
            .map(|(a, b)| a + b)
            .collect();
        Ok(HiddenState::new(pos, 0, Stage::PreAttention, values))
    }

    /// Causal self-attention for one token, appending its key/value to `kv`.
    /// Takes a pre-attention state and returns the pre-MoE state of the same layer.
    pub fn attention_block(&self, h: &HiddenState, kv: &mut LayerKv) -> Result<HiddenState> {
        debug_assert_eq!(h.stage, Stage::PreAttention);
        self.check_layer(h.layer)?;
        if kv.len != h.token_pos {
            return Err(Error::Config(format!(
                "kv cache holds {} positions but token is at {}",
                kv.len, h.token_pos
            )));
        }
        let cfg = self.config();
        let lp = &self.params.layers[h.layer];
        let a = tensor::rms_norm(&h.values, &lp.attn_norm);
        let q = lp.wq.view().matvec(&a);
        kv.keys.extend(lp.wk.view().matvec(&a));
        kv.values.extend(lp.wv.view().matvec(&a));
        kv.len += 1;

        let d = cfg.d_model;
        let hd = cfg.head_dim();
        let scale = 1.0 / (hd as f32).sqrt();
        let mut ctx = vec![0.0f32; d];
        let mut scores = vec![0.0f32; kv.len];
        for head in 0..cfg.n_heads {
            let off = head * hd;
            let qh = &q[off..off + hd];
            for (j, s) in scores.iter_mut().enumerate() {
                *s = tensor::dot(qh, &kv.keys[j * d + off..j * d + off + hd]) * scale;
            }
            tensor::softmax_in_place(&mut scores);
            let out = &mut ctx[off..off + hd];
            for (j, &p) in scores.iter().enumerate() {
                tensor::axpy(p, &kv.values[j * d + off..j * d + off + hd], out);
            }
        }
        let o = lp.wo.view().matvec(&ctx);
        let values = h.values.iter().zip(&o).map(|(x, y)| x + y).collect();
        Ok(HiddenState::new(
            h.token_pos,
            h.layer,
            Stage::PreMoe,
            values,
        ))
    }

    /// Router logits of `layer` applied to an arbitrary residual vector.
    pub fn gate_logits(&self, layer: usize, h: &[f32]) -> Vec<f32> {
        let lp = &self.params.layers[layer];
        gate_logits(lp.gate.view(), &lp.ffn_norm, h)
    }

    /// Route a pre-MoE hidden state through its layer's gate.
    pub fn gate(&self, h: &HiddenState) -> Result<GateOutcome> {
        self.check_layer(h.layer)?;
        if h.stage != Stage::PreMoe {
            return Err(Error::Config(format!(
                "gate expects a pre-MoE state, got {:?}",
                h.stage
            )));
        }
        h.check_finite()?;
        let logits = self.gate_logits(h.layer, &h.values);
        Ok(route(
            h.layer,
            h.token_pos,
            logits,
            self.config().top_k_gate,
        ))
    }

    /// `h + sum_i weights[i] * SwiGLU_i(rms_norm(h))`, accumulated in the
    /// order the outcome lists its experts.
    pub fn moe_forward(
        &self,
        h: &HiddenState,
        outcome: &GateOutcome,
        experts: &[ResolvedExpert<'_>],
    ) -> Result<HiddenState> {
        if experts.len() != outcome.experts.len() {
            let missing = outcome
                .experts
                .get(experts.len())
                .copied()
                .unwrap_or(outcome.experts[0]);
            return Err(Error::MissingWeights(missing));
        }
        for (want, got) in outcome.experts.iter().zip(experts) {
            if *want != got.key {
                return Err(Error::MissingWeights(*want));
            }
        }
        let lp = &self.params.layers[h.layer];
        let x = tensor::rms_norm(&h.values, &lp.ffn_norm);
        let mut acc = vec![0.0f32; h.values.len()];
        for (&w, e) in outcome.weights.iter().zip(experts) {
            let y = swiglu(e.view, &x);
            tensor::axpy(w, &y, &mut acc);
        }
        let values: Vec<f32> = h.values.iter().zip(&acc).map(|(a, b)| a + b).collect();
        if let Some(index) = tensor::first_non_finite(&values) {
            return Err(Error::NonFinite {
                what: "MoE output",
                index,
            });
        }
        Ok(HiddenState::new(
            h.token_pos,
            h.layer,
            Stage::PostMoe,
            values,
        ))
    }

    pub fn output_logits(&self, h: &[f32]) -> Vec<f32> {
        let x = tensor::rms_norm(h, &self.params.final_norm);
        self.params.lm_head.view().matvec(&x)
    }

    /// Reference forward over a whole sequence with every expert read straight
    /// from the parameters. Returns next-token logits for every position.
    pub fn forward_dense(&self, tokens: &[usize]) -> Result<Vec<Vec<f32>>> {
        let mut kv = KvCache::new(self.config().n_layers);
        let mut out = Vec::with_capacity(tokens.len());
        for (pos, &tok) in tokens.iter().enumerate() {
            let mut h = self.embed(tok, pos)?;
            for layer in 0..self.config().n_layers {
                h.layer = layer;
                h.stage = Stage::PreAttention;
                let pre_moe = self.attention_block(&h, kv.layer_mut(layer))?;
                let g = self.gate(&pre_moe)?;
                let resolved: Vec<_> = g
                    .experts
                    .iter()
                    .map(|&key| ResolvedExpert {
                        key,
                        view: self.params.expert(key).expect("expert exists").view(),
                    })
                    .collect();
                h = self.moe_forward(&pre_moe, &g, &resolved)?;
            }
            out.push(self.output_logits(&h.values));
        }
        Ok(out)
    }
}

/// `W_down (silu(W_gate x) * (W_up x))`
pub fn swiglu(e: ExpertView<'_>, x: &[f32]) -> Vec<f32> {
    let g = e.w_gate_proj.matvec(x);
    let u = e.w_up_proj.matvec(x);
    let a: Vec<f32> = g
        .iter()
        .zip(&u)
        .map(|(&g, &u)| tensor::silu(g) * u)
        .collect();
    e.w_down_proj.matvec(&a)
}

pub(crate) fn expert_view<'a>(cfg: &ModelConfig, data: &'a [f32]) -> ExpertView<'a> {
    ExpertView::from_flat(cfg.d_model, cfg.d_ffn, data)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> ModelConfig {
        ModelConfig {
            vocab_size: 16,
            d_model: 16,
            n_layers: 2,
            n_heads: 2,
            d_ffn: 24,
            n_experts: 4,
            top_k_gate: 2,
            max_seq_len: 32,
            seed: 7,
        }
    }

    fn pre_moe_state(model: &Model) -> HiddenState {
        let mut kv = KvCache::new(model.config().n_layers);
        let h = model.embed(3, 0).unwrap();
        model.attention_block(&h, kv.layer_mut(0)).unwrap()
    }

    #[test]
    fn zero_experts_make_moe_the_identity() {
        let mut params = ModelParams::init(&tiny()).unwrap();
        for layer in &mut params.layers {
            for e in &mut layer.experts {
                e.as_flat_mut().fill(0.0);
            }
        }
        let model = Model::new(params).unwrap();
        let h = pre_moe_state(&model);
        let g = model.gate(&h).unwrap();
        let resolved: Vec<_> = g
            .experts
            .iter()
            .map(|&key| ResolvedExpert {
                key,
                view: model.params().expert(key).unwrap().view(),
            })
            .collect();
        let out = model.moe_forward(&h, &g, &resolved).unwrap();
        assert_eq!(out.values, h.values);
        assert_eq!(out.stage, Stage::PostMoe);
    }

    /// Standalone SwiGLU written with plain nested loops, no shared kernels.
    fn naive_swiglu(cfg: &ModelConfig, flat: &[f32], x: &[f32]) -> Vec<f64> {
        let (d, f) = (cfg.d_model, cfg.d_ffn);
        let mut a = vec![0.0f64; f];
        for r in 0..f {
            let mut g = 0.0f64;
            let mut u = 0.0f64;
            for c in 0..d {
                g += flat[r * d + c] as f64 * x[c] as f64;
                u += flat[f * d + r * d + c] as f64 * x[c] as f64;
            }
            a[r] = g / (1.0 + (-g).exp()) * u;
        }
        let mut y = vec![0.0f64; d];
        for r in 0..d {
            for c in 0..f {
                y[r] += flat[2 * f * d + r * f + c] as f64 * a[c];
            }
        }
        y
    }

    #[test]
    fn single_expert_matches_standalone_feed_forward() {
        let cfg = ModelConfig {
            top_k_gate: 1,
            ..tiny()
        };
        let model = Model::init(&cfg).unwrap();
        let h = pre_moe_state(&model);
        let g = model.gate(&h).unwrap();
        assert_eq!(g.weights, vec![1.0]);
        let key = g.experts[0];
        let flat = model.params().expert(key).unwrap().as_flat().to_vec();
        let resolved = [ResolvedExpert {
            key,
            view: expert_view(&cfg, &flat),
        }];
        let out = model.moe_forward(&h, &g, &resolved).unwrap();
        let x = tensor::rms_norm(&h.values, &model.params().layers[0].ffn_norm);
        let y = naive_swiglu(&cfg, &flat, &x);
        for ((o, hv), yv) in out.values.iter().zip(&h.values).zip(&y) {
            assert!((*o as f64 - (*hv as f64 + yv)).abs() < 1e-5);
        }
    }

    #[test]
    fn moe_output_is_independent_of_buffer_location() {
        let model = Model::init(&tiny()).unwrap();
        let h = pre_moe_state(&model);
        let g = model.gate(&h).unwrap();
        // Copies in freshly allocated buffers stand in for cache slots.
        let copies: Vec<Vec<f32>> = g
            .experts
            .iter()
            .map(|&k| model.params().expert(k).unwrap().as_flat().to_vec())
            .collect();
        let from_copies: Vec<_> = g
            .experts
            .iter()
            .zip(&copies)
            .map(|(&key, c)| ResolvedExpert {
                key,
                view: expert_view(model.config(), c),
            })
            .collect();
        let direct: Vec<_> = g
            .experts
            .iter()
            .map(|&key| ResolvedExpert {
                key,
                view: model.params().expert(key).unwrap().view(),
            })
            .collect();
        let a = model.moe_forward(&h, &g, &from_copies).unwrap();
        let b = model.moe_forward(&h, &g, &direct).unwrap();
        assert_eq!(a.values, b.values);

        // And it equals the dense mixture in f64 to float precision.
        let x = tensor::rms_norm(&h.values, &model.params().layers[0].ffn_norm);
        for i in 0..model.config().d_model {
            let mut expected = h.values[i] as f64;
            for (w, c) in g.weights.iter().zip(&copies) {
                expected += *w as f64 * naive_swiglu(model.config(), c, &x)[i];
            }
            assert!((a.values[i] as f64 - expected).abs() < 1e-5);
        }
    }

    #[test]
    fn missing_or_misordered_experts_are_errors() {
        let model = Model::init(&tiny()).unwrap();
        let h = pre_moe_state(&model);
        let g = model.gate(&h).unwrap();
        let one = [ResolvedExpert {
            key: g.experts[0],
            view: model.params().expert(g.experts[0]).unwrap().view(),
        }];
        assert!(matches!(
            model.moe_forward(&h, &g, &one),
            Err(Error::MissingWeights(_))
        ));
        let swapped: Vec<_> = g
            .experts
            .iter()
            .rev()
            .map(|&key| ResolvedExpert {
                key,
                view: model.params().expert(key).unwrap().view(),
            })
            .collect();
        assert!(model.moe_forward(&h, &g, &swapped).is_err());
    }

    #[test]
    fn out_of_vocab_token_is_rejected() {
        let model = Model::init(&tiny()).unwrap();
        assert!(matches!(
            model.embed(16, 0),
            Err(Error::TokenOutOfRange {
                token: 16,
                vocab: 16
            })
        ));
    }

    #[test]
    fn gate_rejects_non_finite_input() {
        let model = Model::init(&tiny()).unwrap();
        let h = HiddenState::new(0, 0, Stage::PreMoe, vec![f32::INFINITY; 16]);
        assert!(model.gate(&h).is_err());
    }

    #[test]
    fn gate_weights_are_normalized() {
        let model = Model::init(&tiny()).unwrap();
        let logits = model.forward_dense(&[1, 2, 3]).unwrap();
        assert_eq!(logits.len(), 3);
        let h = pre_moe_state(&model);
        let g = model.gate(&h).unwrap();
        assert!((g.weights.iter().sum::<f32>() - 1.0).abs() < 1e-6);
        assert!(g.weights[0] >= g.weights[1]);
        assert!(g.weights.iter().all(|&w| w >= 0.0));
    }
}
