use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use super::ModelConfig;
use crate::store::ExpertKey;
use crate::tensor::{MatView, Matrix};
use crate::{Error, Result};

/// One SwiGLU expert stored as a single contiguous buffer laid out as
/// `[w_gate_proj (d_ffn x d_model) | w_up_proj (d_ffn x d_model) | w_down_proj (d_model x d_ffn)]`.
///
/// The contiguous layout is what the expert store moves between tiers as one copy.
#[derive(Debug, Clone, PartialEq)]
pub struct ExpertWeights {
    pub key: ExpertKey,
    d_model: usize,
    d_ffn: usize,
    data: Vec<f32>,
}

impl ExpertWeights {
    pub fn from_flat(key: ExpertKey, d_model: usize, d_ffn: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != 3 * d_model * d_ffn {
            return Err(Error::format(
                "expert weights",
                format!(
                    "expected {} values, got {}",
                    3 * d_model * d_ffn,
                    data.len()
                ),
            ));
        }
        Ok(Self {
            key,
            d_model,
            d_ffn,
            data,
        })
    }

    pub fn zeros(key: ExpertKey, d_model: usize, d_ffn: usize) -> Self {
        Self {
            key,
            d_model,
            d_ffn,
            data: vec![0.0; 3 * d_model * d_ffn],
        }
    }

    pub fn param_count(&self) -> usize {
        self.data.len()
    }

    pub fn as_flat(&self) -> &[f32] {
        &self.data
    }

    pub fn as_flat_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn view(&self) -> ExpertView<'_> {
        ExpertView::from_flat(self.d_model, self.d_ffn, &self.data)
    }
}

/// Borrowed view of an expert's three projections inside a flat buffer.
#[derive(Debug, Clone, Copy)]
pub struct ExpertView<'a> {
    pub w_gate_proj: MatView<'a>,
    pub w_up_proj: MatView<'a>,
    pub w_down_proj: MatView<'a>,
}

impl<'a> ExpertView<'a> {
    pub fn from_flat(d_model: usize, d_ffn: usize, data: &'a [f32]) -> Self {
        let n = d_model * d_ffn;
        assert_eq!(data.len(), 3 * n, "expert buffer has the wrong length");
        Self {
            w_gate_proj: MatView::new(d_ffn, d_model, &data[..n]),
            w_up_proj: MatView::new(d_ffn, d_model, &data[n..2 * n]),
            w_down_proj: MatView::new(d_model, d_ffn, &data[2 * n..]),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams {
    pub attn_norm: Vec<f32>,
    pub wq: Matrix,
    pub wk: Matrix,
    pub wv: Matrix,
    pub wo: Matrix,
    pub ffn_norm: Vec<f32>,
    /// `n_experts x d_model` router.
    pub gate: Matrix,
    pub experts: Vec<ExpertWeights>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub config: ModelConfig,
    pub tok_emb: Matrix,
    pub pos_emb: Matrix,
    pub layers: Vec<LayerParams>,
    pub final_norm: Vec<f32>,
    pub lm_head: Matrix,
}

impl ModelParams {
    /// Seeded initialization. Residual-branch output projections are scaled
    /// down with depth.
    pub fn init(config: &ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let d = config.d_model;
        let f = config.d_ffn;
        let in_std = 1.0 / (d as f32).sqrt();
        let depth_scale = 1.0 / (2.0 * config.n_layers as f32).sqrt();

        let tok_emb = Matrix::random_normal(config.vocab_size, d, 1.0, &mut rng);
        let pos_emb = Matrix::random_normal(config.max_seq_len, d, 0.1, &mut rng);
        let mut layers = Vec::with_capacity(config.n_layers);
        for l in 0..config.n_layers {
            let wq = Matrix::random_normal(d, d, in_std, &mut rng);
            let wk = Matrix::random_normal(d, d, in_std, &mut rng);
            let wv = Matrix::random_normal(d, d, in_std, &mut rng);
            let wo = Matrix::random_normal(d, d, in_std * depth_scale, &mut rng);
            let gate = Matrix::random_normal(config.n_experts, d, in_std, &mut rng);
            let experts = (0..config.n_experts)
                .map(|e| {
                    let mut data = Vec::with_capacity(3 * d * f);
                    data.extend(Matrix::random_normal(f, d, in_std, &mut rng).into_vec());
                    data.extend(Matrix::random_normal(f, d, in_std, &mut rng).into_vec());
                    let down_std = depth_scale / (f as f32).sqrt();
                    data.extend(Matrix::random_normal(d, f, down_std, &mut rng).into_vec());
                    ExpertWeights::from_flat(ExpertKey::new(l, e), d, f, data)
                })
                .collect::<Result<Vec<_>>>()?;
            layers.push(LayerParams {
                attn_norm: vec![1.0; d],
                wq,
                wk,
                wv,
                wo,
                ffn_norm: vec![1.0; d],
                gate,
                experts,
            });
        }
        let lm_head = Matrix::random_normal(config.vocab_size, d, in_std, &mut rng);
        Ok(Self {
            config: config.clone(),
            tok_emb,
            pos_emb,
            layers,
            final_norm: vec![1.0; d],
            lm_head,
        })
    }

    pub fn expert(&self, key: ExpertKey) -> Option<&ExpertWeights> {
        self.layers.get(key.layer)?.experts.get(key.expert)
    }

    /// Every tensor with its canonical name and shape, in a fixed order.
    pub fn named_tensors(&self) -> Vec<NamedTensor<'_>> {
        let d = self.config.d_model;
        let f = self.config.d_ffn;
        let mut out = vec![
            NamedTensor::matrix("tok_emb", &self.tok_emb),
            NamedTensor::matrix("pos_emb", &self.pos_emb),
        ];
        for (l, layer) in self.layers.iter().enumerate() {
            out.push(NamedTensor::vector(
                format!("layers.{l}.attn_norm"),
                &layer.attn_norm,
            ));
            out.push(NamedTensor::matrix(format!("layers.{l}.wq"), &layer.wq));
            out.push(NamedTensor::matrix(format!("layers.{l}.wk"), &layer.wk));
            out.push(NamedTensor::matrix(format!("layers.{l}.wv"), &layer.wv));
            out.push(NamedTensor::matrix(format!("layers.{l}.wo"), &layer.wo));
            out.push(NamedTensor::vector(
                format!("layers.{l}.ffn_norm"),
                &layer.ffn_norm,
            ));
            out.push(NamedTensor::matrix(format!("layers.{l}.gate"), &layer.gate));
            for (e, expert) in layer.experts.iter().enumerate() {
                let n = d * f;
                let flat = expert.as_flat();
                let prefix = format!("layers.{l}.experts.{e}");
                out.push(NamedTensor {
                    name: format!("{prefix}.w_gate_proj"),
                    shape: vec![f, d],
                    data: &flat[..n],
                });
                out.push(NamedTensor {
                    name: format!("{prefix}.w_up_proj"),
                    shape: vec![f, d],
                    data: &flat[n..2 * n],
                });
                out.push(NamedTensor {
                    name: format!("{prefix}.w_down_proj"),
                    shape: vec![d, f],
                    data: &flat[2 * n..],
                });
            }
        }
        out.push(NamedTensor::vector(
            "final_norm".to_string(),
            &self.final_norm,
        ));
        out.push(NamedTensor::matrix("lm_head", &self.lm_head));
        out
    }

    /// Rebuild parameters from `(name, shape, data)` triples as produced by
    /// [`ModelParams::named_tensors`].
    pub fn from_named(
        config: &ModelConfig,
        mut lookup: impl FnMut(&str, &[usize]) -> Result<Vec<f32>>,
    ) -> Result<Self> {
        config.validate()?;
        let d = config.d_model;
        let f = config.d_ffn;
        let mut mat = |name: &str, rows: usize, cols: usize| -> Result<Matrix> {
            Ok(Matrix::from_vec(rows, cols, lookup(name, &[rows, cols])?))
        };
        let tok_emb = mat("tok_emb", config.vocab_size, d)?;
        let pos_emb = mat("pos_emb", config.max_seq_len, d)?;
        let mut layers = Vec::with_capacity(config.n_layers);
        for l in 0..config.n_layers {
            let attn_norm = mat(&format!("layers.{l}.attn_norm"), 1, d)?.into_vec();
            let wq = mat(&format!("layers.{l}.wq"), d, d)?;
            let wk = mat(&format!("layers.{l}.wk"), d, d)?;
            let wv = mat(&format!("layers.{l}.wv"), d, d)?;
            let wo = mat(&format!("layers.{l}.wo"), d, d)?;
            let ffn_norm = mat(&format!("layers.{l}.ffn_norm"), 1, d)?.into_vec();
            let gate = mat(&format!("layers.{l}.gate"), config.n_experts, d)?;
            let mut experts = Vec::with_capacity(config.n_experts);
            for e in 0..config.n_experts {
                let prefix = format!("layers.{l}.experts.{e}");
                let mut data = mat(&format!("{prefix}.w_gate_proj"), f, d)?.into_vec();
                data.extend(mat(&format!("{prefix}.w_up_proj"), f, d)?.into_vec());
                data.extend(mat(&format!("{prefix}.w_down_proj"), d, f)?.into_vec());
                experts.push(ExpertWeights::from_flat(ExpertKey::new(l, e), d, f, data)?);
            }
            layers.push(LayerParams {
                attn_norm,
                wq,
                wk,
                wv,
                wo,
                ffn_norm,
                gate,
                experts,
            });
        }
        let final_norm = mat("final_norm", 1, d)?.into_vec();
        let lm_head = mat("lm_head", config.vocab_size, d)?;
        Ok(Self {
            config: config.clone(),
            tok_emb,
            pos_emb,
            layers,
            final_norm,
            lm_head,
        })
    }

    /// SHA-256 over the canonical config and every tensor's little-endian bytes.
    pub fn digest(&self) -> String {
        let mut h = Sha256::new();
        h.update(self.config.canonical_json().as_bytes());
        for t in self.named_tensors() {
            h.update(t.name.as_bytes());
            for v in t.data {
                h.update(v.to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }

    pub fn param_count(&self) -> usize {
        self.named_tensors().iter().map(|t| t.data.len()).sum()
    }
}

#[derive(Debug, Clone)]
pub struct NamedTensor<'a> {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: &'a [f32],
}

impl<'a> NamedTensor<'a> {
    fn matrix(name: impl Into<String>, m: &'a Matrix) -> Self {
        Self {
            name: name.into(),
            shape: vec![m.rows(), m.cols()],
            data: m.as_slice(),
        }
    }

    fn vector(name: String, v: &'a [f32]) -> Self {
        Self {
            name,
            shape: vec![1, v.len()],
            data: v,
        }
    }
}
