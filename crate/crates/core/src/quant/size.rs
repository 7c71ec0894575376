use serde::{Deserialize, Serialize};

use super::QuantScheme;
use crate::model::ModelConfig;
use crate::Result;

const GIB: f64 = (1u64 << 30) as f64;

/// Parameter counts by role.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArchSpec {
    pub name: String,
    pub expert_params: u64,
    pub attention_params: u64,
    /// Token embeddings plus the output projection.
    pub embedding_params: u64,
    pub gate_params: u64,
    pub norm_params: u64,
}

impl ArchSpec {
    /// Mixtral-8x7B: 32 layers, d_model 4096, 8 experts of d_ffn 14336,
    /// grouped-query attention with 8 KV heads of 128, vocabulary 32000.
    pub fn mixtral_8x7b() -> Self {
        let (layers, d, f, experts, vocab, kv) =
            (32u64, 4096u64, 14336u64, 8u64, 32000u64, 1024u64);
        Self {
            name: "mixtral8x7b".into(),
            expert_params: layers * experts * 3 * d * f,
            attention_params: layers * (2 * d * d + 2 * d * kv),
            embedding_params: 2 * vocab * d,
            gate_params: layers * experts * d,
            norm_params: layers * 2 * d + d,
        }
    }

    /// Counts for the toy model. Position embeddings count as embeddings.
    pub fn from_model_config(cfg: &ModelConfig) -> Self {
        let (l, d, f, e, v, s) = (
            cfg.n_layers as u64,
            cfg.d_model as u64,
            cfg.d_ffn as u64,
            cfg.n_experts as u64,
            cfg.vocab_size as u64,
            cfg.max_seq_len as u64,
        );
        Self {
            name: "toy".into(),
            expert_params: l * e * 3 * d * f,
            attention_params: l * 4 * d * d,
            embedding_params: 2 * v * d + s * d,
            gate_params: l * e * d,
            norm_params: l * 2 * d + d,
        }
    }

    pub fn by_name(name: &str) -> Option<Self> {
        match name {
            "mixtral8x7b" | "mixtral-8x7b" => Some(Self::mixtral_8x7b()),
            _ => None,
        }
    }

    pub fn total(&self) -> u64 {
        self.expert_params
            + self.attention_params
            + self.embedding_params
            + self.gate_params
            + self.norm_params
    }

    pub fn experts_fraction(&self) -> f64 {
        match self.total() {
            0 => 0.0,
            t => self.expert_params as f64 / t as f64,
        }
    }
}

/// Attention and expert schemes. Embeddings, the output head, gates and
/// norms always stay 16-bit.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MixedQuantConfig {
    pub attn: QuantScheme,
    pub experts: QuantScheme,
}

impl MixedQuantConfig {
    pub const FP16_ROLES: [&'static str; 4] = ["embeddings", "lm_head", "moe_gates", "layer_norms"];

    pub fn from_bits(attn_bits: u8, expert_bits: u8) -> Result<Self> {
        Ok(Self {
            attn: QuantScheme::preset(attn_bits)?,
            experts: QuantScheme::preset(expert_bits)?,
        })
    }

    pub fn validate(&self) -> Result<()> {
        self.attn.validate()?;
        self.experts.validate()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SizeRow {
    pub role: &'static str,
    pub params: u64,
    pub bits_per_param: f64,
    pub gib: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SizeReport {
    pub arch: String,
    pub rows: Vec<SizeRow>,
    pub total_gib: f64,
    pub experts_fraction: f64,
}

pub fn model_size_report(arch: &ArchSpec, config: &MixedQuantConfig) -> Result<SizeReport> {
    config.validate()?;
    let fp16 = QuantScheme::fp16();
    let rows: Vec<SizeRow> = [
        ("experts", arch.expert_params, &config.experts),
        ("attention", arch.attention_params, &config.attn),
        ("embeddings", arch.embedding_params, &fp16),
        ("gates", arch.gate_params, &fp16),
        ("norms", arch.norm_params, &fp16),
    ]
    .into_iter()
    .map(|(role, params, scheme)| {
        let bpp = scheme.bits_per_param();
        SizeRow {
            role,
            params,
            bits_per_param: bpp,
            gib: params as f64 * bpp / 8.0 / GIB,
        }
    })
    .collect();
    Ok(SizeReport {
        arch: arch.name.clone(),
        total_gib: rows.iter().map(|r| r.gib).sum(),
        rows,
        experts_fraction: arch.experts_fraction(),
    })
}
