//! Resolved run configuration.
//!
//! Files are TOML; `model.d_model = 32` and a `[model]` table are the same
//! key. A file or `--set` override may only name keys that exist in the
//! default configuration. The top-level `seed` drives every random stream,
//! so the per-section seed fields cannot be set directly.

use std::path::Path;

use moe_offload::bench::CostModel;
use moe_offload::model::{ModelConfig, TrainConfig};
use moe_offload::prefetch::SpeculationConfig;
use moe_offload::store::CacheConfig;
use moe_offload::trace::SyntheticTraceSpec;
use serde::{Deserialize, Serialize};
use toml::{Table, Value};

use crate::UsageError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    /// Seed of the Markov corpus the model is trained on and prompted from.
    pub corpus_seed: u64,
    pub prompt_len: usize,
    pub n_new: usize,
    /// "categorical" or "greedy".
    pub sampler: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EngineConfig {
    pub background_transfers: bool,
    pub record_hidden: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QuantConfig {
    pub attn_bits: u8,
    pub expert_bits: u8,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReportConfig {
    pub arch: String,
    pub k_values: Vec<usize>,
    pub m_values: Vec<usize>,
    pub lookaheads: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub data: DataConfig,
    pub cache: CacheConfig,
    pub speculation: SpeculationConfig,
    pub engine: EngineConfig,
    pub quant: QuantConfig,
    pub cost: CostModel,
    pub synth: SyntheticTraceSpec,
    pub report: ReportConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            data: DataConfig {
                corpus_seed: 0,
                prompt_len: 8,
                n_new: 64,
                sampler: "categorical".into(),
            },
            cache: CacheConfig::default(),
            speculation: SpeculationConfig::default(),
            engine: EngineConfig {
                background_transfers: false,
                record_hidden: true,
            },
            quant: QuantConfig {
                attn_bits: 4,
                expert_bits: 2,
            },
            cost: CostModel::mixtral_calibrated(),
            synth: SyntheticTraceSpec::default(),
            report: ReportConfig {
                arch: "mixtral8x7b".into(),
                k_values: vec![0, 1, 2, 4, 8],
                m_values: vec![0, 1, 2],
                lookaheads: vec![1, 2, 10],
            },
        }
    }
}

const DERIVED_SEEDS: [&str; 3] = ["model.seed", "train.data_seed", "synth.seed"];

/// Accumulates overrides in precedence order, then resolves.
pub struct ConfigBuilder {
    table: Table,
}

impl ConfigBuilder {
    pub fn new() -> Self {
        let table = Table::try_from(RunConfig::default()).expect("default config serializes");
        Self { table }
    }

    pub fn file(&mut self, path: &Path) -> Result<(), UsageError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| UsageError(format!("cannot read config {}: {e}", path.display())))?;
        let user: Table = text
            .parse()
            .map_err(|e| UsageError(format!("config {}: {e}", path.display())))?;
        overlay(&mut self.table, &user, "")
    }

    /// One `dotted.key=value` assignment. The value is parsed as TOML and
    /// falls back to a bare string.
    pub fn set(&mut self, assignment: &str) -> Result<(), UsageError> {
        let (key, raw) = assignment
            .split_once('=')
            .ok_or_else(|| UsageError(format!("expected key=value, got {assignment:?}")))?;
        let value = format!("v = {}", raw.trim())
            .parse::<Table>()
            .ok()
            .and_then(|mut t| t.remove("v"))
            .unwrap_or_else(|| Value::String(raw.trim().to_string()));
        self.set_value(key.trim(), value)
    }

    pub fn set_value(&mut self, key: &str, value: Value) -> Result<(), UsageError> {
        let mut user = Table::new();
        let mut parts: Vec<&str> = key.split('.').collect();
        let last = parts.pop().expect("split yields one part");
        let mut leaf = Table::new();
        leaf.insert(last.to_string(), value);
        let nested = parts.iter().rev().fold(leaf, |inner, p| {
            let mut t = Table::new();
            t.insert(p.to_string(), Value::Table(inner));
            t
        });
        user.extend(nested);
        overlay(&mut self.table, &user, "")
    }

    pub fn build(self) -> Result<RunConfig, UsageError> {
        let mut cfg: RunConfig = self
            .table
            .try_into()
            .map_err(|e: toml::de::Error| UsageError(format!("invalid config: {}", e.message())))?;
        cfg.model.seed = cfg.seed;
        cfg.train.data_seed = cfg.seed;
        cfg.synth.seed = cfg.seed;
        Ok(cfg)
    }
}

fn overlay(base: &mut Table, user: &Table, prefix: &str) -> Result<(), UsageError> {
    for (k, v) in user {
        let path = if prefix.is_empty() {
            k.clone()
        } else {
            format!("{prefix}.{k}")
        };
        if DERIVED_SEEDS.contains(&path.as_str()) {
            return Err(UsageError(format!(
                "{path} follows the top-level seed; set `seed` instead"
            )));
        }
        match (base.get_mut(k), v) {
            (None, _) => return Err(UsageError(format!("unknown config key {path}"))),
            (Some(Value::Table(b)), Value::Table(u)) => overlay(b, u, &path)?,
            (Some(Value::Table(_)), _) => {
                return Err(UsageError(format!("{path} is a section, not a value")))
            }
            (Some(_), Value::Table(_)) => {
                return Err(UsageError(format!("{path} is a value, not a section")))
            }
            (Some(slot), v) => *slot = v.clone(),
        }
    }
    Ok(())
}

impl RunConfig {
    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// The keys that determine generated tokens; cache and speculation
    /// settings are excluded because they never change the output.
    pub fn generation_echo(&self) -> String {
        #[derive(Serialize)]
        struct Echo<'a> {
            seed: u64,
            model: &'a ModelConfig,
            data: &'a DataConfig,
        }
        toml::to_string(&Echo {
            seed: self.seed,
            model: &self.model,
            data: &self.data,
        })
        .expect("config serializes")
    }
}

/// Prefix every line with `# ` for embedding in CSV and text outputs.
pub fn commented(toml: &str) -> String {
    toml.lines()
        .map(|l| {
            if l.is_empty() {
                "#\n".to_string()
            } else {
                format!("# {l}\n")
            }
        })
        .collect()
}
