//! `MOEQ1` quantized checkpoints: the model config, a manifest, then one
//! serialized [`QuantizedBlock`] per named tensor. Expert matrices use the
//! expert scheme, attention projections the attention scheme, everything else
//! is stored as binary16.

use std::collections::HashMap;
use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use super::{MixedQuantConfig, QuantScheme, QuantizedBlock};
use crate::model::{Model, ModelConfig, ModelParams};
use crate::{Error, Result};

pub const QCKPT_MAGIC: &[u8; 5] = b"MOEQ1";

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Entry {
    name: String,
    role: String,
    offset: u64,
    len: u64,
}

fn role_of(name: &str) -> &'static str {
    if name.contains(".experts.") {
        "experts"
    } else if [".wq", ".wk", ".wv", ".wo"]
        .iter()
        .any(|s| name.ends_with(s))
    {
        "attention"
    } else {
        "fp16"
    }
}

/// Quantize every tensor of `model` and write the container. Returns the
/// number of payload bytes per role.
pub fn write_quantized_checkpoint<W: Write>(
    model: &Model,
    config: &MixedQuantConfig,
    mut w: W,
) -> Result<HashMap<&'static str, u64>> {
    config.validate()?;
    let mut manifest = Vec::new();
    let mut payload = Vec::new();
    let mut by_role: HashMap<&'static str, u64> = HashMap::new();
    for t in model.params().named_tensors() {
        let role = role_of(&t.name);
        let scheme = match role {
            "experts" => config.experts,
            "attention" => config.attn,
            _ => QuantScheme::fp16(),
        };
        let bytes = QuantizedBlock::quantize(t.data, &t.shape, scheme)?.to_bytes();
        manifest.push(Entry {
            name: t.name.clone(),
            role: role.into(),
            offset: payload.len() as u64,
            len: bytes.len() as u64,
        });
        *by_role.entry(role).or_default() += bytes.len() as u64;
        payload.extend_from_slice(&bytes);
    }
    let cfg = model.config().canonical_json();
    let manifest = serde_json::to_vec(&manifest)?;
    w.write_all(QCKPT_MAGIC)?;
    w.write_all(&(cfg.len() as u32).to_le_bytes())?;
    w.write_all(cfg.as_bytes())?;
    w.write_all(&(manifest.len() as u32).to_le_bytes())?;
    w.write_all(&manifest)?;
    w.write_all(&payload)?;
    Ok(by_role)
}

/// Read a quantized checkpoint and dequantize it into a full-precision model.
pub fn read_quantized_checkpoint<R: Read>(mut r: R) -> Result<Model> {
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes)?;
    let bad = |d: String| Error::format("quantized checkpoint", d);
    if !bytes.starts_with(QCKPT_MAGIC) {
        return Err(bad("bad magic".into()));
    }
    let mut pos = QCKPT_MAGIC.len();
    let block = |pos: &mut usize| -> Result<&[u8]> {
        let len = bytes
            .get(*pos..*pos + 4)
            .ok_or_else(|| bad("truncated header".into()))?;
        let len = u32::from_le_bytes(len.try_into().expect("4")) as usize;
        let out = bytes
            .get(*pos + 4..*pos + 4 + len)
            .ok_or_else(|| bad("truncated header".into()))?;
        *pos += 4 + len;
        Ok(out)
    };
    let config: ModelConfig = serde_json::from_slice(block(&mut pos)?)?;
    let manifest: Vec<Entry> = serde_json::from_slice(block(&mut pos)?)?;
    let payload = &bytes[pos..];
    let index: HashMap<&str, &Entry> = manifest.iter().map(|e| (e.name.as_str(), e)).collect();
    let params = ModelParams::from_named(&config, |name, shape| {
        let e = index
            .get(name)
            .ok_or_else(|| bad(format!("missing tensor {name}")))?;
        let start = e.offset as usize;
        let data = payload
            .get(start..start + e.len as usize)
            .ok_or_else(|| bad(format!("tensor {name} is truncated")))?;
        let (q, used) = QuantizedBlock::from_bytes(data)?;
        if used != data.len() || q.shape() != shape {
            return Err(bad(format!(
                "tensor {name} does not match its manifest entry"
            )));
        }
        q.dequantize()
    })?;
    Model::new(params)
}
