//! `MOEL1` checkpoint files.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "MOEL1"
//! u32 config_len | config_len bytes of canonical ModelConfig JSON
//! u32 manifest_len | manifest_len bytes of JSON [{"name","shape","offset"}]
//! raw f32 data; each manifest offset is in bytes from the start of this section
//! ```

use std::collections::HashMap;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Model, ModelConfig, ModelParams};
use crate::{Error, Result};

pub const CHECKPOINT_MAGIC: &[u8; 5] = b"MOEL1";

#[derive(Debug, Serialize, Deserialize)]
struct ManifestEntry {
    name: String,
    shape: Vec<usize>,
    offset: u64,
}

pub fn write_checkpoint<W: Write>(model: &Model, mut w: W) -> Result<()> {
    let tensors = model.params().named_tensors();
    let mut manifest = Vec::with_capacity(tensors.len());
    let mut offset = 0u64;
    for t in &tensors {
        manifest.push(ManifestEntry {
            name: t.name.clone(),
            shape: t.shape.clone(),
            offset,
        });
        offset += 4 * t.data.len() as u64;
    }
    let config = model.config().canonical_json();
    let manifest = serde_json::to_string(&manifest)?;
    w.write_all(CHECKPOINT_MAGIC)?;
    w.write_all(&(config.len() as u32).to_le_bytes())?;
    w.write_all(config.as_bytes())?;
    w.write_all(&(manifest.len() as u32).to_le_bytes())?;
    w.write_all(manifest.as_bytes())?;
    let mut buf = Vec::with_capacity(offset as usize);
    for t in &tensors {
        for v in t.data {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    w.write_all(&buf)?;
    Ok(())
}

pub fn read_checkpoint<R: Read>(mut r: R) -> Result<Model> {
    let mut magic = [0u8; 5];
    r.read_exact(&mut magic)?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(Error::format("checkpoint", "bad magic"));
    }
    let config: ModelConfig = serde_json::from_slice(&read_block(&mut r)?)?;
    let manifest: Vec<ManifestEntry> = serde_json::from_slice(&read_block(&mut r)?)?;
    let mut data = Vec::new();
    r.read_to_end(&mut data)?;
    let index: HashMap<&str, &ManifestEntry> =
        manifest.iter().map(|e| (e.name.as_str(), e)).collect();
    let params = ModelParams::from_named(&config, |name, shape| {
        let entry = index
            .get(name)
            .ok_or_else(|| Error::format("checkpoint", format!("missing tensor {name}")))?;
        if entry.shape != shape {
            return Err(Error::format(
                "checkpoint",
                format!(
                    "tensor {name} has shape {:?}, expected {shape:?}",
                    entry.shape
                ),
            ));
        }
        let n: usize = shape.iter().product();
        let start = entry.offset as usize;
        let bytes = data
            .get(start..start + 4 * n)
            .ok_or_else(|| Error::format("checkpoint", format!("tensor {name} is truncated")))?;
        Ok(bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect())
    })?;
    Model::new(params)
}

fn read_block<R: Read>(r: &mut R) -> Result<Vec<u8>> {
    let mut len = [0u8; 4];
    r.read_exact(&mut len)?;
    let mut buf = vec![0u8; u32::from_le_bytes(len) as usize];
    r.read_exact(&mut buf)?;
    Ok(buf)
}

pub fn save_checkpoint(model: &Model, path: &Path) -> Result<()> {
    let mut buf = Vec::new();
    write_checkpoint(model, &mut buf)?;
    std::fs::write(path, buf)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Model> {
    let bytes = std::fs::read(path)?;
    read_checkpoint(bytes.as_slice())
}
