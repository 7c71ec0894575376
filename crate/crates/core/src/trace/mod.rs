//! Routing traces: one record per (token, layer) with the selected experts,
//! their gate weights and optionally the pre-MoE hidden state.
//!
//! Two encodings share one logical schema. JSONL is a header line followed by
//! `{"t","l","e","w","h"?}` records; the binary variant starts with `MOET1`,
//! then a u32 header length and the header JSON, then little-endian records.

mod replay;
mod synth;

pub use replay::{replay, speculative_recall, ReplayOutcome};
pub use synth::{synth, SyntheticTraceSpec};

use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::model::GateOutcome;
use crate::{Error, Result};

pub const TRACE_MAGIC: &[u8; 5] = b"MOET1";
const FORMAT_NAME: &str = "moe-trace";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TraceHeader {
    pub format: String,
    pub version: u32,
    /// Digest of the model that produced the trace; `None` for synthetic traces.
    pub model_digest: Option<String>,
    pub n_layers: usize,
    pub n_experts: usize,
    pub top_k: usize,
    pub d_model: usize,
    pub records_hidden: bool,
    /// Leading tokens processed as one prompt; replay loads their experts layer
    /// by layer exactly as the engine does.
    pub prefill_len: usize,
}

impl TraceHeader {
    pub fn new(n_layers: usize, n_experts: usize, top_k: usize, d_model: usize) -> Self {
        Self {
            format: FORMAT_NAME.into(),
            version: 1,
            model_digest: None,
            n_layers,
            n_experts,
            top_k,
            d_model,
            records_hidden: false,
            prefill_len: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TraceRecord {
    #[serde(rename = "t")]
    pub token_pos: usize,
    #[serde(rename = "l")]
    pub layer: usize,
    /// Expert indices in descending gate weight.
    #[serde(rename = "e")]
    pub experts: Vec<usize>,
    #[serde(rename = "w")]
    pub weights: Vec<f32>,
    #[serde(rename = "h", default, skip_serializing_if = "Option::is_none")]
    pub hidden: Option<Vec<f32>>,
}

impl TraceRecord {
    pub fn from_outcome(outcome: &GateOutcome, hidden: Option<Vec<f32>>) -> Self {
        Self {
            token_pos: outcome.token_pos,
            layer: outcome.layer,
            experts: outcome.expert_indices(),
            weights: outcome.weights.clone(),
            hidden,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Trace {
    pub header: TraceHeader,
    pub records: Vec<TraceRecord>,
}

impl Trace {
    pub fn new(header: TraceHeader) -> Self {
        Self {
            header,
            records: Vec::new(),
        }
    }

    /// Number of distinct token positions.
    pub fn n_tokens(&self) -> usize {
        self.records.len() / self.header.n_layers.max(1)
    }

    /// Records of one token, in layer order.
    pub fn token(&self, index: usize) -> &[TraceRecord] {
        let l = self.header.n_layers;
        &self.records[index * l..(index + 1) * l]
    }

    /// Sorted by (token, layer), one record per pair, every token covering all
    /// layers, indices in range, and hidden states present iff the header says so.
    pub fn validate(&self) -> Result<()> {
        let h = &self.header;
        let bad = |detail: String| Err(Error::format("trace", detail));
        if h.format != FORMAT_NAME || h.version != 1 {
            return bad(format!("unsupported format {} v{}", h.format, h.version));
        }
        if h.n_layers == 0 || h.n_experts == 0 || h.top_k == 0 || h.top_k > h.n_experts {
            return bad("header dimensions are inconsistent".into());
        }
        if !self.records.len().is_multiple_of(h.n_layers) {
            return bad("record count is not a multiple of n_layers".into());
        }
        let mut prev_token = None;
        for (i, r) in self.records.iter().enumerate() {
            let token = i / h.n_layers;
            if r.layer != i % h.n_layers {
                return bad(format!(
                    "record {i} has layer {}, expected {}",
                    r.layer,
                    i % h.n_layers
                ));
            }
            if r.layer > 0 && Some(r.token_pos) != prev_token {
                return bad(format!("record {i} changes token inside a layer sweep"));
            }
            if r.layer == 0 {
                if let Some(p) = prev_token {
                    if r.token_pos <= p {
                        return bad(format!("record {i} is out of token order"));
                    }
                }
                if token < h.prefill_len && r.token_pos != token {
                    return bad("prefill tokens must occupy positions 0..prefill_len".into());
                }
            }
            prev_token = Some(r.token_pos);
            if r.experts.len() != h.top_k || r.weights.len() != h.top_k {
                return bad(format!(
                    "record {i} lists {} experts, expected {}",
                    r.experts.len(),
                    h.top_k
                ));
            }
            let mut seen = r.experts.clone();
            seen.sort_unstable();
            seen.dedup();
            if seen.len() != r.experts.len() || r.experts.iter().any(|&e| e >= h.n_experts) {
                return bad(format!(
                    "record {i} has invalid expert indices {:?}",
                    r.experts
                ));
            }
            match (&r.hidden, h.records_hidden) {
                (Some(v), true) if v.len() == h.d_model => {}
                (None, false) => {}
                _ => return bad(format!("record {i} hidden state disagrees with header")),
            }
        }
        if self.n_tokens() < h.prefill_len {
            return bad("prefill_len exceeds the number of tokens".into());
        }
        Ok(())
    }

    pub fn write_jsonl<W: Write>(&self, mut w: W) -> Result<()> {
        serde_json::to_writer(&mut w, &self.header)?;
        w.write_all(b"\n")?;
        for r in &self.records {
            serde_json::to_writer(&mut w, r)?;
            w.write_all(b"\n")?;
        }
        Ok(())
    }

    pub fn read_jsonl<R: BufRead>(r: R) -> Result<Self> {
        let mut lines = r.lines();
        let header_line = lines
            .next()
            .ok_or_else(|| Error::format("trace", "empty file"))??;
        let header: TraceHeader = serde_json::from_str(&header_line)?;
        let mut trace = Trace::new(header);
        for line in lines {
            let line = line?;
            if !line.trim().is_empty() {
                trace.records.push(serde_json::from_str(&line)?);
            }
        }
        trace.validate()?;
        Ok(trace)
    }

    pub fn write_binary<W: Write>(&self, mut w: W) -> Result<()> {
        let header = serde_json::to_vec(&self.header)?;
        let mut buf = Vec::new();
        buf.extend_from_slice(TRACE_MAGIC);
        buf.extend_from_slice(&(header.len() as u32).to_le_bytes());
        buf.extend_from_slice(&header);
        buf.extend_from_slice(&(self.records.len() as u64).to_le_bytes());
        for r in &self.records {
            buf.extend_from_slice(&(r.token_pos as u32).to_le_bytes());
            buf.extend_from_slice(&(r.layer as u32).to_le_bytes());
            for &e in &r.experts {
                buf.extend_from_slice(&(e as u32).to_le_bytes());
            }
            for &v in r.weights.iter().chain(r.hidden.iter().flatten()) {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        }
        w.write_all(&buf)?;
        Ok(())
    }

    pub fn read_binary<R: Read>(mut r: R) -> Result<Self> {
        let mut bytes = Vec::new();
        r.read_to_end(&mut bytes)?;
        let mut cur = Cursor {
            bytes: &bytes,
            pos: 0,
        };
        if cur.take(5)? != TRACE_MAGIC {
            return Err(Error::format("trace", "bad magic"));
        }
        let header_len = cur.u32()? as usize;
        let header: TraceHeader = serde_json::from_slice(cur.take(header_len)?)?;
        let n_records = cur.u64()? as usize;
        let k = header.top_k;
        let d = if header.records_hidden {
            header.d_model
        } else {
            0
        };
        // Guard the allocation against corrupt counts.
        let record_bytes = 8 + 8 * k + 4 * d;
        if n_records.saturating_mul(record_bytes) > bytes.len() {
            return Err(Error::format("trace", "record count exceeds file size"));
        }
        let mut trace = Trace::new(header);
        trace.records.reserve(n_records);
        for _ in 0..n_records {
            let token_pos = cur.u32()? as usize;
            let layer = cur.u32()? as usize;
            let experts = (0..k)
                .map(|_| cur.u32().map(|e| e as usize))
                .collect::<Result<_>>()?;
            let weights = (0..k).map(|_| cur.f32()).collect::<Result<_>>()?;
            let hidden = if trace.header.records_hidden {
                Some((0..d).map(|_| cur.f32()).collect::<Result<_>>()?)
            } else {
                None
            };
            trace.records.push(TraceRecord {
                token_pos,
                layer,
                experts,
                weights,
                hidden,
            });
        }
        if cur.pos != bytes.len() {
            return Err(Error::format("trace", "trailing bytes after records"));
        }
        trace.validate()?;
        Ok(trace)
    }

    /// Binary when the path ends in `.moet`, JSONL otherwise.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut buf = Vec::new();
        if path.extension().is_some_and(|e| e == "moet") {
            self.write_binary(&mut buf)?;
        } else {
            self.write_jsonl(&mut buf)?;
        }
        std::fs::write(path, buf)?;
        Ok(())
    }

    /// Detects the encoding from the first bytes.
    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path)?;
        if bytes.starts_with(TRACE_MAGIC) {
            Self::read_binary(bytes.as_slice())
        } else {
            Self::read_jsonl(BufReader::new(bytes.as_slice()))
        }
    }
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let out = self
            .bytes
            .get(self.pos..self.pos + n)
            .ok_or_else(|| Error::format("trace", "truncated file"))?;
        self.pos += n;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(
            self.take(4)?.try_into().expect("4 bytes"),
        ))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(
            self.take(8)?.try_into().expect("8 bytes"),
        ))
    }

    fn f32(&mut self) -> Result<f32> {
        Ok(f32::from_le_bytes(
            self.take(4)?.try_into().expect("4 bytes"),
        ))
    }
}
