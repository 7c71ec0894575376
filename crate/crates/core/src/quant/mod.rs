//! Affine group quantization with packed n-bit storage.
//!
//! Every `group_size` consecutive weights share a zero-point (the group
//! minimum) and every `scale_group_size` weights share one 16-bit scale large
//! enough for the widest group they cover. Zero-points are themselves
//! quantized to `meta_bits` with one affine (min, step) pair per block.
//!
//! Serialized block, little-endian:
//!
//! ```text
//! u8 version | u8 bits | u32 group_size | u32 scale_group_size | u8 meta_bits
//! u8 scale_bits | u8 ndim | ndim x u64 shape | u32 pad_count
//! f32 zero_min | u16 zero_step (binary16)
//! codes:  ceil(n * bits / 8) bytes, LSB-first
//! zeros:  ceil(n_groups * meta_bits / 8) bytes, LSB-first
//! scales: n_scale_groups x u16 (binary16)
//! ```
//!
//! `n` counts padded weights: each row is padded to a multiple of
//! `group_size` with its last value. `bits = 16` stores binary16 values and
//! no metadata.

mod checkpoint;
mod size;

pub use checkpoint::{read_quantized_checkpoint, write_quantized_checkpoint, QCKPT_MAGIC};
pub use size::{model_size_report, ArchSpec, MixedQuantConfig, SizeReport, SizeRow};

use half::f16;
use serde::{Deserialize, Serialize};

use crate::tensor::first_non_finite;
use crate::{Error, Result};

const VERSION: u8 = 1;
const SCALE_BITS: u8 = 16;
/// Values within this relative margin of the top of a range still map to the
/// top code; keeps the stored scale stable under re-quantization.
const RANGE_SLACK: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QuantScheme {
    pub bits: u8,
    pub group_size: usize,
    pub scale_group_size: usize,
    /// Precision of the stored zero-points.
    pub meta_bits: u8,
    pub scale_storage_bits: u8,
}

impl QuantScheme {
    pub const fn new(bits: u8, group_size: usize, scale_group_size: usize) -> Self {
        Self {
            bits,
            group_size,
            scale_group_size,
            meta_bits: 8,
            scale_storage_bits: SCALE_BITS,
        }
    }

    pub const fn fp16() -> Self {
        Self::new(16, 1, 1)
    }

    /// The three low-bit schemes used for Mixtral, by bit width.
    pub fn preset(bits: u8) -> Result<Self> {
        match bits {
            16 => Ok(Self::fp16()),
            4 => Ok(Self::new(4, 64, 256)),
            3 => Ok(Self::new(3, 64, 128)),
            2 => Ok(Self::new(2, 16, 128)),
            _ => Err(Error::Config(format!(
                "no preset for {bits}-bit quantization"
            ))),
        }
    }

    pub fn is_passthrough(&self) -> bool {
        self.bits == 16
    }

    pub fn validate(&self) -> Result<()> {
        if self.is_passthrough() {
            return Ok(());
        }
        if !(2..=4).contains(&self.bits) {
            return Err(Error::Config(format!(
                "unsupported bit width {}",
                self.bits
            )));
        }
        if self.group_size == 0 || self.scale_group_size == 0 {
            return Err(Error::Config("group sizes must be positive".into()));
        }
        if !self.scale_group_size.is_multiple_of(self.group_size) {
            return Err(Error::Config(format!(
                "scale group size {} is not a multiple of group size {}",
                self.scale_group_size, self.group_size
            )));
        }
        if !(1..=8).contains(&self.meta_bits) {
            return Err(Error::Config(format!(
                "zero-point precision {} is not in 1..=8",
                self.meta_bits
            )));
        }
        if self.scale_storage_bits != SCALE_BITS {
            return Err(Error::Config("scales are stored as 16-bit floats".into()));
        }
        Ok(())
    }

    /// Average stored bits per weight: codes plus one zero-point per group
    /// plus one scale per scale group. Per-block header bytes are excluded;
    /// see [`header_len`].
    pub fn bits_per_param(&self) -> f64 {
        if self.is_passthrough() {
            return 16.0;
        }
        self.bits as f64
            + self.meta_bits as f64 / self.group_size as f64
            + self.scale_storage_bits as f64 / self.scale_group_size as f64
    }

    fn levels(&self) -> u32 {
        (1u32 << self.bits) - 1
    }
}

/// Fixed header bytes of a serialized block with `ndim` dimensions.
pub const fn header_len(ndim: usize) -> usize {
    1 + 1 + 4 + 4 + 1 + 1 + 1 + 8 * ndim + 4 + 4 + 2
}

/// Pack `codes` (each below `2^bits`) LSB-first.
pub fn pack_codes(codes: &[u8], bits: u8) -> Vec<u8> {
    debug_assert!((1..=8).contains(&bits));
    let mut out = vec![0u8; (codes.len() * bits as usize).div_ceil(8)];
    let mut bit = 0usize;
    for &c in codes {
        debug_assert!((c as u32) < (1u32 << bits), "code {c} exceeds {bits} bits");
        let v = (c as u16) << (bit % 8);
        out[bit / 8] |= v as u8;
        if bit % 8 + bits as usize > 8 {
            out[bit / 8 + 1] |= (v >> 8) as u8;
        }
        bit += bits as usize;
    }
    out
}

/// Inverse of [`pack_codes`].
pub fn unpack_codes(bytes: &[u8], bits: u8, n: usize) -> Result<Vec<u8>> {
    if bytes.len() < (n * bits as usize).div_ceil(8) {
        return Err(Error::format("packed codes", "buffer too short"));
    }
    let mask = (1u16 << bits) - 1;
    let mut out = Vec::with_capacity(n);
    let mut bit = 0usize;
    for _ in 0..n {
        let lo = bytes[bit / 8] as u16;
        let hi = bytes.get(bit / 8 + 1).copied().unwrap_or(0) as u16;
        out.push((((lo | hi << 8) >> (bit % 8)) & mask) as u8);
        bit += bits as usize;
    }
    Ok(out)
}

/// Smallest positive binary16 value not below `x`.
fn f16_at_least(x: f64) -> Result<f16> {
    debug_assert!(x > 0.0);
    let mut h = f16::from_f64(x);
    if h.to_f64() < x {
        h = f16::from_bits(h.to_bits() + 1);
    }
    if !h.is_finite() {
        return Err(Error::Config(format!(
            "quantization step {x} overflows a 16-bit scale"
        )));
    }
    Ok(h)
}

/// Step covering `range` with `levels` intervals, or 1 for a degenerate range.
fn covering_step(range: f64, levels: u32) -> Result<f16> {
    if range <= 0.0 {
        return Ok(f16::ONE);
    }
    f16_at_least(range * (1.0 - RANGE_SLACK) / levels as f64)
}

#[derive(Debug, Clone, PartialEq)]
pub struct QuantizedBlock {
    scheme: QuantScheme,
    shape: Vec<usize>,
    pad_count: usize,
    zero_min: f32,
    zero_step: f16,
    codes: Vec<u8>,
    zeros: Vec<u8>,
    scales: Vec<f16>,
}

fn rows_cols(shape: &[usize]) -> Result<(usize, usize)> {
    match shape {
        [] => Err(Error::Config("cannot quantize a scalar".into())),
        [n] => Ok((1, *n)),
        [lead @ .., last] => Ok((lead.iter().product(), *last)),
    }
}

impl QuantizedBlock {
    pub fn scheme(&self) -> &QuantScheme {
        &self.scheme
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn pad_count(&self) -> usize {
        self.pad_count
    }

    pub fn packed_codes(&self) -> &[u8] {
        &self.codes
    }

    fn padded_cols(&self) -> usize {
        let (_, cols) = rows_cols(&self.shape).expect("validated shape");
        cols + self.pad_count
    }

    fn padded_len(&self) -> usize {
        let (rows, _) = rows_cols(&self.shape).expect("validated shape");
        rows * self.padded_cols()
    }

    /// Stored scale for the weight at padded flat index `i`.
    pub fn scale_at(&self, i: usize) -> f32 {
        self.scales[i / self.scheme.scale_group_size].to_f32()
    }

    /// Dequantized zero-points, one per group.
    pub fn dequantized_zeros(&self) -> Result<Vec<f32>> {
        let n_groups = self.padded_len() / self.scheme.group_size;
        let q = unpack_codes(&self.zeros, self.scheme.meta_bits, n_groups)?;
        Ok(q.into_iter().map(|q| self.zero_from_code(q)).collect())
    }

    fn zero_from_code(&self, q: u8) -> f32 {
        (self.zero_min as f64 + q as f64 * self.zero_step.to_f64()) as f32
    }

    /// Row-padded copy of `values` (shape `rows x cols`), padding each row to
    /// a multiple of `g` with its last value.
    pub fn pad_rows(values: &[f32], rows: usize, cols: usize, g: usize) -> Vec<f32> {
        let padded = cols.div_ceil(g) * g;
        let mut out = Vec::with_capacity(rows * padded);
        for r in 0..rows {
            let row = &values[r * cols..(r + 1) * cols];
            out.extend_from_slice(row);
            let last = row.last().copied().unwrap_or(0.0);
            out.resize(out.len() + padded - cols, last);
        }
        out
    }

    pub fn quantize(values: &[f32], shape: &[usize], scheme: QuantScheme) -> Result<Self> {
        scheme.validate()?;
        let (rows, cols) = rows_cols(shape)?;
        if rows * cols != values.len() {
            return Err(Error::Config(format!(
                "{} values do not fill shape {shape:?}",
                values.len()
            )));
        }
        if let Some(index) = first_non_finite(values) {
            return Err(Error::NonFinite {
                what: "quantizer input",
                index,
            });
        }
        if scheme.is_passthrough() {
            let codes = values
                .iter()
                .flat_map(|&v| f16::from_f32(v).to_le_bytes())
                .collect();
            return Ok(Self {
                scheme,
                shape: shape.to_vec(),
                pad_count: 0,
                zero_min: 0.0,
                zero_step: f16::ONE,
                codes,
                zeros: Vec::new(),
                scales: Vec::new(),
            });
        }
        if cols == 0 {
            return Err(Error::Config("cannot quantize empty rows".into()));
        }

        let g = scheme.group_size;
        let sg = scheme.scale_group_size;
        let padded = Self::pad_rows(values, rows, cols, g);
        let pad_count = padded.len() / rows - cols;

        let groups: Vec<(f32, f32)> = padded
            .chunks(g)
            .map(|c| {
                c.iter()
                    .fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), &v| {
                        (lo.min(v), hi.max(v))
                    })
            })
            .collect();

        let scales = groups
            .chunks(sg / g)
            .map(|gs| {
                let widest = gs
                    .iter()
                    .map(|&(lo, hi)| hi as f64 - lo as f64)
                    .fold(0.0, f64::max);
                covering_step(widest, scheme.levels())
            })
            .collect::<Result<Vec<_>>>()?;

        let zero_min = groups.iter().map(|g| g.0).fold(f32::INFINITY, f32::min);
        let zero_max = groups.iter().map(|g| g.0).fold(f32::NEG_INFINITY, f32::max);
        let zero_levels = (1u32 << scheme.meta_bits) - 1;
        let zero_step = covering_step(zero_max as f64 - zero_min as f64, zero_levels)?;
        let zero_codes: Vec<u8> = groups
            .iter()
            .map(|&(lo, _)| {
                let q = ((lo as f64 - zero_min as f64) / zero_step.to_f64()).round();
                q.clamp(0.0, zero_levels as f64) as u8
            })
            .collect();

        let levels = scheme.levels() as f64;
        let codes: Vec<u8> = padded
            .iter()
            .enumerate()
            .map(|(i, &w)| {
                let z = groups[i / g].0 as f64;
                let s = scales[i / sg].to_f64();
                ((w as f64 - z) / s).round().clamp(0.0, levels) as u8
            })
            .collect();

        Ok(Self {
            scheme,
            shape: shape.to_vec(),
            pad_count,
            zero_min,
            zero_step,
            codes: pack_codes(&codes, scheme.bits),
            zeros: pack_codes(&zero_codes, scheme.meta_bits),
            scales,
        })
    }

    /// `s * code + z` per weight, padding stripped.
    pub fn dequantize(&self) -> Result<Vec<f32>> {
        let (rows, cols) = rows_cols(&self.shape)?;
        if self.scheme.is_passthrough() {
            return Ok(self
                .codes
                .chunks_exact(2)
                .map(|b| f16::from_le_bytes([b[0], b[1]]).to_f32())
                .collect());
        }
        let n = self.padded_len();
        let codes = unpack_codes(&self.codes, self.scheme.bits, n)?;
        let zeros = self.dequantized_zeros()?;
        let g = self.scheme.group_size;
        let pc = self.padded_cols();
        let mut out = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                let i = r * pc + c;
                out.push(self.scale_at(i) * codes[i] as f32 + zeros[i / g]);
            }
        }
        Ok(out)
    }

    fn expected_lengths(&self) -> (usize, usize, usize) {
        if self.scheme.is_passthrough() {
            return (2 * self.shape.iter().product::<usize>(), 0, 0);
        }
        let n = self.padded_len();
        let s = &self.scheme;
        (
            (n * s.bits as usize).div_ceil(8),
            (n / s.group_size * s.meta_bits as usize).div_ceil(8),
            n.div_ceil(s.scale_group_size),
        )
    }

    pub fn serialized_len(&self) -> usize {
        let (c, z, s) = self.expected_lengths();
        header_len(self.shape.len()) + c + z + 2 * s
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let s = &self.scheme;
        let mut out = Vec::with_capacity(self.serialized_len());
        out.push(VERSION);
        out.push(s.bits);
        out.extend_from_slice(&(s.group_size as u32).to_le_bytes());
        out.extend_from_slice(&(s.scale_group_size as u32).to_le_bytes());
        out.push(s.meta_bits);
        out.push(s.scale_storage_bits);
        out.push(self.shape.len() as u8);
        for &d in &self.shape {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        out.extend_from_slice(&(self.pad_count as u32).to_le_bytes());
        out.extend_from_slice(&self.zero_min.to_le_bytes());
        out.extend_from_slice(&self.zero_step.to_le_bytes());
        out.extend_from_slice(&self.codes);
        out.extend_from_slice(&self.zeros);
        for sc in &self.scales {
            out.extend_from_slice(&sc.to_le_bytes());
        }
        out
    }

    /// Parse one block from the front of `bytes`; returns it with the number
    /// of bytes consumed.
    pub fn from_bytes(bytes: &[u8]) -> Result<(Self, usize)> {
        let bad = |d: &str| Error::format("quantized block", d);
        let mut pos = 0usize;
        let mut take = |n: usize| -> Result<&[u8]> {
            let s = bytes.get(pos..pos + n).ok_or_else(|| bad("truncated"))?;
            pos += n;
            Ok(s)
        };
        if take(1)?[0] != VERSION {
            return Err(bad("unsupported version"));
        }
        let bits = take(1)?[0];
        let group_size = u32::from_le_bytes(take(4)?.try_into().expect("4")) as usize;
        let scale_group_size = u32::from_le_bytes(take(4)?.try_into().expect("4")) as usize;
        let meta_bits = take(1)?[0];
        let scale_storage_bits = take(1)?[0];
        let ndim = take(1)?[0] as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(u64::from_le_bytes(take(8)?.try_into().expect("8")) as usize);
        }
        let pad_count = u32::from_le_bytes(take(4)?.try_into().expect("4")) as usize;
        let zero_min = f32::from_le_bytes(take(4)?.try_into().expect("4"));
        let zero_step = f16::from_le_bytes(take(2)?.try_into().expect("2"));
        let scheme = QuantScheme {
            bits,
            group_size,
            scale_group_size,
            meta_bits,
            scale_storage_bits,
        };
        scheme.validate().map_err(|e| bad(&e.to_string()))?;
        let (_, cols) = rows_cols(&shape).map_err(|_| bad("empty shape"))?;
        let expected_pad = if scheme.is_passthrough() {
            0
        } else {
            cols.div_ceil(group_size) * group_size - cols
        };
        if pad_count != expected_pad {
            return Err(bad("pad count disagrees with shape"));
        }
        let numel = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d));
        if numel.is_none_or(|n| n > bytes.len().saturating_mul(8)) {
            return Err(bad("shape exceeds the data present"));
        }
        let mut block = Self {
            scheme,
            shape,
            pad_count,
            zero_min,
            zero_step,
            codes: Vec::new(),
            zeros: Vec::new(),
            scales: Vec::new(),
        };
        let (nc, nz, ns) = block.expected_lengths();
        block.codes = take(nc)?.to_vec();
        block.zeros = take(nz)?.to_vec();
        block.scales = take(2 * ns)?
            .chunks_exact(2)
            .map(|b| f16::from_le_bytes([b[0], b[1]]))
            .collect();
        Ok((block, pos))
    }
}

#[cfg(test)]
mod tests;
