//! Mixture-of-Experts inference with expert offloading.
//!
//! The crate is organised around the pieces an offloading engine needs:
//!
//! - [`model`]: a small deterministic MoE transformer (attention plus top-k gated
//!   SwiGLU experts) with a trainer and a checkpoint format.
//! - [`store`]: the two-tier expert store. Each layer keeps `k` experts on the
//!   fast tier under LRU, `b` shared staging buffers hold speculative copies and
//!   every transfer is logged as a [`store::StoreEvent`].
//! - [`prefetch`]: the per-token orchestration loop and the next-layer gate guess
//!   used for speculative loads.
//! - [`quant`]: affine group quantization with packed n-bit codes and exact size
//!   accounting.
//! - [`trace`]: recording, loading, synthesizing and replaying routing traces.
//! - [`bench`]: the transfer/compute cost model, ablation and recall reports.

pub mod bench;
pub mod error;
pub mod model;
pub mod prefetch;
pub mod quant;
pub mod store;
pub mod tensor;
pub mod trace;

pub use error::{Error, Result};
