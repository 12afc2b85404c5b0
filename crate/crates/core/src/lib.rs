//! Temporal-aware attention for multimodal (text + video frame) token sequences.
//!
//! The crate provides:
//! - [`layout`]: token-role layouts, temporal position ids and adjusted positions,
//! - [`rope`]: interleaved rotary embeddings at real-valued positions, with a complex-arithmetic oracle,
//! - [`masks`]: causal, full-visual, frame-wise block and frame-wise block causal masks,
//! - [`attention`]: masked multi-head attention forward/backward plus a scalar-loop oracle,
//! - [`harness`]: a tiny decoder, synthetic temporal tasks, gamma sweeps and ablation grids,
//! - [`export`]: plain PGM and CSV writers used for masks and attention heatmaps.

pub mod attention;
pub mod error;
pub mod exec;
pub mod export;
pub mod gradcheck;
pub mod harness;
pub mod layout;
pub mod masks;
pub mod numerics;
pub mod rope;
pub mod selftest;

pub use error::{Error, Result};
pub use exec::Execution;
pub use numerics::{Matrix, Real, Rng};
