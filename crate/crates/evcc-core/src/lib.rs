//! EVCC: a three-branch vision classifier built from scratch on a small
//! tape-based autodiff engine.
//!
//! The architecture fuses a patch-attention branch, a convolutional branch,
//! and a hybrid conv-attention branch. Token sequences from the first two
//! branches are shortened by importance-ranked pruning (dropped tokens are
//! folded into a learnable summary token), refined by stacked bidirectional
//! cross-attention blocks with element-wise sigmoid gates, and aggregated by
//! a confidence-aware router that interpolates between learned and uniform
//! branch weights. Training uses a multi-task loss with per-branch auxiliary
//! heads.
//!
//! Everything runs on the CPU with deterministic, bit-reproducible kernels;
//! `flops` provides closed-form multiply-accumulate accounting for the whole
//! architecture.

pub mod backbones;
pub mod config;
pub mod data;
pub mod error;
pub mod flops;
pub mod fusion;
pub mod gradcheck;
pub mod model;
pub mod nn;
pub mod objective;
pub mod params;
pub mod pruning;
pub mod rng;
pub mod router;
pub mod tensor;
pub mod train;

pub use error::{EvccError, Result};
pub use rng::Rng;
pub use tensor::{Scalar, Shape, Tape, Tensor, TensorId};
