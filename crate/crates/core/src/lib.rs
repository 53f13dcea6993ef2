//! Linear-time sequence mixing and selective fine-tuning, end to end.
//!
//! The crate builds up in layers:
//!
//! - [`tensor`], [`kernels`], [`tape`], [`param`], [`gradcheck`]: a minimal
//!   dense f64 tensor, the shared numeric kernels, reverse-mode autodiff
//!   with activation-byte and multiply-accumulate accounting, and a
//!   central-difference gradient checker.
//! - [`mixing`]: SummaryMixing, Windowed SummaryMixing, and the multi-head
//!   self-attention baseline as interchangeable sequence-mixing blocks.
//! - [`encoder`]: a small pre-norm transformer stack with layer replacement,
//!   a learnable weighted sum over all layer outputs, and a prediction head.
//! - [`ctc`], [`train`], [`data`], [`adam`]: CTC loss and greedy decoding,
//!   synthetic dataset generation, Adam with two learning-rate groups, and
//!   the fine-tuning grid.
//! - [`bench`]: the sequence-length scaling harness with wall-time slopes
//!   and activation-memory accounting.
//! - [`oracles`]: naive reference implementations the fast paths are
//!   checked against.

pub mod adam;
pub mod bench;
pub mod checkpoint;
pub mod ctc;
pub mod data;
pub mod encoder;
pub mod error;
pub mod gradcheck;
pub mod kernels;
pub mod mixing;
pub mod oracles;
pub mod param;
pub mod suites;
pub mod tape;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use mixing::{BoundaryMode, MixingConfig, MixingVariant};
pub use param::{ParamId, ParamStore, Parameter};
pub use tape::{Tape, VarId};
pub use tensor::Tensor;
