//! Refines paired visual-feature / textual-concept matrices into aligned
//! image representations by iterated mutual attention, and feeds them to a
//! family of LSTM captioning decoders.
//!
//! The crate is organized bottom-up:
//!
//! - [`tensor`]: dense f64 tensors with a reverse-mode tape and Adam.
//! - [`attention`]: scaled dot-product heads, the multi-head wrapper, the
//!   position-wise feed-forward block, and the source-side post-op sequence.
//! - [`mia`]: the mutual iterative attention stack with shared parameters,
//!   layer anchors, fusion, and attention traces.
//! - [`decoders`]: five baseline captioning decoders plus greedy decoding.
//! - [`data`]: planted-alignment synthetic scenes and the feature-file
//!   container on disk.
//! - [`train`]: teacher-forced training, checkpoints, BLEU, gradient
//!   checking, trace export, evaluation, and the iteration sweep.
//!
//! With the default `parallel` feature, scene generation, evaluation,
//! finite-difference probing, sweeps, and large matrix products distribute
//! over rayon; results are identical to the sequential fallback.

pub mod attention;
pub mod data;
pub mod decoders;
pub mod mia;
pub mod rng;
pub mod tensor;
pub mod train;

pub use tensor::{Mode, Tape, Tensor, TensorError, TensorId};
