//! Core of a multi-modal multi-label emotion recognizer: a small reverse-mode
//! autodiff substrate, per-modality transformer encoders, adversarial
//! common/private refinement, hierarchical cross-modal fusion, a label-guided
//! decoding head, the composite training objective, and multi-label metrics.
//!
//! The crate is `no_std` (alloc required); all IO, file formats, and the CLI
//! live in the companion `mmer-cli` crate.

#![no_std]
#![deny(unsafe_code)]

extern crate alloc;

#[cfg(test)]
extern crate std;

pub mod amr;
pub mod data;
pub mod fusion;
pub mod gradcheck;
pub mod labelhead;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod nn;
pub mod rng;
pub mod scalar;
pub mod tape;
pub mod tensor;
pub mod train;
pub mod unimodal;

pub use model::{AblationFlags, DataDims, Model, ModelConfig};
pub use scalar::Scalar;
pub use tape::Tape;
pub use tensor::{Tensor, TensorError};
