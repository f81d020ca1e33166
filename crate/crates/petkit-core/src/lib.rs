//! Parameter-efficient tuning for convolutional networks, built around the
//! Conv-Adapter bottleneck module.
//!
//! The crate provides the full numeric stack needed to train and analyse
//! desk-scale adapted ConvNets on the CPU:
//!
//! * [`tensor`] / [`tape`] / [`ops`] — dense NCHW tensors and a Wengert tape
//!   for reverse-mode differentiation over the convolution, activation,
//!   pooling and classification primitives,
//! * [`adapter`] — the Conv-Adapter itself (grouped K×K down-projection,
//!   nonlinearity, 1×1 up-projection, learnable channel scaling),
//! * [`backbone`] — bottleneck residual backbones with named parameters and
//!   the four adapter attachment schemes,
//! * [`tuning`] — tuning-mode selection (full fine-tune, linear probe, bias
//!   tuning, adapter), AdamW with a cosine/warmup schedule, training and
//!   grid search,
//! * [`analysis`] — CKA similarity between filter-weight matrices and
//!   Gaussian-kernel MMD between feature distributions,
//! * [`data`] / [`synth`] — in-memory datasets, few-shot subsampling,
//!   augmentation and synthetic task generators,
//! * [`gradcheck`] — a central finite-difference oracle and the gradient
//!   check suites built on it.
//!
//! Everything is `no_std` + `alloc`; file formats and the command-line
//! front-end live in the companion `petkit` crate.

#![no_std]

extern crate alloc;

#[cfg(test)]
extern crate std;

pub mod adapter;
pub mod analysis;
pub mod backbone;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod ops;
pub mod params;
pub mod synth;
pub mod tape;
pub mod tensor;
pub mod tuning;

pub use error::{Error, Result};
pub use tape::{Tape, Var};
pub use tensor::{Elem, Tensor, Tensor64, TensorOf};
