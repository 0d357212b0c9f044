//! Sparse, composable fine-tuning with low-rank denoising of weight deltas.
//!
//! The crate is `no_std` (with `alloc`). The default `std` feature only adds
//! scoped-thread fan-out for per-matrix SVD work; results are bit-identical
//! with and without it.
//!
//! Layout:
//! - [`numerics`]: dense tensors, one-sided Jacobi SVD, top-k selection, RNG.
//! - [`model`]: a small pre-LN transformer encoder with exact gradients.
//! - [`optim`]: AdamW / SGD, full and mask-constrained fine-tuning loops.
//! - [`deft`]: deltas, denoising, global magnitude masks, the two-phase
//!   procedure, the plain lottery-ticket baseline and ablations.
//! - [`transfer`]: vector composition and zero-shot evaluation.
//! - [`synthdata`]: synthetic languages and tasks.
//! - [`analysis`]: support overlap and sparsity diagnostics.
#![cfg_attr(not(feature = "std"), no_std)]

extern crate alloc;

pub mod analysis;
pub mod deft;
pub mod digest;
mod error;
pub mod metrics;
pub mod model;
pub mod numerics;
pub mod optim;
pub mod sparse;
pub mod synthdata;
pub mod transfer;

pub use error::{Error, Result};
pub use numerics::{Rng, SvdFactors, Tensor};
