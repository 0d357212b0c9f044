//! Dense tensors, SVD, magnitude selection and deterministic randomness.

mod rng;
mod select;
mod svd;
mod tensor;

pub use rng::Rng;
pub use select::{magnitude_order, top_k_indices};
pub use svd::{svd, SvdFactors, SVD_MAX_SWEEPS, SVD_TOLERANCE};
pub use tensor::{frobenius_norm, matmul, matmul_at_b, matmul_a_bt, Tensor};
