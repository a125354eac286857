//! Dense `f64` matrices, thin SVD and seeded randomness.

pub mod matrix;
pub mod rng;
pub mod svd;

pub use matrix::{dot, frobenius_sq, relative_residual, vector_to_matrix, Matrix};
pub use rng::{stable_hash, Rng, RngState};
pub use svd::{svd, SvdResult};
