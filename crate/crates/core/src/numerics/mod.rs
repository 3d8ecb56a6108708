//! Dense matrices, the deterministic generator and finite-difference helpers.

mod finite_diff;
mod matrix;
mod prng;

pub use finite_diff::{central_jvp, relative_error};
pub use matrix::{dot, matmul, row_softmax, Matrix};
pub(crate) use matrix::softmax_in_place;
pub use prng::{gaussian_init, Prng};
