//! Diffusive and wave-like residual dynamics for transformer stacks, with the
//! diagnostics and a small trainer to study them.

pub mod attention;
pub mod autodiff;
pub mod blocks;
pub mod diagnostics;
pub mod dynamics;
pub mod error;
pub mod experiments;
pub mod norms_ffn;
pub mod numerics;
pub mod train;

pub use error::{Error, Result};
pub use numerics::{Matrix, Prng};
