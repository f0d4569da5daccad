//! Dense arrays, reverse-mode differentiation and a finite-difference oracle.

pub mod array;
pub mod finite_diff;
pub mod kernels;
pub mod tape;


pub use array::{lit, Array, Scalar};
pub use finite_diff::{finite_diff_grad, max_relative_error, DEFAULT_EPS};
pub use tape::{Gradients, Tape, Var};

/// Epsilon used by every RMS normalization in the model.
pub const RMS_EPS: f64 = 1e-6;
