//! Dense tensors with reverse-mode automatic differentiation.
//!
//! All arithmetic is `f64`, row-major, with no broadcasting beyond bias
//! addition. [`finite_diff_check`] is the independent oracle used to verify
//! every backward rule.

mod gradcheck;
mod graph;
mod tensor;

pub use gradcheck::{finite_diff_check, sample_coords, GradCheckReport};
pub use graph::{gelu_scalar, Graph, Var};
pub use tensor::Tensor;

/// Epsilon used by every layer normalization in the encoder.
pub const LAYERNORM_EPS: f64 = 1e-5;

#[cfg(test)]
mod tests;
