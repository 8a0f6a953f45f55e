//! Dense tensors, eager kernels and a reverse-mode autodiff tape.

mod graph;
pub mod kernels;
mod real;
mod tensor;
pub mod weights_file;

pub use graph::{Graph, Var};
pub use kernels::{
    layer_norm, masked_softmax, matmul, matmul_nt, matmul_tn, op_counts, reset_op_counts, silu,
    OpCounts,
};
pub use real::{DType, Real};
pub use tensor::Tensor;

#[cfg(test)]
mod tests;
