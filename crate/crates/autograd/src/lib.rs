//! Reverse-mode automatic differentiation over dense `NCHW` tensors.
//!
//! The tape records every operation applied to [`Var`] handles of a
//! [`Graph`]; [`Graph::backward`] replays it in reverse. Nodes built only
//! from constants record no backward closure, so inference-only passes cost
//! nothing beyond the forward arithmetic.
//!
//! Convolutions are lowered to `im2col` plus one GEMM per call, which keeps
//! the single-threaded throughput close to the underlying matrix kernel.

mod conv;
mod gemm;
mod graph;
mod optim;
mod scalar;
mod tensor;

pub use conv::{conv2d_forward, conv_out_size, conv_transpose_out_size};
pub use gemm::gemm;
pub use graph::{Grads, Graph, Var};
pub use optim::{Adam, AdamConfig, AdamMoments};
pub use scalar::Scalar;
pub use tensor::Tensor;

#[derive(Debug, thiserror::Error, Clone, PartialEq)]
pub enum ShapeError {
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Mismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("{op}: expected rank {expected}, got shape {got:?}")]
    Rank {
        op: &'static str,
        expected: usize,
        got: Vec<usize>,
    },
    #[error("cannot reshape {from:?} into {to:?}")]
    Reshape { from: Vec<usize>, to: Vec<usize> },
}
