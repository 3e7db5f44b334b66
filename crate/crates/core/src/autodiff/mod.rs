//! Reverse-mode differentiation over small dense arrays.
//!
//! A [`Tape`] records forward operations and replays them backwards to
//! produce exact gradients. The op set is deliberately the minimum this
//! crate's networks need; the only broadcast is row-vector-over-matrix in
//! [`Tape::add`]. All arithmetic is `f64`; [`Precision::Single`] rounds op
//! results through `f32` for parity with 32-bit storage.

mod check;
mod optim;
mod tape;
mod tensor;

pub use check::{gradient_check, param_gradient_check, probe_largest, ParamProbe};
pub use optim::Adam;
pub use tape::{normal_cdf, Gradients, ParamId, ParamStore, Precision, Tape, Var};
pub use tensor::Tensor;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum DiffError {
    #[error("shape {shape:?} does not hold {len} values")]
    BadShape { shape: Vec<usize>, len: usize },
    #[error("{op}: shapes {lhs:?} and {rhs:?} are not conformable")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("index {index} out of range for extent {len}")]
    BadIndex { index: usize, len: usize },
    #[error("backward requires a scalar loss, got shape {shape:?}")]
    NonScalarLoss { shape: Vec<usize> },
    #[error("non-finite value in {context}")]
    NonFinite { context: &'static str },
    #[error("concat of zero tensors")]
    EmptyConcat,
}
