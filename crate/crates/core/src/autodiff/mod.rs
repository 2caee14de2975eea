//! Minimal reverse-mode differentiation substrate.

mod gradcheck;
mod graph;
mod params;
mod tensor;

pub use gradcheck::{directional_check, finite_diff_check, FdReport};
pub use graph::{softmax_rows, Graph, Var, LAYER_NORM_EPS};
pub use params::{Param, ParamStore};
pub use tensor::Tensor;

#[derive(Debug, thiserror::Error)]
pub enum AutodiffError {
    #[error("{op}: shape mismatch ({detail})")]
    Shape { op: &'static str, detail: String },
    #[error("{op}: non-finite value at node {node}")]
    NonFinite { op: &'static str, node: usize },
    #[error("{op}: index {index} out of range (bound {bound})")]
    Index { op: &'static str, index: usize, bound: usize },
    #[error("{op}: zero-norm row {row}")]
    ZeroNorm { op: &'static str, row: usize },
    #[error("backward requires a scalar output, got shape {0:?}")]
    NonScalarOutput(Vec<usize>),
    #[error("unknown parameter `{0}`")]
    UnknownParam(String),
    #[error("loss function is not deterministic: {0} != {1}")]
    NonDeterministic(f64, f64),
}
