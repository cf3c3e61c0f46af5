//! Dense arrays and a small reverse-mode differentiation engine.

mod array;
mod attention;
mod gradcheck;
mod graph;
mod scalar;

pub use array::NdArray;
pub use attention::{AttentionGroup, AttentionPlan};
pub use gradcheck::{
    finite_difference_check, finite_difference_check_with, relative_error, FdOptions,
    GradCheckReport, Stencil, DEFAULT_MAX_ENTRIES,
};
pub use graph::{GradMap, Graph, Var};
pub use scalar::{DType, Scalar};


#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum TensorError {
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("buffer of length {len} does not fit shape {shape:?}")]
    BufferLength { shape: Vec<usize>, len: usize },
    #[error("non-finite value at node {node} ({label})")]
    NonFinite { node: usize, label: String },
    #[error("backward root must be a scalar, got shape {0:?}")]
    RootNotScalar(Vec<usize>),
    #[error("graph leaves changed since the last forward evaluation")]
    StaleGraph,
    #[error("parameter `{0}` registered twice")]
    DuplicateParam(String),
    #[error("node {0} is not a leaf")]
    NotALeaf(usize),
    #[error("concat of zero parts")]
    EmptyConcat,
    #[error("finite-difference epsilon must be positive, got {0}")]
    InvalidEpsilon(f64),
}
