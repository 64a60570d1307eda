//! Differentiable scalar graph with second-order diagonal jets.

mod fdcheck;
mod graph;
mod jet;

pub use fdcheck::{finite_diff_check, relative_error, second_difference, FdEntry, FdReport};
pub use graph::{GradientMap, Graph, GraphNode, LeafId, NodeId, OpTag};
pub use jet::{Jet2, JetOp};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum GraphError {
    #[error("non-finite input value {0}")]
    NonFiniteInput(f64),
    #[error("coordinate index {k} out of range for dimension {dim}")]
    CoordinateOutOfRange { k: usize, dim: usize },
    #[error("jet dimension mismatch: {left} vs {right}")]
    DimensionMismatch { left: usize, right: usize },
    #[error("unsupported operation {0:?} for the given operands")]
    UnsupportedOp(JetOp),
    #[error("non-finite adjoint at node {node}")]
    NonFiniteAdjoint { node: usize },
}
