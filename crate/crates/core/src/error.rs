use crate::diffcore::GraphError;
use crate::persist::PersistError;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("non-finite {what} at point {point:?}")]
    NonFinite { what: &'static str, point: Vec<f64> },
    #[error("{phase} diverged at iteration {iteration}")]
    Diverged { phase: String, iteration: usize },
    #[error("solver failure: {0}")]
    Solver(String),
    #[error("{0}")]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Persist(#[from] PersistError),
}
