use thiserror::Error;

use crate::tensor::ShapeError;

/// Failures of a model forward pass.
#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Shape(#[from] ShapeError),
    #[error("empty session")]
    EmptySession,
    #[error("item {item} outside vocabulary of {items}")]
    ItemOutOfRange { item: usize, items: usize },
    #[error("non-finite split score at node {node} (row {row})")]
    NonFiniteScore { row: usize, node: usize },
    #[error("pruning rate {0} outside [0, 1)")]
    PruningRate(f64),
    #[error("merger weight {0} outside [0, 1]")]
    MergeWeight(f64),
    #[error("target {target} outside vocabulary of {items}")]
    TargetOutOfRange { target: usize, items: usize },
    #[error("invalid configuration: {0}")]
    Config(String),
}
