//! Merger, loss, optimisers, the training loop and checkpoints.

mod checkpoint;
mod config;
mod loss;
mod model;
mod optim;
mod train;

pub use checkpoint::{Checkpoint, CheckpointError, MAGIC, VERSION};
pub use config::{ConfigError, OptimizerKind, TrainConfig, KEYS};
pub use loss::{cross_entropy, cross_entropy_value, merge, merge_vectors, PROB_FLOOR};
pub use model::{Heads, SessionModel};
pub use optim::{Adam, Optimizer, Sgd};
pub use train::{
    default_q_grid, evaluate, merged_ranks, metric_k, train, train_with, tune_q, tune_q_from_heads,
    EpochMetrics, QTuning, TrainError, TrainOutcome, METRIC_K,
};
