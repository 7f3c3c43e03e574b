//! Neural decision forest predictor add-on for session-based next-item
//! recommendation.
//!
//! The crate is organised bottom-up:
//!
//! - [`graph`], [`tensor`], [`params`], [`gradcheck`]: a small reverse-mode
//!   differentiation engine over dense matrices.
//! - [`session`]: session files, prefix augmentation, a planted synthetic
//!   generator, and HR@k / MRR@k / two-proportion z-test.
//! - [`base`]: the encoder contract, a reference attention encoder, and the
//!   tied-embedding linear predictor.
//! - [`alleviator`]: column-wise James-Stein shrinkage of latent batches.
//! - [`ndf`]: soft decision trees with random leaf pruning, and forests of
//!   them.
//! - [`pipeline`]: merger, loss, optimisers, training, q tuning,
//!   checkpoints and config files.
//! - [`dof`]: Monte-Carlo degrees-of-freedom estimation on simulated
//!   regression tasks.
//! - [`cli`]: the `ndf-rec` command line.

pub mod alleviator;
pub mod base;
pub mod cli;
pub mod dof;
pub mod gradcheck;
pub mod graph;
pub mod ndf;
pub mod params;
pub mod pipeline;
pub mod rng;
pub mod session;
pub mod tensor;

mod error;

pub use error::ModelError;
pub use graph::{Graph, Var};
pub use tensor::Tensor;
