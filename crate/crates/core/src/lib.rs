//! Batch-wise dynamic structured pruning for transformer inference.
//!
//! Each inference batch is pruned on the fly: a small probe (the most
//! important samples and tokens of the block input, ranked by residual
//! norm) is run through the block's intermediate transformation, its
//! activation statistics are fused with a running history, and the fused
//! statistics drive a channel/head importance metric. The block then runs
//! on the retained weights only, and the history is refreshed from the
//! full pass.
//!
//! Module map:
//!
//! * [`tensor`]: dense f32 kernels (matmul, layer norm, softmax, norms, argsort)
//! * [`model`]: pre-norm transformer, coupled-structure slicing, weight files
//! * [`corpus`]: synthetic token streams and the token file format
//! * [`probe`]: residual importance, probe selection and probe forward
//! * [`flops`]: analytic and instrumented multiply-accumulate accounting
//! * [`history`]: historical statistics, fusion and EMA updates
//! * [`metric`]: PPsp, Wanda-sp and FLAP scores, mask selection
//! * [`engine`]: the per-batch, per-block pruning loop and its run modes
//! * [`eval`]: Jaccard overlap, PRR and FLOPs summaries

pub mod corpus;
pub mod engine;
mod error;
pub mod eval;
pub mod flops;
mod format;
pub mod history;
pub mod metric;
pub mod model;
pub mod probe;
pub mod tensor;

pub use error::{Error, Result};
