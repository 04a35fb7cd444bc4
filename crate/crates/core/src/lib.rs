//! Sparse-prefill attention with strided delta correction, plus the tooling
//! to measure how far each approximation drifts from dense attention.

pub mod attention;
pub mod bound;
pub mod delta;
pub mod error;
pub mod harness;
pub mod linalg;
pub mod method;
pub mod metrics;

pub use attention::{dense_attention, sparse_attention, AttentionProblem, AttentionResult, Mask, SparsityPattern};
pub use delta::{delta_attention, recompute_attention, DeltaConfig, Imputation};
pub use error::{Error, Result};
pub use linalg::Matrix;
pub use method::Method;
