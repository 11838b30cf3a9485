//! Dense tensors, reverse-mode autodiff, AdamW and parameter checkpoints.

pub mod checkpoint;
pub mod graph;
pub mod init;
pub mod optim;
pub mod param;
pub mod tensor;

pub use checkpoint::{Checkpoint, CheckpointEntry};
pub use graph::{matmul_raw, Graph, Var};
pub use init::truncated_normal;
pub use optim::{adamw_step, OptimConfig};
pub use param::{ParamId, ParamStore, Parameter};
pub use tensor::Tensor;
