//! Early-exit transformer classification.
//!
//! A small BERT-style encoder carries a teacher classifier on its last block
//! and a student classifier on every other block. Training fine-tunes the
//! backbone with the teacher, then distills the teacher's soft labels into the
//! frozen-backbone students. At inference each sample leaves the stack at the
//! first block whose student is confident enough: its normalized output
//! entropy falls below the `Speed` threshold.
//!
//! Everything numeric is generic over [`Scalar`] (`f32` or `f64`); the aliases
//! below pin the common choices.

pub mod data;
pub mod error;
pub mod flops;
pub mod graph;
pub mod inference;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod param;
pub mod scalar;
pub mod tensor;
pub mod training;

pub use data::{Checkpoint, Dataset, EncodedSet, Vocab};
pub use error::{Error, Result};
pub use flops::FlopsBreakdown;
pub use graph::{Tape, Var};
pub use inference::{InferenceTrace, Speed};
pub use model::{EncodedBatch, FastBert, HeadKind, ModelConfig};
pub use optim::OptimizerConfig;
pub use param::{ParamGroup, ParamStore, Parameter};
pub use scalar::Scalar;
pub use tensor::Tensor;
pub use training::{ConvergenceLog, Stage, TrainPlan};

pub type Tensor64 = Tensor<f64>;
pub type Tensor32 = Tensor<f32>;
pub type FastBert64 = FastBert<f64>;
pub type FastBert32 = FastBert<f32>;
pub type Checkpoint64 = Checkpoint<f64>;
