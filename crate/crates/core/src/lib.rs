//! Dual-stream image classifier: a convolutional grain stem feeding a
//! lightweight multi-head self-attention stream and a CNN stream, fused
//! into an expansion-4 classification head. Everything, including the
//! autodiff engine, runs on the CPU in `f64`.

pub mod data;
pub mod error;
pub mod gradcheck;
pub mod graph;
mod kernels;
pub mod model;
pub mod optim;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use graph::{BatchNormOptions, Graph, NormMode, OpCounters, RunningStats, Var};
pub use tensor::Tensor;
pub use model::{Model, ModelConfig, ParamRole, ParamStore};
pub use optim::{lr_at, zero_grads, AdamW, ScheduleConfig};
