//! Lightweight spatiotemporal saliency networks built from channel-attention
//! inverted-residual blocks, with coupled teacher-student distillation, the
//! standard saliency metric suite and a CPU performance harness.

pub mod bench;
pub mod blocks;
pub mod config;
pub mod data;
pub mod distill;
pub mod error;
pub mod eval;
pub mod experiment;
pub mod gradcheck;
pub mod graph;
pub mod kernels;
pub mod maps;
pub mod metrics;
pub mod model_io;
pub mod netpbm;
pub mod networks;
pub mod params;
pub mod rng;
pub mod tensor;

pub use error::{Error, Result, TensorError};
pub use graph::{Activation, BinaryOp, Gradients, Graph, PoolMode, Var};
pub use params::{Param, ParamId, ParamStore};
pub use tensor::{Shape, Tensor};
