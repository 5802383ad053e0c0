//! Minimal dense tensors, reverse-mode differentiation, Adam, and a binary
//! checkpoint container. Sized for training small residual nets on CPU in
//! double precision.

pub mod adam;
pub mod checkpoint;
mod error;
pub mod gradcheck;
pub mod graph;
mod kernels;
pub mod param;
pub mod tensor;

pub use adam::{Adam, AdamConfig};
pub use checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint};
pub use error::{Result, TensorError};
pub use gradcheck::{grad_check, grad_check_params, GradCheckOptions, GradCheckReport};
pub use graph::{BatchStats, Gradients, Graph, Var};
pub use kernels::{sigmoid, softplus};
pub use param::{ParamId, ParamStore, Parameter};
pub use tensor::Tensor;
