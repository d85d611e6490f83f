//! Small dense-tensor substrate: `f64` tensors, define-by-run reverse-mode
//! differentiation, 1-D (transposed) convolutions, dense layers, Adam and a
//! binary checkpoint format.

mod adam;
mod alloc;
mod checkpoint;
mod error;
pub mod gradcheck;
mod graph;
mod kernels;
mod param;
mod tensor;

pub use adam::{Adam, AdamConfig};
pub use alloc::retain_freed_memory;
pub use checkpoint::Checkpoint;
pub use error::{NnError, Result};
pub use graph::{backward, Gradients, Var};
pub use kernels::ConvGeom;
pub use param::{kaiming_uniform, ParamId, ParamStore, Parameter};
pub use tensor::Tensor;
