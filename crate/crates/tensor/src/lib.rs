//! Minimal dense-tensor kernel for the tracker: tape-based reverse-mode
//! differentiation, the layers the network needs, Adam, a finite-difference
//! gradient checker and a binary checkpoint format.

pub mod adam;
pub mod checkpoint;
mod conv;
pub mod error;
mod gemm;
pub mod gradcheck;
pub mod graph;
pub mod layers;
pub mod params;
pub mod tensor;

pub use adam::{Adam, StepDecay};
pub use error::{Result, TensorError};
pub use gradcheck::{grad_check, grad_check_params, ParamCheckReport};
pub use graph::{Gradients, Graph, NormStats, Unary, Var};
pub use layers::{BatchNorm, Conv, Linear};
pub use params::{Binder, Param, ParamStore};
pub use tensor::Tensor;
