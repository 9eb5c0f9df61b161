//! Minimal reverse-mode autodiff over dense `f64` tensors, sized for small
//! convolutional networks on a CPU.
//!
//! Image tensors are always rank 5, `[N, C, D, H, W]`; planar networks use
//! `D = 1`, which lets a depth-inflated network reuse every op unchanged.

mod conv;
mod graph;
mod optim;
mod params;
mod tensor;

pub use conv::ConvGeom;
pub use graph::{softmax_axis1, Gradients, Graph, NormStats, ObservedStats, Var};
pub use optim::{Adam, AdamConfig};
pub use params::{Param, ParamId, ParamKind, ParamStore};
pub use tensor::Tensor;

#[derive(Debug, thiserror::Error)]
pub enum NnError {
    #[error("shape error: {0}")]
    Shape(String),
    #[error("duplicate parameter name {0}")]
    DuplicateParam(String),
}

pub type Result<T> = std::result::Result<T, NnError>;
