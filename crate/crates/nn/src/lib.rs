//! Minimal reverse-mode autodiff for small convolutional networks on the CPU.
//!
//! The engine is generic over [`Element`] (`f32` for training, `f64` for
//! gradient checking). Networks keep their tensors in a [`ParamStore`], build a
//! fresh [`Graph`] per step and feed the resulting gradients to [`Adam`].

pub mod conv;
pub mod graph;
pub mod layers;
pub mod optim;
pub mod params;
pub mod scalar;
pub mod tensor;

pub use graph::{BatchStats, Graph, Var};
pub use layers::{BatchNorm, Conv2d, ConvTranspose2d, Linear, Mode};
pub use optim::{Adam, AdamConfig};
pub use params::{ParamEntry, ParamId, ParamKind, ParamStore};
pub use scalar::Element;
pub use tensor::Tensor;

#[derive(Debug, thiserror::Error)]
pub enum NnError {
    #[error("parameter block holds {found} values, network needs {expected}")]
    ParamCount { expected: usize, found: usize },
}
