//! Residual group attention segmentation networks on a small reverse-mode
//! autodiff core.

pub mod autodiff;
pub mod data;
pub mod error;
pub mod evaluate;
pub mod fnt1;
pub mod loss;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod optim;
pub mod par;
pub mod tensor;
pub mod train;
pub mod verify;

pub use autodiff::{ConvSpec, Graph, Mode, Var};
pub use error::{Error, Result};
pub use tensor::Tensor;
