//! Additive attention gates for convolutional networks, built on a small
//! define-by-run autodiff engine over `f64` tensors.

pub mod checkpoint;
pub mod classifier;
pub mod error;
pub mod gate;
pub mod gradcheck;
pub mod gradsuite;
mod kernels;
pub mod metrics;
pub mod nn;
pub mod optim;
pub mod params;
pub mod synth;
pub mod tape;
pub mod tensor;
pub mod unet;
pub mod wsl;

pub use error::{Error, Result};
pub use params::ParamStore;
pub use tape::{Gradients, Tape, Var};
pub use tensor::{Shape, Tensor};
