//! Dense tensor arithmetic with tape-based reverse-mode differentiation and
//! an Adam updater.

pub mod adam;
pub mod error;
pub mod gradcheck;
pub mod graph;
pub mod init;
mod kernels;
pub mod params;
pub mod tensor;

pub use adam::{AdamConfig, AdamState};
pub use error::{Result, TensorError};
pub use graph::{conv_out_dim, Graph, Var};
pub use params::{Bound, Gradients, ParamStore};
pub use tensor::{Scalar, Tensor};
