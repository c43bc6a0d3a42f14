//! Differentiable f64 tensor substrate: dense arrays, a reverse-mode tape,
//! Adam, deterministic counter-based randomness, and a named-tensor
//! checkpoint format.

mod adam;
mod checkpoint;
pub mod gradcheck;
mod graph;
mod kernels;
mod nd;
mod rng;

pub use adam::Adam;
pub use checkpoint::{file_checksum, load_params, save_params};
pub use graph::{conv2d, Gradients, Graph, ParamSet, Tensor};
pub use kernels::ConvGeom;
pub use nd::NdArray;
pub use rng::RngStream;
