//! Modulation-space concept personalization for a miniature diffusion
//! transformer.

pub mod adapter;
pub mod data;
pub mod dit;
pub mod embed;
pub mod encoders;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod graph;
pub mod modk;
pub mod optim;
pub mod params;
pub mod ppm;
pub mod tensor;
pub mod train;
pub mod verify;

pub use error::{Error, Result};
pub use graph::{Gradients, Graph, Var};
pub use tensor::Tensor;
