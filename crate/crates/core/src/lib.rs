//! Tiny transformers on the Bigram-Backcopy task, sink/drain/peak probes,
//! and numerical checks of the simplified two-variable dynamics.

pub mod data;
pub mod error;
pub mod model;
pub mod optim;
pub mod probes;
pub mod rng;
pub mod scalar;
pub mod stats;
pub mod tensor;
pub mod theory;

pub use error::{Error, Result};
pub use scalar::Scalar;

pub type Graph64 = tensor::Graph<f64>;
pub type Graph32 = tensor::Graph<f32>;
pub type Transformer64 = model::ModelState<f64>;
pub type Transformer32 = model::ModelState<f32>;
