//! Pure-Rust 3D convolutional networks, training and inference for
//! gray-matter nucleus segmentation.

// `!(x > 0.0)` style checks are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod checkpoint;
pub mod data;
pub mod error;
pub mod evaluate;
pub mod gradcheck;
pub mod graph;
pub mod infer;
pub mod loss;
pub mod network;
pub mod ops;
pub mod optim;
pub mod params;
pub mod scalar;
pub mod schedule;
pub mod tensor;
pub mod train;

pub use checkpoint::Checkpoint;
pub use error::{NnError, Result};
pub use network::{count_parameters, Family, Model, ModelSpec, Output};
pub use tensor::Tensor;
