//! One-reference 6D object pose estimation on synthetic RGB-D scenes.
//!
//! The pipeline: render a reference and a query view of an object, express
//! both as normalized reference-frame coordinate maps, tokenize those maps
//! with a learned vector-quantized autoencoder, predict the query map from
//! the query image plus the reference view with a masked autoregressive
//! transformer, and recover the relative pose by rigidly aligning the two
//! maps. Everything runs on CPU with a small hand-rolled autodiff engine.

pub mod archive;
pub mod decoder;
pub mod encoders;
pub mod error;
pub mod fusion;
pub mod geometry;
pub mod metrics;
pub mod nn;
pub mod pipeline;
pub mod synth;
pub mod tensor;
pub mod tokenizer;
pub mod trainer;

pub use error::{Error, Result};
pub use tensor::{Dtype, Graph, Scalar, Tensor, Var};
