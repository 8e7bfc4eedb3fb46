//! Core library for the dual-path video predictor: a small reverse-mode
//! tensor tape, the sequence and denoising model components built on it,
//! training, data generation, and evaluation metrics.
//!
//! Everything is plain single-threaded Rust over contiguous `Vec` storage;
//! the only external dependencies are utility crates (RNG, error derive,
//! checksums, logging).

pub mod data;
pub mod diffusion;
pub mod error;
pub mod mamba;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod params;
pub mod tensor;
pub mod train;

pub use data::{mix_seed, FrameSequence};
pub use error::{Error, Result};
pub use model::{Model, ModelConfig};
pub use params::{Bound, ParamId, ParamStore};
pub use tensor::{check_gradients, Element, Tape, Tensor, TensorId};
