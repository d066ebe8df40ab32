//! Shifted-window shadow detection on a small reverse-mode tensor engine.

pub mod autograd;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod decoder;
pub mod encoder;
pub mod error;
pub mod gradcheck;
pub mod image_io;
pub mod loss;
pub mod metrics;
pub mod mla;
pub mod model;
pub mod ops;
pub mod optim;
pub mod params;
pub mod synth;
pub mod tensor;
pub mod train;

pub use autograd::{Gradients, Tape, Var};
pub use error::{Error, Result};
pub use tensor::Tensor;
