//! Desk-scale streaming speech recognition with a dual-mode chunked encoder.
//!
//! The encoder runs in two modes over shared weights: a streaming mode with
//! chunked attention and causal depthwise convolution, and a non-streaming
//! mode with full context and centered convolution. Two CTC taps (after the
//! bottom block with a small chunk, after the top block with a large chunk)
//! drive first-pass decoding; left-to-right and right-to-left attention
//! decoders rescore the n-best in a second pass. Training is joint over both
//! modes, with an optional second stage that inserts extra bottom layers and
//! distills their streaming activations toward the non-streaming teacher to
//! pull token emission earlier.
//!
//! All numeric code is generic over the scalar type: [`Wide`] (f64) for
//! oracle and gradient tests, [`Std`] (f32) for training.

pub mod checkpoint;
pub mod config;
pub mod decoding;
pub mod error;
pub mod evaluation;
pub mod losses;
pub mod model;
pub mod scalar;
pub mod synthdata;
pub mod tensor;
pub mod testing;
pub mod training;

pub use error::{Error, Result};
pub use scalar::Scalar;
pub use tensor::{Graph, Tensor};

/// Standard precision used for training runs.
pub type Std = f32;
/// Wide precision used for oracle and gradient tests.
pub type Wide = f64;

/// Version stamp written into checkpoints and run outputs.
pub const CODE_VERSION: &str = env!("CARGO_PKG_VERSION");
