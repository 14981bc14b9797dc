//! Minimal reverse-mode automatic differentiation on a per-episode tape.
//!
//! The engine records forward operations eagerly into a [`Tape`] and replays
//! them in reverse to accumulate gradients. It supplies exactly the layer
//! primitives the agent needs (linear, conv2d, LSTM cell, embedding lookups,
//! softmax/cross-entropy, Huber) plus Adam and categorical sampling. There is
//! no broadcasting, no GPU path and no operator fusion beyond what the named
//! primitives already are.
//!
//! Training runs in `f32`; gradient-check tests instantiate the same code at
//! `f64` so finite differences are trustworthy.

mod adam;
pub mod gradcheck;
mod sample;
mod scalar;
mod tensor;
pub mod tape;

pub use adam::{adam_step, AdamState, Param, ParamGroup, ParamSet};
pub use sample::{sample_categorical, SampleError};
pub use scalar::Scalar;
pub use tape::{Grads, Tape, TapeError, Var};
pub use tensor::Tensor;
