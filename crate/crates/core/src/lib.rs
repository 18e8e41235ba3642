//! Speech-driven facial coefficient animation.
//!
//! Head pose and mouth/detail coefficient streams are encoded by two
//! independent vector-quantized autoencoders; a window transformer predicts
//! their latents from log-mel audio, and the frozen decoders map the
//! predictions back to coefficients.

// Negated float comparisons are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::single_range_in_vec_init)]

pub mod audiofeat;
pub mod checkpoint;
pub mod coeffstream;
pub mod error;
pub mod meshexport;
pub mod metrics;
pub mod nn;
pub mod pipeline;
pub mod predictor;
pub mod synthgen;
pub mod vqvae;

pub use error::{Error, Result};
