//! Function-name prediction for stripped binaries.
//!
//! Per-function embeddings are cut into patches ([`ensemble`]), encoded into
//! function tokens, aligned with names by contrastive captioning
//! ([`combo`]), and decoded into word sequences by a masked-LM decoder with
//! thresholded highest-confidence-first decoding ([`lord`]). [`metrics`] and
//! [`dataset`] cover evaluation and split protocols.

pub mod autograd;
pub mod backbone;
pub mod combo;
pub mod dataset;
pub mod embedding;
pub mod ensemble;
pub mod error;
pub mod gradcheck;
pub mod lord;
pub mod metrics;
pub mod params;
pub mod synth;
pub mod tokenizer;
pub mod train;

#[cfg(test)]
mod testutil;

pub use error::{Error, Result};
