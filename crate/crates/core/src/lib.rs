//! Dialogue response diversification through iterative back translation.
//!
//! A forward (context → response) and backward (response → context) LSTM
//! seq2seq pair share one encoder. After joint initialization on paired
//! dialogue data, the pair is alternately retrained on pseudo pairs built
//! from an unpaired monologue corpus. The crate also carries the baselines
//! (retrieval, weighted LM fusion, multi-task autoencoding, MMI, diverse
//! beam, nucleus sampling) and the automatic diversity/relevance metrics.
//!
//! Everything runs on a small dense-tensor core with tape-based reverse-mode
//! differentiation ([`numcore`]), in 64-bit floats on the CPU.

pub mod corpus;
pub mod decode;
pub mod error;
pub mod evalsuite;
pub mod gradsuite;
pub mod model;
pub mod numcore;
pub mod rng;
pub mod trainer;

pub use error::{Error, Result};
