//! Two-stage generative speech enhancement.
//!
//! Stage one is a token language model that reads continuous embeddings of
//! degraded audio and emits clean semantic tokens. Stage two is a
//! flow-matching mel-spectrogram infilling model conditioned on the degraded
//! mel, the purified tokens, and optionally a clean reference prompt. The
//! crate also carries the degradation simulator, a k-means tokenizer, the
//! inference stack, desk-scale metrics, and a CLI that ties them together.

pub mod audio;
pub mod cli;
pub mod degrade;
pub mod dsp;
pub mod error;
pub mod eval;
pub mod fmse;
pub mod infer;
pub mod nn;
pub mod saslm;
pub mod synth;
pub mod tokenizer;

pub use audio::AudioBuffer;
pub use error::{Error, Result};
