//! Lip-to-speech synthesis at desk scale.
//!
//! A silent lip sequence is encoded by spatio-temporal convolutions, fused
//! with a face-derived speaker embedding, and decoded autoregressively into
//! a log-mel spectrogram, which Griffin-Lim turns into a waveform.

pub mod dsp;
pub mod data;
pub mod decoder;
pub mod error;
pub mod face;
pub mod img;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod speaker;
pub mod trainer;
pub mod video;

pub use error::{Error, Result};
