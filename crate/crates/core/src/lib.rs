//! Keyword-guided target speaker extraction: a phoneme-level keyword cue is
//! located in a two-talker mixture and used to condition a separator.

pub mod autodiff;
pub mod config;
pub mod corpus;
pub mod detector;
pub mod error;
pub mod eval;
pub mod experiment;
pub mod extractor;
pub mod kce;
pub mod nn;
pub mod objectives;
pub mod pipeline;
pub mod scalar;
pub mod signal;
pub mod textfront;

pub use error::{Error, Result};
pub use scalar::Scalar;

/// Double-precision aliases for the generic types.
pub type Array = autodiff::Array<f64>;
pub type ParamStore = autodiff::ParamStore<f64>;
pub type Waveform = signal::Waveform<f64>;
pub type MixtureSample = corpus::MixtureSample<f64>;
pub type DetectionResult = detector::DetectionResult<f64>;
pub type Models = pipeline::Models<f64>;
