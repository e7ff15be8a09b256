//! Token-adaptive predictor selection for cached feature forecasting.
//!
//! A sampling run caches the probe and residual at full steps
//! ([`cache`]), forecasts skipped steps with a family of Taylor and Hermite
//! candidates ([`predictor`]), and picks a candidate per token by how well
//! it forecasts the cheap probe ([`selector`]). [`engine`] drives whole runs
//! against any [`engine::Denoiser`]; [`simulator`] supplies synthetic ones
//! with known ground truth, and [`cost`] does the FLOPs and memory
//! accounting. [`bench`] holds the experiment layer behind the `tap` CLI.

pub mod bench;
pub mod cache;
pub mod cost;
pub mod engine;
pub mod error;
pub mod predictor;
pub mod selector;
pub mod simulator;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::FeatureTensor;
