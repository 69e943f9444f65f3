//! Shake-Shake regularized residual networks with independent spectral
//! sub-band shaking, plus the feature pipeline, synthetic corpus, and
//! evaluation harness needed to run them end to end.

pub mod autodiff;
pub mod cli;
pub mod container;
pub mod data;
pub mod error;
pub mod experiment;
pub mod features;
pub mod models;
pub mod optim;
pub mod params;
pub mod rng;
pub mod shake;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::Tensor;
