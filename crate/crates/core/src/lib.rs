//! Neural implicit frequency filters.
//!
//! Convolution layers whose filters are produced by a small coordinate MLP
//! evaluated over the frequency grid and applied by bin-wise multiplication
//! of the feature-map spectra, plus tooling to train desk-scale models and
//! to measure how large the learned kernels are in the spatial domain.
//!
//! Every numeric type is generic over [`Scalar`] (`f32` or `f64`); the
//! aliases below fix the precision for the common cases.

pub mod analysis;
pub mod bench;
pub mod checkpoint;
pub mod config;
pub mod conv;
pub mod data;
pub mod error;
pub mod model;
pub mod param;
pub mod pca;
pub mod run;
pub mod scalar;
pub mod spectral;
pub mod synthesis;
pub mod tensor;
pub mod train;

pub use error::{NiffError, Result};
pub use scalar::{DType, Scalar};
pub use tensor::{FeatureMap, Shape4, SpectrumMap};

pub type FeatureMap32 = FeatureMap<f32>;
pub type FeatureMap64 = FeatureMap<f64>;
pub type SpectrumMap32 = SpectrumMap<f32>;
pub type SpectrumMap64 = SpectrumMap<f64>;
pub type NiffMlp32 = synthesis::NiffMlp<f32>;
pub type NiffMlp64 = synthesis::NiffMlp<f64>;
