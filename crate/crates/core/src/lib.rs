//! Inference engine for a wavelet-based mobile style generator.
//!
//! The crate provides `f64` NCHW tensors and convolution kernels, a Haar
//! wavelet transform with a multiplication-free inverse, depthwise-separable
//! modulated convolutions, the generator graph and its weight container,
//! inference-time graph rewrites, an analytic cost model, and the
//! distillation objectives used to train a student generator from a teacher.

pub mod complexity;
pub mod config;
pub mod container;
pub mod error;
pub mod exec;
pub mod export;
pub mod generator;
pub mod losses;
pub mod modconv;
pub mod ops;
pub mod optimize;
pub mod rng;
pub mod suites;
pub mod tensor;
pub mod timing;
pub mod wavelet;

pub use config::{GeneratorConfig, Variant};
pub use container::WeightContainer;
pub use error::{Error, Result};
pub use exec::Exec;
pub use generator::{Generator, OutputMode, SynthesisOutput};
pub use modconv::{DemodMode, StyleVector};
pub use rng::Rng;
pub use tensor::Tensor;
pub use wavelet::{WaveletImage, WaveletPyramid};
