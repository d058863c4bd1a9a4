//! Generative random Fourier features.
//!
//! Noise-fed generator networks produce spectral weights, an explicit
//! Fourier feature map turns inputs into random features layer by layer, and
//! a linear classifier is trained jointly with the generators. The crate
//! carries its own small reverse-mode tensor engine ([`autodiff`]) and the
//! two-stage baselines, data loaders, adversarial evaluation and experiment
//! runner that surround the model.

pub mod autodiff;
pub mod baselines;
pub mod data;
pub mod error;
pub mod experiment;
pub mod generator;
pub mod io;
pub mod model;
pub mod parallel;
pub mod pca;
pub mod rff;
pub mod serialize;
pub mod robustness;
pub mod tensor;
pub mod trainer;

pub use error::{GrffError, Result};
pub use tensor::Tensor;
