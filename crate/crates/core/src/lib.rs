//! Distributional few-shot classification: images are encoded to diagonal
//! Gaussians, class prototypes are moment-matched mixtures, and queries are
//! scored by Bhattacharyya overlap.

pub mod autodiff;
pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod distributions;
pub mod encoder;
pub mod episodes;
pub mod error;
pub mod eval;
pub mod losses;
pub mod optim;
pub mod oracle;
pub mod seed;
pub mod selftest;
pub mod tensor;
pub mod trainer;

pub use distributions::{
    aggregate_prototype, bhattacharyya_coefficient, bhattacharyya_distance, hellinger_sq, reparameterize, DiagGaussian,
    NoiseSource,
};
pub use encoder::{Architecture, EncoderModel, FeatureMap};
pub use error::{Error, Result};
pub use tensor::Tensor;
