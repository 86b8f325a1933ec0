//! Label-free ore/waste mapping for hyperspectral mine-face imagery.
//!
//! The pipeline learns an illumination-invariant code for every pixel with a
//! relit spectral-angle stacked autoencoder, clusters those codes to harvest
//! confidently labelled spectra, and trains a 1D convolutional classifier on
//! them with transfer initialisation and spectral relighting augmentation.

pub mod cluster;
pub mod cnn;
pub mod error;
pub mod illumination;
pub mod metrics;
pub mod nn;
pub mod pipeline;
pub mod render;
mod rng;
pub mod sae;
pub mod spectral;
pub mod synth;

pub use error::{Error, Result};
