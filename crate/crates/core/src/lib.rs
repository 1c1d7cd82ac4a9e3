//! Desk-scale unsupervised domain adaptation for semantic segmentation built
//! around frequency decomposition of encoder features.
//!
//! The crate provides a small reverse-mode tensor engine ([`tape`]), 2-D
//! spectral analysis utilities ([`spectral`]), window-attention building
//! blocks ([`blocks`]), the full generator/discriminator networks
//! ([`network`]), the training objectives and loop ([`losses`], [`train`]),
//! a synthetic two-domain dataset generator ([`data`]) and segmentation
//! metrics ([`metrics`]). Everything runs on the CPU; kernels parallelize
//! with rayon when the default `parallel` feature is enabled and fall back
//! to plain loops otherwise, producing bitwise-identical results either way.

pub mod blocks;
pub mod data;
pub mod error;
pub mod exec;
pub mod losses;
pub mod metrics;
pub mod network;
pub mod params;
pub mod scalar;
pub mod spectral;
pub mod tape;
pub mod tensor;
pub mod train;
pub mod verify;

pub use error::{Error, Result};
pub use scalar::{Dtype, Scalar};
pub use tensor::Tensor;
