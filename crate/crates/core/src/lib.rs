//! Hybrid 2D/3D convolutional classification pipeline.
//!
//! A compact residual 2D network and a small 3D convolutional encoder are
//! trained jointly: each 2D image is expanded into a pseudo-volume by stacking
//! independent augmentations of it, both networks classify their view, and a
//! combined loss adds a mean-squared consistency term between their softmax
//! outputs. Everything runs on a from-scratch reverse-mode autodiff engine in
//! 64-bit floats.

pub mod augment;
pub mod autodiff;
pub mod data;
pub mod error;
pub mod image;
pub mod metrics;
pub mod model;
pub mod robustness;
pub mod tensor;
pub mod training;

pub use autodiff::{Gradients, Tape, Var};
pub use error::{Error, Result};
pub use tensor::Tensor;
