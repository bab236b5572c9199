//! facefuse: deformable alignment of a texture-rich generative prior onto an
//! identity-preserving face image, texture-attention fusion, and
//! metric-supervised restoration, with synthetic data generation and a
//! quantitative evaluation kit.

pub mod autodiff;
pub mod error;
pub mod image;

pub use error::{Error, Result};
