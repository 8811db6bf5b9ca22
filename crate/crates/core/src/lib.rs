//! Two-stream Retinex decomposition networks for low-light image enhancement.
//!
//! An illumination network and a reflectance network run side by side; the
//! reflectance decoder's features are divided element-wise by the matching
//! illumination features, and the final output is the reflectance divided by
//! the illumination. The crate carries its own small autodiff engine, the
//! closed-form image operators, network construction, training losses and
//! loops, synthetic data and netpbm I/O, and PSNR/SSIM evaluation.

pub mod autodiff;
pub mod config;
pub mod data;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod image;
pub mod model;
pub mod retinex;
pub mod train;

#[cfg(test)]
mod properties;

pub use error::{CsdError, Result};
pub use image::Image;
