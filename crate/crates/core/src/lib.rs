//! GAN-based augmentation of small image-classification datasets with
//! SSIM-curated synthetic samples.
//!
//! The crate carries its own small deep-learning stack: [`tensor`] arrays,
//! a tape-based reverse-mode [`autograd`] graph, sequential [`nn`] models and
//! the [`optim::Adam`] optimiser. On top of it sit the [`classifier`] CNN,
//! the DCGAN-style [`gan`], [`ssim`] scoring with [`select`]ion of
//! synthetic images, [`gradcam`] heatmaps and the [`harness`] that runs the
//! three-arm augmentation experiment.

pub mod autograd;
pub mod checkpoint;
pub mod classifier;
pub mod config;
pub mod dataset;
pub mod error;
pub mod gan;
pub mod gradcam;
pub mod harness;
pub mod image;
mod kernels;
pub mod nn;
pub mod optim;
pub mod rng;
pub mod select;
pub mod ssim;
pub mod tensor;
pub mod toy;

pub use error::{Error, Result};
pub use rng::Rng;
pub use tensor::{Scalar, Tensor};
