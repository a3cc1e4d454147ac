//! Audio-driven talking-face synthesis built on a 3D morphable face model.
//!
//! The crate is organised the way the pipeline runs:
//!
//! * [`face3dmm`] evaluates the affine face model and the mouth-weighted
//!   vertex loss used to supervise expression prediction.
//! * [`a2ep`] maps audio to expression coefficients with a small transformer
//!   whose cross-attention is restricted by a static window bias.
//! * [`raster`] renders posed meshes and emits the face-region mask.
//! * [`mafb`] swaps expression parameters, augments the mask with binary
//!   morphology and composites rendered and target frames.
//! * [`taft`] repairs the composite with a skip-connected generator trained
//!   on photometric, perceptual and style losses.
//! * [`metrics`] scores the output (PSNR, SSIM, landmark distance).
//!
//! [`io`], [`config`] and [`pipeline`] handle files and tie the stages
//! together; [`synth`] builds toy bases and clips. Everything trainable
//! runs on the reverse-mode engine in [`autodiff`].

pub mod a2ep;
pub mod autodiff;
pub mod config;
pub mod error;
pub mod face3dmm;
pub mod image;
pub mod io;
pub mod mafb;
pub mod metrics;
pub mod pipeline;
pub mod raster;
pub mod synth;
pub mod taft;
pub use error::{Error, Result};
