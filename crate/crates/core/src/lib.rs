//! Synthesis and evaluation of noisy/clean RAW and sRGB video pairs.
//!
//! The crate is organised by pipeline stage:
//!
//! * [`raw`] holds Bayer frames, normalisation, GBRG packing and demosaicing.
//! * [`noise`] calibrates and samples the Poisson-Gaussian sensor noise model.
//! * [`isp`] renders linear camera RGB to 8-bit sRGB.
//! * [`metrics`] computes PSNR, SSIM, SNR, temporal averages and histogram KL.
//! * [`motion`] estimates dense optical flow and motion statistics.
//! * [`dataset`] builds clip pairs, patches and train/test splits.

pub mod dataset;
pub mod error;
pub mod io;
pub mod isp;
pub mod metrics;
pub mod motion;
pub mod noise;
pub mod plane;
pub mod raw;

pub use error::{Error, Result};
pub use plane::Plane;
