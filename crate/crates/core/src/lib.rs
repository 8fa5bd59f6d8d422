//! Joint amodal segmentation and painting of occluded objects.
//!
//! Given an image and the visible-region mask of one object, a segmentor
//! predicts the object's full extent, the claimed hidden region is encoded
//! into a generator input, and a conditional GAN paints the hidden pixels.
//! Training data comes from procedurally layered scenes whose occlusion
//! masks are exact by construction.
//!
//! Module map:
//!
//! - [`maskops`]: mask and image algebra (IoU, composition, crops)
//! - [`scenegen`]: layered scene generator and on-disk datasets
//! - [`netarch`]: segmentor, generator and discriminator networks
//! - [`losses`]: region BCE, segmentation, adversarial and L1 losses
//! - [`trainer`]: two-phase training loop and checkpoints
//! - [`evalsuite`]: IoU and painting metrics, nearest-neighbor baseline
//! - [`depthlayer`]: occlusion graphs and depth layering

pub mod config;
pub mod depthlayer;
pub mod error;
pub mod evalsuite;
pub mod inference;
pub mod losses;
pub mod maskops;
pub mod netarch;
pub mod rasterio;
pub mod rng;
pub mod scenegen;
pub mod trainer;

pub use error::{Error, Result};
