//! Mixture-of-experts dynamic Gaussian splatting on the CPU.
//!
//! Several dynamic Gaussian models ("experts") are rendered through one
//! differentiable tile rasterizer and blended per pixel by a router whose
//! gating logits are themselves splatted from per-Gaussian weights.
//!
//! Module map:
//! - [`scene`]: primitives, cameras, datasets, procedural scenes, file formats.
//! - [`raster`]: channel-generic tile rasterizer with cached render graphs.
//! - [`experts`]: polynomial, keyframe and deformation-network experts.
//! - [`router`]: volume-aware pixel router plus pixel and volume baselines.
//! - [`fused`]: single-pass multi-expert rendering and gate-aware pruning.
//! - [`train`]: losses, RAdam, two-stage training and distillation.
//! - [`metrics`]: PSNR, SSIM and expert specialization statistics.

pub mod error;
pub mod experts;
pub mod fused;
pub mod image;
pub mod metrics;
pub mod moe;
pub mod raster;
pub mod router;
pub mod scene;
pub mod train;

pub use error::{Error, Result};
pub use image::ImageBuffer;
