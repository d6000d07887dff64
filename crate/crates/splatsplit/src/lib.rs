//! CPU Gaussian-splatting pipeline that decomposes casually captured scenes
//! into a persistent static field and a per-view transient field.
//!
//! Everything is built on a small reverse-mode autodiff engine
//! ([`diffcore`]): a differentiable splat rasterizer, a deformable transient
//! field driven by per-view embeddings, a learned occlusion mask refined by
//! superpixels, and an uncertainty-aware densification schedule. A synthetic
//! scene harness generates ground-truth datasets with known occluder masks
//! so the whole pipeline is testable end to end on a laptop-class CPU.

pub mod densify;
pub mod diffcore;
pub mod error;
pub mod harness;
pub mod imgio;
pub mod maskgen;
pub mod objective;
pub mod raster;
pub mod trainer;
pub mod transient;
pub mod splat;

pub use error::{Error, Result};
