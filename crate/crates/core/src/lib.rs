//! Animatable Gaussian-splatting avatars from monocular video.
//!
//! A canonical set of 3D Gaussians lives on a skinned template's UV chart. A
//! per-texel decoder predicts their offsets, normals, colors and scales; linear
//! blend skinning poses them; a differentiable splatting rasterizer renders
//! color, normal and visibility maps. A first stage fits the observed video, a
//! second stage distills a view-conditioned noise predictor into regions the
//! video never saw.

pub mod dataset;
pub mod decoder;
pub mod error;
pub mod guidance;
pub mod losses;
pub mod raster;
pub mod scene;
pub mod skinning;
pub mod trainer;

pub use error::{Error, Result};
