//! Mesh-rigged 3D Gaussian splat avatars driven by feature sequences.
//!
//! The crate covers the whole pipeline: a small reverse-mode autodiff
//! ([`tensor`]), a blendshape face mesh with per-triangle frames ([`mesh`]),
//! rigged splats ([`splats`]), a differentiable CPU rasterizer ([`raster`]),
//! the loss stack and image metrics ([`losses`]), density control
//! ([`density`]), the expression-dependent color network ([`color`]), the
//! audio-feature sequence model ([`sequence`]) and the orchestration layer
//! used by the command-line tool ([`engine`]).

pub mod color;
pub mod density;
pub mod engine;
pub mod error;
pub mod gradcheck;
pub mod losses;
pub mod math;
pub mod mesh;
pub mod raster;
pub mod seed;
pub mod sequence;
pub mod splats;
pub mod tensor;

pub use error::{Error, Result};
