//! Learned shape descriptors from LRF-aligned continuous geodesic convolutions.
//!
//! The pipeline runs from a raw triangle mesh to per-vertex descriptors:
//!
//! - [`mesh`]: triangle meshes, OFF/OBJ I/O, normals and curvature directions
//! - [`geodesy`]: graph geodesics, geodesic balls and farthest point sampling
//! - [`lrf`]: SHOT-style and curvature-based local reference frames
//! - [`patch`]: LRF-aligned 7-dimensional local patches
//! - [`tensor`]: dense tensors, reverse-mode differentiation and Adam
//! - [`lrfconv`]: the continuous convolution layer and its PointNet variant
//! - [`netarch`]: the residual descriptor backbone and the task heads
//! - [`spectral`]: Laplace–Beltrami bases, functional maps and the matching loss
//! - [`train`]: datasets, training loops and metrics
//! - [`cache`]: binary caches for patch tables, spectral bases and distances

pub mod cache;
pub mod error;
pub mod geodesy;
pub mod lrf;
pub mod lrfconv;
pub mod mesh;
pub mod netarch;
pub mod nn;
pub mod patch;
pub mod spectral;
pub mod tensor;
pub mod train;
pub mod verify;

pub use error::{Error, Result};
