//! Dual-latent implicit 3D surface reconstruction.
//!
//! A point cloud is encoded into two cooperating latent representations:
//! per-point features and a regular feature grid (triplane or voxel). A
//! U-shaped stack of dual-latent layers refines both, and an attention-based
//! implicit decoder predicts occupancy at arbitrary query coordinates. Meshes
//! are extracted with marching cubes and scored with standard surface
//! reconstruction metrics.
//!
//! The crate is self-contained: it ships its own reverse-mode autodiff tensor
//! engine ([`graph::Graph`]), deterministic RNG, Adam optimizer, checkpoint
//! format, analytic shape oracles for desk-scale experiments, and the
//! training loop. Kernels are data-parallel via rayon when the `parallel`
//! feature (default) is enabled, with a sequential fallback otherwise;
//! results are bit-identical either way.

// `x % n == 0` reads better than is_multiple_of in shape arithmetic.
#![allow(clippy::manual_is_multiple_of)]

pub mod attention;
pub mod config;
pub mod decoder;
pub mod encoder;
mod error;
pub mod exec;
pub mod gradcheck;
pub mod graph;
pub mod kernels;
pub mod model;
pub mod nn;
pub mod oracle;
pub mod pointgrid;
pub mod rng;
pub mod scalar;
pub mod selftest;
pub mod surface;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use graph::{Graph, Var};
pub use rng::Rng;
pub use scalar::Scalar;
pub use tensor::Tensor;
