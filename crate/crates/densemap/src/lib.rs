//! Monocular dense mapping pipeline.
//!
//! The library couples cascaded plane-sweep multi-view stereo with TSDF
//! fusion into a voxel-hashed global model, raycast rendering, direct
//! photometric frame tracking against the rendered model, and a depth /
//! trajectory evaluation harness. Synthetic scenes with analytic ground
//! truth serve as the verification oracle throughout.

pub mod eval;
pub mod features;
pub mod geometry;
pub mod grid;
pub mod mvs;
pub mod pipeline;
pub mod synth;
pub mod tracking;
pub mod tsdf;

pub use geometry::{CameraIntrinsics, PoseSE3, Sim3};
pub use grid::Grid;
