//! Voxel scene construction, appearance capture, splatting and a reference
//! renderer for small tabletop scenes.
//!
//! The crate covers the geometric half of the pipeline: colored voxel grids
//! with editable pose/light/camera, visibility-aware color capture from a
//! single photograph, point-splat previews of a posed grid, and a stochastic
//! direct-light renderer that produces the target images the neural half
//! learns from.

pub mod assemble;
pub mod capture;
pub mod grid;
pub mod image;
pub mod math;
pub mod oracle;
pub mod raycast;
pub mod scene;
pub mod scenefile;
pub mod splat;
pub mod vxg;

pub use crate::grid::{Voxel, VoxelGrid};
pub use crate::image::Image;
pub use crate::math::Vec3;
pub use crate::scene::{Camera, Ground, Pose, Scene};

use thiserror::Error;

/// Errors produced by scene construction, IO and rendering.
#[derive(Debug, Error)]
pub enum CoreError {
    #[error("invalid voxel grid: {0}")]
    InvalidGrid(String),
    #[error("invalid image: {0}")]
    InvalidImage(String),
    #[error("invalid camera: {0}")]
    InvalidCamera(String),
    #[error("degenerate pose: {0}")]
    DegeneratePose(String),
    #[error("point is on or behind the camera plane")]
    BehindCamera,
    #[error("value outside the sampling envelope: {0}")]
    OutsideEnvelope(String),
    #[error("no visible voxels to capture from")]
    EmptyCapture,
    #[error("invalid scene file: {0}")]
    SceneFile(String),
    #[error("invalid light: {0}")]
    InvalidLight(String),
    #[error("format error: {0}")]
    Format(String),
    #[error("io error: {0}")]
    Io(String),
}

impl From<std::io::Error> for CoreError {
    fn from(e: std::io::Error) -> CoreError {
        CoreError::Io(e.to_string())
    }
}
