//! Articulated object reconstruction from point cloud sequences.

pub mod clustering;
pub mod error;
pub mod geometry;
pub mod joints;
pub mod meshing;
pub mod metrics;
pub mod pipeline;
pub mod pointcloud;
pub mod registration;
pub mod segmentation;
pub mod topology;
pub mod urdf;
pub mod synthgen;

pub use error::{Error, Result};
