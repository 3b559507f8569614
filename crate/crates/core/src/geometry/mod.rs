//! Surface sampling, template views, visibility, pixel lifting and the
//! closed-form rigid alignment used by RANSAC and ICP.

mod image;
mod kabsch;
mod normals;
mod sampling;
pub mod shapes;
mod views;

pub use image::{backproject, grid_patch_centers, mask_bounds, Backprojection};
pub use kabsch::{alignment_residual, kabsch, MIN_TRIPLET_AREA};
pub use normals::{estimate_normals, estimate_normals_with, plane_normal};
pub use sampling::{
    min_pairwise_distance, poisson_disk_sample, uniform_surface_samples, SurfaceSamples,
};
pub use views::{
    look_at_origin, sample_template_viewpoints, sample_template_viewpoints_with, sphere_directions,
    splat_depth, template_image_size, visibility_filter, visibility_sets, Viewpoint,
    DEFAULT_TEMPLATE_SIZE, TEMPLATE_FOV_Y, TEMPLATE_RADIUS_FACTOR, VISIBILITY_DEPTH_TOLERANCE,
};

use crate::types::CoreError;
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeometryError {
    #[error("mesh has zero surface area")]
    DegenerateMesh,
    #[error("no point passes the visibility threshold")]
    EmptyResult,
    #[error("pixel ({u}, {v}) is outside the image")]
    OutOfBounds { u: usize, v: usize },
    #[error("mask is empty")]
    EmptyMask,
    #[error("source points are collinear")]
    DegenerateTriplet,
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error(transparent)]
    Core(#[from] CoreError),
}
