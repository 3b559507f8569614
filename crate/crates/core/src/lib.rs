//! Training-free 6D object pose estimation: fused descriptors on depth
//! point clouds, sparse-to-dense matching, feature-aware RANSAC and ICP.
//!
//! Everything is generic over [`Real`] (`f32` or `f64`); the aliases below
//! fix the common instantiations.

// Negated comparisons such as `!(x > 0.0)` reject NaN on purpose.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod evalkit;
pub mod features;
pub mod geometry;
pub mod matching;
pub mod pipeline;
pub mod refinement;
pub mod registration;
pub mod scalar;
pub mod spatial;
pub mod types;

pub use pipeline::{
    estimate_for_mask, nms_translation, run_scene, select_masks, EstimateConfig, EstimateResult,
    Mode, ModeConfig, PipelineError, PreparedObject,
};
pub use scalar::Real;
pub use types::{
    CameraIntrinsics, CandidateMask, CoreError, DepthImage, FeatureCloud, MaskSource, ObjectModel,
    Pose, SceneBundle, ScoredPose,
};

pub type Pose64 = Pose<f64>;
pub type Pose32 = Pose<f32>;
pub type Scene64 = SceneBundle<f64>;
pub type Scene32 = SceneBundle<f32>;
pub type Model64 = ObjectModel<f64>;
pub type Model32 = ObjectModel<f32>;
pub type Cloud64 = FeatureCloud<f64>;
pub type Cloud32 = FeatureCloud<f32>;
