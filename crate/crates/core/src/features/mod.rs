//! Fused descriptors: PCA-reduced visual half concatenated with a
//! geometric half, each L2-normalized.
//!
//! Descriptors come from pluggable providers (see [`provider`]); this
//! module owns the fitting and fusion around them, multi-view aggregation
//! for the query object, and the `.fcl` feature-cloud file format.

mod build;
pub mod descriptors;
mod fcl;
mod fuse;
mod pca;
pub mod provider;

pub use build::{
    build_query_features, build_target_features, dense_target_cloud, template_views, Providers,
    QueryFeatureConfig, QueryFeatures, TargetFeatureConfig, TargetFeatures, QUERY_SPLAT_PX,
};
pub use fcl::{
    decode_feature_cloud, encode_feature_cloud, load_feature_cloud, save_feature_cloud, FCL_MAGIC,
};
pub use fuse::{fuse, l2_normalize};
pub use pca::{fit_pca, PcaProjection, PcaRecord};
pub use provider::{
    provider_describe, DescribeRequest, DescriptorProvider, DescriptorProviderSpec, Descriptors,
    Modality, ProviderKind, Side,
};

use crate::geometry::GeometryError;
use crate::types::CoreError;
use serde::{Deserialize, Serialize};
use std::path::PathBuf;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum FeatureError {
    #[error("PCA rank {rank} below requested {requested}")]
    RankDeficient { rank: usize, requested: usize },
    #[error("descriptor half has zero norm")]
    ZeroVector,
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimMismatch { expected: usize, got: usize },
    #[error("feature file {0} is missing")]
    FileMissing(PathBuf),
    #[error("descriptor count mismatch: expected {expected}, got {got}")]
    IndexMismatch { expected: usize, got: usize },
    #[error("bad magic in feature file")]
    BadMagic,
    #[error("feature file is truncated")]
    TruncatedFile,
    #[error("mask is empty")]
    EmptyMask,
    #[error("no valid depth inside the mask")]
    NoValidDepth,
    #[error("provider error: {0}")]
    Provider(String),
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error(transparent)]
    Core(#[from] CoreError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Geometric descriptor scales: neighbourhood radii as fractions of the
/// object diameter, and the descriptor dimension at each scale.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GeoScaleConfig {
    pub radii: Vec<f64>,
    pub dims: Vec<usize>,
}

impl Default for GeoScaleConfig {
    fn default() -> Self {
        Self {
            radii: vec![0.30, 0.40],
            dims: vec![32, 32],
        }
    }
}

impl GeoScaleConfig {
    pub fn validate(&self) -> Result<(), FeatureError> {
        if self.radii.is_empty() || self.radii.len() != self.dims.len() {
            return Err(FeatureError::InvalidConfig(format!(
                "{} radii for {} dims",
                self.radii.len(),
                self.dims.len()
            )));
        }
        if let Some(r) = self.radii.iter().find(|r| !(**r > 0.0 && **r <= 1.0)) {
            return Err(FeatureError::InvalidConfig(format!(
                "radius fraction {r} outside (0, 1]"
            )));
        }
        if self.dims.contains(&0) {
            return Err(FeatureError::InvalidConfig("zero-dimensional scale".into()));
        }
        Ok(())
    }

    /// Total geometric dimension (sum over scales).
    pub fn total_dim(&self) -> usize {
        self.dims.iter().sum()
    }
}
