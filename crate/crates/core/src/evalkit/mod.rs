//! Synthetic scenes with known ground truth and BOP-style pose metrics.

mod metrics;
mod synth;

pub use metrics::{
    average_precision, average_recall, matched_errors, mspd, mssd, ImageMatches, MetricConfig,
};
pub use synth::{generate_scene, GtInstance, SynthGroundTruth, SynthSceneSpec, SYNTH_SOURCE};

use crate::scalar::Real;
use crate::types::{CoreError, Pose};
use serde::{Deserialize, Serialize};
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("instance {0} is behind the camera or outside the image")]
    InstanceOutOfFrame(usize),
    #[error("a vertex projects from behind the camera")]
    BehindCamera,
    #[error("invalid specification: {0}")]
    InvalidSpec(String),
    #[error(transparent)]
    Core(#[from] CoreError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

/// One `gt.json` entry.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GtRecord {
    pub object_id: String,
    #[serde(rename = "R")]
    pub rotation: [f64; 9],
    pub t: [f64; 3],
}

impl GtRecord {
    pub fn new<T: Real>(object_id: &str, pose: &Pose<T>) -> Self {
        Self {
            object_id: object_id.to_string(),
            rotation: pose.rotation_row_major().map(|v| v.as_f64()),
            t: [pose.translation.x, pose.translation.y, pose.translation.z].map(|v| v.as_f64()),
        }
    }

    pub fn pose<T: Real>(&self) -> Result<Pose<T>, CoreError> {
        Pose::from_row_major(&self.rotation.map(T::lit), &self.t.map(T::lit))
    }
}

impl<T: Real> SynthGroundTruth<T> {
    pub fn records(&self) -> Vec<GtRecord> {
        self.instances
            .iter()
            .map(|i| GtRecord::new(&i.object_id, &i.pose))
            .collect()
    }
}

pub fn write_gt_json(records: &[GtRecord], path: impl AsRef<Path>) -> Result<(), EvalError> {
    std::fs::write(path, serde_json::to_string_pretty(records)?)?;
    Ok(())
}

pub fn read_gt_json(path: impl AsRef<Path>) -> Result<Vec<GtRecord>, EvalError> {
    Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
}
