//! Per-mask estimation, mask selection, NMS and ranking for one scene.

pub mod io;

use crate::features::{
    build_target_features, dense_target_cloud, load_feature_cloud, DescriptorProviderSpec,
    FeatureError, GeoScaleConfig, PcaProjection, Providers, TargetFeatureConfig, TargetFeatures,
};
use crate::geometry::poisson_disk_sample;
use crate::matching::{topk_correspondences, MatchError};
use crate::refinement::{
    final_score, icp_refine_on_surface, rescore_fine, IcpConfig, RefinementError, ScoreWeights,
};
use crate::registration::{ransac_register, RansacConfig, RegistrationError};
use crate::scalar::Real;
use crate::types::{FeatureCloud, ObjectModel, SceneBundle, ScoredPose, TargetFeatureSource};
use nalgebra::Point3;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::cmp::Ordering;
use std::time::Instant;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("malformed scene: {0}")]
    MalformedScene(String),
    #[error(transparent)]
    Feature(#[from] FeatureError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Core(#[from] crate::types::CoreError),
    #[error(transparent)]
    Eval(#[from] crate::evalkit::EvalError),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Image(#[from] image::ImageError),
    #[error("thread pool: {0}")]
    ThreadPool(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    /// Number and identity of instances known.
    Localization,
    /// Unknown instance count; all NMS survivors are returned.
    Detection,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModeConfig {
    pub mode: Mode,
    pub n_instances: usize,
    /// Masks kept per source.
    pub m_masks: usize,
    /// Detection only: masks below this confidence are dropped.
    pub tau_mask: f64,
    /// Translation NMS radius as a fraction of the diameter.
    pub nms_radius: f64,
}

impl ModeConfig {
    /// `m_masks = n + 1`.
    pub fn localization(n_instances: usize) -> Self {
        Self {
            mode: Mode::Localization,
            n_instances,
            m_masks: n_instances + 1,
            tau_mask: 0.0,
            nms_radius: 0.05,
        }
    }

    /// `m_masks = 100`, `tau_mask = 0.4`.
    pub fn detection() -> Self {
        Self {
            mode: Mode::Detection,
            n_instances: 0,
            m_masks: 100,
            tau_mask: 0.4,
            nms_radius: 0.05,
        }
    }

    pub fn validate(&self) -> Result<(), PipelineError> {
        match self.mode {
            Mode::Localization if self.m_masks < self.n_instances => {
                Err(PipelineError::InvalidConfig(format!(
                    "m_masks {} < n_instances {}",
                    self.m_masks, self.n_instances
                )))
            }
            Mode::Detection if !(0.0..=1.0).contains(&self.tau_mask) => Err(
                PipelineError::InvalidConfig(format!("tau_mask {} outside [0, 1]", self.tau_mask)),
            ),
            _ if !(self.nms_radius >= 0.0) => Err(PipelineError::InvalidConfig(
                "nms_radius must be >= 0".into(),
            )),
            _ => Ok(()),
        }
    }
}

/// Settings of every per-mask stage.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EstimateConfig {
    pub k: usize,
    pub ransac: RansacConfig,
    pub icp: IcpConfig,
    pub weights: ScoreWeights,
    pub target: TargetFeatureConfig,
    /// Worker threads; 0 uses the ambient pool.
    pub workers: usize,
}

impl Default for EstimateConfig {
    fn default() -> Self {
        Self {
            k: 10,
            ransac: RansacConfig::default(),
            icp: IcpConfig::default(),
            weights: ScoreWeights::default(),
            target: TargetFeatureConfig::default(),
            workers: 0,
        }
    }
}

/// Query side of one object, prepared offline.
pub struct PreparedObject<T: Real> {
    pub object_id: String,
    pub model: ObjectModel<T>,
    pub query: FeatureCloud<T>,
    pub pca: PcaProjection<T>,
    pub spec: DescriptorProviderSpec,
    pub geo: GeoScaleConfig,
    pub providers: Providers<T>,
    /// Dense blue-noise sample of the model surface that ICP aligns to
    /// the observed points.
    pub surface: Vec<Point3<T>>,
}

/// Surface points per query point in [`PreparedObject::surface`].
pub const SURFACE_DENSITY: usize = 8;

impl<T: Real> PreparedObject<T> {
    pub fn new(
        object_id: impl Into<String>,
        model: ObjectModel<T>,
        query: FeatureCloud<T>,
        pca: PcaProjection<T>,
        spec: DescriptorProviderSpec,
        geo: GeoScaleConfig,
    ) -> Result<Self, FeatureError> {
        if query.dim() != 2 * pca.d_out() {
            return Err(FeatureError::DimMismatch {
                expected: 2 * pca.d_out(),
                got: query.dim(),
            });
        }
        let providers = Providers::from_spec(&spec)?;
        let surface = poisson_disk_sample(&model, SURFACE_DENSITY * query.len().max(1), 0)?.points;
        Ok(Self {
            object_id: object_id.into(),
            model,
            query,
            pca,
            spec,
            geo,
            providers,
            surface,
        })
    }
}

/// Why a mask produced no pose.
#[derive(Clone, Debug, PartialEq)]
pub struct SkipRecord {
    pub mask_ref: usize,
    pub reason: String,
}

/// Per-mask stage timings in milliseconds.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct StageTimings {
    pub features_ms: f64,
    pub matching_ms: f64,
    pub ransac_ms: f64,
    pub refinement_ms: f64,
}

impl std::ops::AddAssign for StageTimings {
    fn add_assign(&mut self, o: Self) {
        self.features_ms += o.features_ms;
        self.matching_ms += o.matching_ms;
        self.ransac_ms += o.ransac_ms;
        self.refinement_ms += o.refinement_ms;
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EstimateResult<T: Real> {
    pub object_id: String,
    /// Sorted by `s_final` descending, ties by `mask_ref`.
    pub poses: Vec<ScoredPose<T>>,
    /// Masks that went through estimation, ascending.
    pub processed: Vec<usize>,
    pub skipped: Vec<SkipRecord>,
    /// Localization only: instances missing after NMS.
    pub shortfall: usize,
    pub timings: StageTimings,
    pub total_ms: f64,
}

/// Retained mask indices: per source, the `m_masks` most confident masks
/// for `object_id` (stable for ties), minus detection masks below
/// `tau_mask`; the union over sources in source order, no merging.
pub fn select_masks<T: Real>(
    scene: &SceneBundle<T>,
    object_id: &str,
    cfg: &ModeConfig,
) -> Vec<usize> {
    let mut out = Vec::new();
    let mut base = 0;
    for src in &scene.sources {
        let mut cands: Vec<usize> = (0..src.masks.len())
            .filter(|&i| src.masks[i].object_id.is_empty() || src.masks[i].object_id == object_id)
            .collect();
        cands.sort_by(|&a, &b| {
            src.masks[b]
                .confidence
                .partial_cmp(&src.masks[a].confidence)
                .unwrap_or(Ordering::Equal)
                .then(a.cmp(&b))
        });
        cands.truncate(cfg.m_masks);
        if cfg.mode == Mode::Detection {
            cands.retain(|&i| src.masks[i].confidence >= cfg.tau_mask);
        }
        cands.sort_unstable();
        out.extend(cands.into_iter().map(|i| base + i));
        base += src.masks.len();
    }
    out
}

fn ms(t: Instant) -> f64 {
    t.elapsed().as_secs_f64() * 1e3
}

fn mask_seed(seed: u64, mask_ref: usize) -> u64 {
    seed ^ (mask_ref as u64)
        .wrapping_add(1)
        .wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

fn target_features<T: Real>(
    scene: &SceneBundle<T>,
    mask_ref: usize,
    object: &PreparedObject<T>,
    cfg: &EstimateConfig,
) -> Result<TargetFeatures<T>, FeatureError> {
    match scene.precomputed_target_features.get(&mask_ref) {
        Some(TargetFeatureSource::InMemory { sparse, dense }) => Ok(TargetFeatures {
            sparse: sparse.clone(),
            dense: dense.clone(),
            sparse_pixels: Vec::new(),
        }),
        Some(TargetFeatureSource::File(path)) => Ok(TargetFeatures {
            sparse: load_feature_cloud(path)?,
            dense: dense_target_cloud(scene, mask_ref, cfg.target.dense_count, cfg.target.seed)?,
            sparse_pixels: Vec::new(),
        }),
        None => build_target_features(
            scene,
            mask_ref,
            &object.object_id,
            object.model.diameter(),
            &object.providers,
            &object.geo,
            &object.pca,
            &cfg.target,
        ),
    }
}

/// Target features, matching, RANSAC, ICP and scoring for one mask. The
/// mask's confidence is never read.
pub fn estimate_for_mask<T: Real>(
    scene: &SceneBundle<T>,
    mask_ref: usize,
    object: &PreparedObject<T>,
    cfg: &EstimateConfig,
) -> Result<(ScoredPose<T>, StageTimings), SkipRecord> {
    let skip = |reason: String| SkipRecord { mask_ref, reason };
    let d = object.model.diameter();
    let mut t = StageTimings::default();

    let start = Instant::now();
    let target = target_features(scene, mask_ref, object, cfg).map_err(|e| skip(e.to_string()))?;
    t.features_ms = ms(start);

    let start = Instant::now();
    let k = cfg.k.min(object.query.len());
    let corrs = topk_correspondences(&target.sparse, &object.query, k)
        .map_err(|e: MatchError| skip(e.to_string()))?;
    t.matching_ms = ms(start);

    let start = Instant::now();
    let ransac = RansacConfig {
        seed: mask_seed(cfg.ransac.seed, mask_ref),
        ..cfg.ransac.clone()
    };
    let coarse = ransac_register(&corrs, &target.sparse, &object.query, &ransac, d)
        .map_err(|e: RegistrationError| skip(e.to_string()))?;
    t.ransac_ms = ms(start);

    let start = Instant::now();
    let (pose, s_icp) = match icp_refine_on_surface(
        object.query.points(),
        &object.surface,
        &target.dense,
        &coarse.pose,
        &cfg.icp,
        d,
    ) {
        Ok(r) => (r.pose, r.s_icp),
        Err(RefinementError::NoOverlap) | Err(RefinementError::TooFewPoints) => {
            (coarse.pose, T::zero())
        }
        Err(e) => return Err(skip(e.to_string())),
    };
    let tau = T::lit(cfg.ransac.tau_inlier) * d;
    let s_fine = rescore_fine(&pose, &corrs, &target.sparse, &object.query, tau);
    t.refinement_ms = ms(start);

    let s_final = final_score(coarse.s_coarse, s_fine, s_icp, &cfg.weights);
    Ok((
        ScoredPose {
            pose,
            s_coarse: coarse.s_coarse,
            s_fine,
            s_icp,
            s_final,
            mask_ref,
        },
        t,
    ))
}

fn rank<T: Real>(a: &ScoredPose<T>, b: &ScoredPose<T>) -> Ordering {
    b.s_final
        .partial_cmp(&a.s_final)
        .unwrap_or(Ordering::Equal)
        .then(a.mask_ref.cmp(&b.mask_ref))
}

/// Greedy translation NMS; output sorted by `s_final` descending.
pub fn nms_translation<T: Real>(poses: &[ScoredPose<T>], radius: T) -> Vec<ScoredPose<T>> {
    let mut sorted = poses.to_vec();
    sorted.sort_by(rank);
    let mut kept: Vec<ScoredPose<T>> = Vec::new();
    for p in sorted {
        if kept
            .iter()
            .all(|k| (k.pose.translation - p.pose.translation).norm() >= radius)
        {
            kept.push(p);
        }
    }
    kept
}

fn run_object<T: Real>(
    scene: &SceneBundle<T>,
    object: &PreparedObject<T>,
    mode: &ModeConfig,
    cfg: &EstimateConfig,
) -> EstimateResult<T> {
    let start = Instant::now();
    let processed = select_masks(scene, &object.object_id, mode);
    let outcomes: Vec<Result<(ScoredPose<T>, StageTimings), SkipRecord>> = processed
        .par_iter()
        .map(|&m| estimate_for_mask(scene, m, object, cfg))
        .collect();
    let mut poses = Vec::new();
    let mut skipped = Vec::new();
    let mut timings = StageTimings::default();
    for o in outcomes {
        match o {
            Ok((p, t)) => {
                poses.push(p);
                timings += t;
            }
            Err(s) => {
                log::debug!("mask {} skipped: {}", s.mask_ref, s.reason);
                skipped.push(s);
            }
        }
    }
    let radius = T::lit(mode.nms_radius) * object.model.diameter();
    let mut poses = nms_translation(&poses, radius);
    let mut shortfall = 0;
    if mode.mode == Mode::Localization {
        shortfall = mode.n_instances.saturating_sub(poses.len());
        poses.truncate(mode.n_instances);
    }
    EstimateResult {
        object_id: object.object_id.clone(),
        poses,
        processed,
        skipped,
        shortfall,
        timings,
        total_ms: ms(start),
    }
}

/// Estimate every object in `scene`. Masks run on a pool of
/// `cfg.workers` threads; results do not depend on the worker count.
pub fn run_scene<T: Real>(
    scene: &SceneBundle<T>,
    objects: &[PreparedObject<T>],
    mode: &ModeConfig,
    cfg: &EstimateConfig,
) -> Result<Vec<EstimateResult<T>>, PipelineError> {
    mode.validate()?;
    cfg.ransac
        .validate()
        .map_err(|e| PipelineError::InvalidConfig(e.to_string()))?;
    cfg.weights
        .validate()
        .map_err(|e| PipelineError::InvalidConfig(e.to_string()))?;
    if cfg.k == 0 {
        return Err(PipelineError::InvalidConfig("k must be positive".into()));
    }
    let run = || {
        objects
            .iter()
            .map(|o| run_object(scene, o, mode, cfg))
            .collect()
    };
    if cfg.workers == 0 {
        return Ok(run());
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.workers)
        .build()
        .map_err(|e| PipelineError::ThreadPool(e.to_string()))?;
    Ok(pool.install(run))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::types::{CameraIntrinsics, CandidateMask, DepthImage, MaskSource, Pose};
    use nalgebra::Vector3;

    fn scene_with(confs: &[&[f64]]) -> SceneBundle<f64> {
        let k = CameraIntrinsics::new(100.0, 100.0, 8.0, 8.0, 16, 16).unwrap();
        let depth = DepthImage::new(16, 16, vec![1.0; 256]).unwrap();
        let sources = confs
            .iter()
            .enumerate()
            .map(|(s, cs)| MaskSource {
                source_id: format!("s{s}"),
                masks: cs
                    .iter()
                    .map(|&c| {
                        CandidateMask::new(16, 16, vec![true; 256], c, format!("s{s}"), "obj")
                            .unwrap()
                    })
                    .collect(),
            })
            .collect();
        SceneBundle::new("t", depth, k, sources).unwrap()
    }

    #[test]
    fn localization_keeps_n_plus_one() {
        let s = scene_with(&[&[0.9, 0.7, 0.2]]);
        assert_eq!(
            select_masks(&s, "obj", &ModeConfig::localization(1)),
            vec![0, 1]
        );
    }

    #[test]
    fn detection_threshold() {
        let s = scene_with(&[&[0.9, 0.39]]);
        assert_eq!(select_masks(&s, "obj", &ModeConfig::detection()), vec![0]);
    }

    #[test]
    fn union_over_sources_keeps_duplicates() {
        let s = scene_with(&[&[0.5, 0.6], &[0.5, 0.6], &[0.1, 0.2, 0.3], &[0.9]]);
        let cfg = ModeConfig {
            m_masks: 2,
            ..ModeConfig::localization(1)
        };
        assert_eq!(select_masks(&s, "obj", &cfg), vec![0, 1, 2, 3, 5, 6, 7]);
    }

    fn sp(x: f64, score: f64, mask_ref: usize) -> ScoredPose<f64> {
        ScoredPose {
            pose: Pose::from_translation(Vector3::new(x, 0.0, 1.0)),
            s_coarse: score,
            s_fine: score,
            s_icp: score,
            s_final: score,
            mask_ref,
        }
    }

    #[test]
    fn nms_examples() {
        let d = 0.1;
        let close = [sp(0.0, 0.8, 0), sp(0.001 * d, 0.9, 1)];
        let kept = nms_translation(&close, 0.05 * d);
        assert_eq!(kept.len(), 1);
        assert_eq!(kept[0].mask_ref, 1);
        let far = [sp(0.0, 0.8, 0), sp(d, 0.9, 1), sp(2.0 * d, 0.7, 2)];
        let kept = nms_translation(&far, 0.05 * d);
        assert_eq!(kept.len(), 3);
        assert_eq!(nms_translation(&kept, 0.05 * d), kept);
    }
}
