use super::provider::{DescribeRequest, DescriptorProvider, Descriptors, Modality, Side};
use super::{fit_pca, fuse, DescriptorProviderSpec, FeatureError, GeoScaleConfig, PcaProjection};
use crate::geometry::{
    backproject, grid_patch_centers, poisson_disk_sample, template_image_size, visibility_sets,
    GeometryError, Viewpoint, TEMPLATE_FOV_Y, TEMPLATE_RADIUS_FACTOR, VISIBILITY_DEPTH_TOLERANCE,
};
use crate::scalar::Real;
use crate::types::{CameraIntrinsics, FeatureCloud, ObjectModel, Pixel, SceneBundle};
use nalgebra::{Point3, Vector3};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

/// Splat side used when rendering query templates for visibility.
pub const QUERY_SPLAT_PX: usize = 3;

/// The visual and geometric providers for one run.
pub struct Providers<T: Real> {
    pub visual: Box<dyn DescriptorProvider<T>>,
    pub geometric: Box<dyn DescriptorProvider<T>>,
}

impl<T: Real> Providers<T> {
    pub fn from_spec(spec: &DescriptorProviderSpec) -> Result<Self, FeatureError> {
        Ok(Self {
            visual: spec.build(Modality::Visual)?,
            geometric: spec.build(Modality::Geometric)?,
        })
    }
}

/// Offline query settings.
#[derive(Clone, Debug, PartialEq)]
pub struct QueryFeatureConfig {
    pub geo: GeoScaleConfig,
    pub n_points: usize,
    pub n_views: usize,
    pub min_views: usize,
    pub seed: u64,
}

impl Default for QueryFeatureConfig {
    fn default() -> Self {
        Self {
            geo: GeoScaleConfig::default(),
            n_points: 5000,
            n_views: 162,
            min_views: 18,
            seed: 0,
        }
    }
}

/// Fused query cloud and the PCA fitted on its visual descriptors.
#[derive(Clone, Debug)]
pub struct QueryFeatures<T: Real> {
    pub cloud: FeatureCloud<T>,
    pub pca: PcaProjection<T>,
    /// Index of each cloud point among the raw surface samples.
    pub sample_indices: Vec<usize>,
}

/// Template viewpoints sized so that `n_points` samples splat without
/// holes.
pub fn template_views<T: Real>(
    model: &ObjectModel<T>,
    count: usize,
    n_points: usize,
) -> Result<Vec<Viewpoint<T>>, FeatureError> {
    let d = model.diameter();
    let spacing = (model.surface_area().as_f64() / n_points.max(1) as f64).sqrt();
    let size = template_image_size(d.as_f64(), spacing, QUERY_SPLAT_PX);
    let k = CameraIntrinsics::from_fov(size, T::lit(TEMPLATE_FOV_Y))?;
    Ok(crate::geometry::sample_template_viewpoints_with(
        count,
        d * T::lit(TEMPLATE_RADIUS_FACTOR),
        k,
    )?)
}

fn face_normal<T: Real>(model: &ObjectModel<T>, tri: usize) -> Vector3<T> {
    let [a, b, c] = model.triangle(tri);
    let n = (b - a).cross(&(c - a));
    let len = n.norm();
    if len > T::zero() {
        n / len
    } else {
        Vector3::zeros()
    }
}

fn fuse_rows<T: Real>(
    vis: &Descriptors<T>,
    geo: &Descriptors<T>,
    pca: &PcaProjection<T>,
) -> Result<Vec<Option<Vec<T>>>, FeatureError> {
    (0..vis.len())
        .into_par_iter()
        .map(|i| match fuse(vis.row(i), geo.row(i), pca) {
            Ok(f) => Ok(Some(f)),
            Err(FeatureError::ZeroVector) => Ok(None),
            Err(e) => Err(e),
        })
        .collect()
}

fn check_rows<T: Copy>(d: &Descriptors<T>, expected: usize) -> Result<(), FeatureError> {
    if d.len() != expected || d.values.len() != expected * d.dim {
        return Err(FeatureError::IndexMismatch {
            expected,
            got: d.len(),
        });
    }
    Ok(())
}

/// Sample, filter by visibility, describe, fit PCA and fuse the query
/// object's feature cloud.
pub fn build_query_features<T: Real>(
    model: &ObjectModel<T>,
    providers: &Providers<T>,
    views: &[Viewpoint<T>],
    cfg: &QueryFeatureConfig,
) -> Result<QueryFeatures<T>, FeatureError> {
    cfg.geo.validate()?;
    if cfg.min_views > views.len() {
        return Err(GeometryError::EmptyResult.into());
    }
    let samples = poisson_disk_sample(model, cfg.n_points, cfg.seed)?;
    let raw = &samples.points;
    let tol = model.diameter() * T::lit(VISIBILITY_DEPTH_TOLERANCE);
    let sets = visibility_sets(raw, views, QUERY_SPLAT_PX, tol);
    let kept: Vec<usize> = (0..raw.len())
        .filter(|&i| sets[i].len() >= cfg.min_views)
        .collect();
    if kept.is_empty() {
        return Err(GeometryError::EmptyResult.into());
    }
    let kept_pts: Vec<Point3<T>> = kept.iter().map(|&i| raw[i]).collect();
    let request = |modality,
                   view,
                   keys: &[usize],
                   pts: &[Point3<T>]|
     -> Result<Descriptors<T>, FeatureError> {
        let provider = match modality {
            Modality::Visual => &providers.visual,
            Modality::Geometric => &providers.geometric,
        };
        let d = provider.describe(&DescribeRequest {
            side: Side::Query { model, view },
            modality,
            keys,
            key_count: raw.len(),
            points: pts,
            support: raw,
            diameter: model.diameter(),
            geo: &cfg.geo,
        })?;
        check_rows(&d, pts.len())?;
        Ok(d)
    };

    let visual = if providers.visual.view_dependent() {
        aggregate_views(
            model,
            &samples.triangles,
            raw,
            &kept,
            &sets,
            views,
            |v, keys, pts| request(Modality::Visual, Some(v), keys, pts),
        )?
    } else {
        request(Modality::Visual, None, &kept, &kept_pts)?
    };
    let geometric = request(Modality::Geometric, None, &kept, &kept_pts)?;
    let d_geo = geometric.dim;
    if d_geo != cfg.geo.total_dim() {
        return Err(FeatureError::DimMismatch {
            expected: cfg.geo.total_dim(),
            got: d_geo,
        });
    }
    if visual.dim < d_geo {
        return Err(FeatureError::DimMismatch {
            expected: d_geo,
            got: visual.dim,
        });
    }
    let pca = fit_pca(&visual.values, visual.dim, d_geo)?;
    let fused = fuse_rows(&visual, &geometric, &pca)?;
    let mut points = Vec::with_capacity(kept.len());
    let mut descriptors = Vec::with_capacity(kept.len() * 2 * d_geo);
    let mut sample_indices = Vec::with_capacity(kept.len());
    for (j, f) in fused.into_iter().enumerate() {
        if let Some(f) = f {
            points.push(kept_pts[j]);
            descriptors.extend(f);
            sample_indices.push(kept[j]);
        }
    }
    if points.is_empty() {
        return Err(FeatureError::ZeroVector);
    }
    if points.len() < kept.len() {
        log::warn!(
            "dropped {} query points with degenerate descriptors",
            kept.len() - points.len()
        );
    }
    Ok(QueryFeatures {
        cloud: FeatureCloud::new(points, descriptors, 2 * d_geo)?,
        pca,
        sample_indices,
    })
}

/// Per-point weighted mean of per-view descriptors over the views where
/// the point is visible. Weights are the cosine between the outward face
/// normal and the direction to the camera, clamped at zero; points with
/// no positive weight fall back to a plain mean.
fn aggregate_views<T: Real>(
    model: &ObjectModel<T>,
    triangles: &[usize],
    raw: &[Point3<T>],
    kept: &[usize],
    sets: &[Vec<usize>],
    views: &[Viewpoint<T>],
    describe: impl Fn(usize, &[usize], &[Point3<T>]) -> Result<Descriptors<T>, FeatureError>,
) -> Result<Descriptors<T>, FeatureError> {
    let slot: std::collections::HashMap<usize, usize> =
        kept.iter().enumerate().map(|(j, &i)| (i, j)).collect();
    let mut dim = 0;
    let mut sums: Vec<T> = Vec::new();
    let mut plain: Vec<T> = Vec::new();
    let mut weights = vec![T::zero(); kept.len()];
    let mut counts = vec![0usize; kept.len()];
    for (v, view) in views.iter().enumerate() {
        let keys: Vec<usize> = kept
            .iter()
            .copied()
            .filter(|&i| sets[i].contains(&v))
            .collect();
        if keys.is_empty() {
            continue;
        }
        let pts: Vec<Point3<T>> = keys.iter().map(|&i| raw[i]).collect();
        let d = describe(v, &keys, &pts)?;
        check_rows(&d, keys.len())?;
        if dim == 0 {
            dim = d.dim;
            sums = vec![T::zero(); kept.len() * dim];
            plain = sums.clone();
        } else if d.dim != dim {
            return Err(FeatureError::DimMismatch {
                expected: dim,
                got: d.dim,
            });
        }
        let cam = view.center();
        for (r, &i) in keys.iter().enumerate() {
            let j = slot[&i];
            let to_cam = (cam - raw[i]).normalize();
            let w = face_normal(model, triangles[i]).dot(&to_cam).max(T::zero());
            weights[j] += w;
            counts[j] += 1;
            for (c, x) in d.row(r).iter().enumerate() {
                sums[j * dim + c] += w * *x;
                plain[j * dim + c] += *x;
            }
        }
    }
    for j in 0..kept.len() {
        let row = j * dim..(j + 1) * dim;
        if weights[j] > T::zero() {
            let w = weights[j];
            sums[row].iter_mut().for_each(|x| *x /= w);
        } else if counts[j] > 0 {
            let n = T::from_count(counts[j]);
            for c in row {
                sums[c] = plain[c] / n;
            }
        }
    }
    Ok(Descriptors { dim, values: sums })
}

/// Online target settings.
#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct TargetFeatureConfig {
    pub grid: usize,
    pub dense_count: usize,
    pub seed: u64,
}

impl Default for TargetFeatureConfig {
    fn default() -> Self {
        Self {
            grid: 16,
            dense_count: 3000,
            seed: 0,
        }
    }
}

/// Sparse fused target cloud plus the dense cloud used for geometric
/// neighbourhoods and ICP.
#[derive(Clone, Debug)]
pub struct TargetFeatures<T: Real> {
    pub sparse: FeatureCloud<T>,
    pub dense: Vec<Point3<T>>,
    pub sparse_pixels: Vec<Pixel>,
}

/// All valid masked pixels lifted to 3D and uniformly subsampled to at
/// most `dense_count` points (order preserved).
pub fn dense_target_cloud<T: Real>(
    scene: &SceneBundle<T>,
    mask_ref: usize,
    dense_count: usize,
    seed: u64,
) -> Result<Vec<Point3<T>>, FeatureError> {
    let mask = scene
        .mask(mask_ref)
        .ok_or_else(|| FeatureError::InvalidConfig(format!("no mask {mask_ref}")))?;
    if mask.is_empty() {
        return Err(FeatureError::EmptyMask);
    }
    let pixels: Vec<Pixel> = mask.pixels().collect();
    let bp = backproject(&scene.depth, &scene.intrinsics, &pixels)?;
    if bp.points.is_empty() {
        return Err(FeatureError::NoValidDepth);
    }
    if bp.points.len() <= dense_count {
        return Ok(bp.points);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(mask_ref as u64);
    let mut idx = rand::seq::index::sample(&mut rng, bp.points.len(), dense_count).into_vec();
    idx.sort_unstable();
    Ok(idx.into_iter().map(|i| bp.points[i]).collect())
}

/// Patch-center descriptors for one candidate mask, fused with the
/// query's PCA.
#[allow(clippy::too_many_arguments)]
pub fn build_target_features<T: Real>(
    scene: &SceneBundle<T>,
    mask_ref: usize,
    object_id: &str,
    diameter: T,
    providers: &Providers<T>,
    geo: &GeoScaleConfig,
    pca: &PcaProjection<T>,
    cfg: &TargetFeatureConfig,
) -> Result<TargetFeatures<T>, FeatureError> {
    let mask = scene
        .mask(mask_ref)
        .ok_or_else(|| FeatureError::InvalidConfig(format!("no mask {mask_ref}")))?;
    if mask.is_empty() {
        return Err(FeatureError::EmptyMask);
    }
    let centers = grid_patch_centers(mask, cfg.grid)?;
    let bp = backproject(&scene.depth, &scene.intrinsics, &centers)?;
    if bp.points.is_empty() {
        return Err(FeatureError::NoValidDepth);
    }
    let dense = dense_target_cloud(scene, mask_ref, cfg.dense_count, cfg.seed)?;
    let pixels: Vec<Pixel> = bp.kept.iter().map(|&i| centers[i]).collect();
    let describe = |modality| -> Result<Descriptors<T>, FeatureError> {
        let provider = match modality {
            Modality::Visual => &providers.visual,
            Modality::Geometric => &providers.geometric,
        };
        let d = provider.describe(&DescribeRequest {
            side: Side::Target {
                scene,
                mask_ref,
                object_id,
                pixels: &pixels,
            },
            modality,
            keys: &bp.kept,
            key_count: centers.len(),
            points: &bp.points,
            support: &dense,
            diameter,
            geo,
        })?;
        check_rows(&d, bp.points.len())?;
        Ok(d)
    };
    let visual = describe(Modality::Visual)?;
    let geometric = describe(Modality::Geometric)?;
    let fused = fuse_rows(&visual, &geometric, pca)?;
    let mut points = Vec::new();
    let mut descriptors = Vec::new();
    let mut sparse_pixels = Vec::new();
    for (j, f) in fused.into_iter().enumerate() {
        if let Some(f) = f {
            points.push(bp.points[j]);
            descriptors.extend(f);
            sparse_pixels.push(pixels[j]);
        }
    }
    if points.is_empty() {
        return Err(FeatureError::NoValidDepth);
    }
    let dim = 2 * pca.d_out();
    Ok(TargetFeatures {
        sparse: FeatureCloud::new(points, descriptors, dim)?,
        dense,
        sparse_pixels,
    })
}
