//! Pluggable descriptor sources.
//!
//! A provider answers batched requests for visual or geometric descriptors
//! of query (model-frame) or target (camera-frame) points. Three kinds are
//! built in: `file` reads precomputed descriptors from `.fcl` files,
//! `synthetic-geometric` computes handcrafted shape histograms, and
//! `oracle` encodes ground-truth model coordinates (tests only).

use super::descriptors::{hashed_descriptor, shape_histogram, OracleEncoder, ShapeSupport};
use super::{load_feature_cloud, FeatureError, GeoScaleConfig};
use crate::scalar::Real;
use crate::types::{ObjectModel, Pixel, SceneBundle};
use nalgebra::Point3;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ProviderKind {
    File,
    SyntheticGeometric,
    Oracle,
}

impl FromStr for ProviderKind {
    type Err = FeatureError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "file" => Ok(Self::File),
            "synthetic-geometric" => Ok(Self::SyntheticGeometric),
            "oracle" => Ok(Self::Oracle),
            other => Err(FeatureError::InvalidConfig(format!(
                "unknown provider kind '{other}'"
            ))),
        }
    }
}

impl fmt::Display for ProviderKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::File => "file",
            Self::SyntheticGeometric => "synthetic-geometric",
            Self::Oracle => "oracle",
        })
    }
}

/// Provider kind plus free-form parameters.
///
/// Recognized parameters:
/// - `visual_kind`, `geometric_kind`: override `kind` for one half.
/// - oracle: `visual_dim` (default 64).
/// - synthetic-geometric: `visual_radii`, `visual_dims` (comma-separated;
///   defaults `0.12,0.2` and `32,32`).
/// - file: `query_visual`, `query_geometric`, `target_visual`,
///   `target_geometric` paths. Target paths may contain `{scene}` and
///   `{mask}`; `query_visual` may contain `{view}` for per-view files.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct DescriptorProviderSpec {
    pub kind: Option<ProviderKind>,
    #[serde(default)]
    pub params: BTreeMap<String, String>,
}

impl DescriptorProviderSpec {
    pub fn new(kind: ProviderKind) -> Self {
        Self {
            kind: Some(kind),
            params: BTreeMap::new(),
        }
    }

    pub fn with_param(mut self, key: &str, value: impl Into<String>) -> Self {
        self.params.insert(key.to_string(), value.into());
        self
    }

    fn kind_for(&self, modality: Modality) -> Result<ProviderKind, FeatureError> {
        let key = match modality {
            Modality::Visual => "visual_kind",
            Modality::Geometric => "geometric_kind",
        };
        match self.params.get(key) {
            Some(k) => k.parse(),
            None => self
                .kind
                .ok_or_else(|| FeatureError::InvalidConfig("provider kind not set".into())),
        }
    }

    /// Instantiate the provider serving one descriptor half.
    pub fn build<T: Real>(
        &self,
        modality: Modality,
    ) -> Result<Box<dyn DescriptorProvider<T>>, FeatureError> {
        Ok(match self.kind_for(modality)? {
            ProviderKind::Oracle => Box::new(OracleProvider::from_params(&self.params)?),
            ProviderKind::SyntheticGeometric => {
                Box::new(SyntheticProvider::from_params(&self.params)?)
            }
            ProviderKind::File => Box::new(FileProvider {
                params: self.params.clone(),
            }),
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Modality {
    Visual,
    Geometric,
}

/// Which branch a request comes from.
#[derive(Clone, Copy, Debug)]
pub enum Side<'a, T: Real> {
    /// Model-frame points; `view` is set for per-view visual requests.
    Query {
        model: &'a ObjectModel<T>,
        view: Option<usize>,
    },
    /// Camera-frame points lifted from `pixels` (one per point).
    Target {
        scene: &'a SceneBundle<T>,
        mask_ref: usize,
        object_id: &'a str,
        pixels: &'a [Pixel],
    },
}

/// A batch of points to describe.
#[derive(Clone, Copy, Debug)]
pub struct DescribeRequest<'a, T: Real> {
    pub side: Side<'a, T>,
    pub modality: Modality,
    /// Row key of every point in a descriptor file: raw sample index for
    /// the query, patch index for the target.
    pub keys: &'a [usize],
    /// Number of rows a descriptor file for this request must have.
    pub key_count: usize,
    pub points: &'a [Point3<T>],
    /// Cloud the neighbourhoods are taken from.
    pub support: &'a [Point3<T>],
    pub diameter: T,
    pub geo: &'a GeoScaleConfig,
}

/// Row-major descriptor batch.
#[derive(Clone, Debug, PartialEq)]
pub struct Descriptors<T> {
    pub dim: usize,
    pub values: Vec<T>,
}

impl<T: Copy> Descriptors<T> {
    pub fn len(&self) -> usize {
        self.values.len().checked_div(self.dim).unwrap_or(0)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn row(&self, i: usize) -> &[T] {
        &self.values[i * self.dim..(i + 1) * self.dim]
    }
}

pub trait DescriptorProvider<T: Real>: Send + Sync {
    fn describe(&self, request: &DescribeRequest<'_, T>) -> Result<Descriptors<T>, FeatureError>;

    /// Whether query visual descriptors differ per template view. When
    /// false, one view-less request serves all views.
    fn view_dependent(&self) -> bool {
        false
    }
}

/// Describe a batch with a provider built from `spec`.
pub fn provider_describe<T: Real>(
    spec: &DescriptorProviderSpec,
    request: &DescribeRequest<'_, T>,
) -> Result<Descriptors<T>, FeatureError> {
    spec.build::<T>(request.modality)?.describe(request)
}

fn check_request<T: Real>(req: &DescribeRequest<'_, T>) -> Result<(), FeatureError> {
    if req.keys.len() != req.points.len() {
        return Err(FeatureError::IndexMismatch {
            expected: req.points.len(),
            got: req.keys.len(),
        });
    }
    if let Side::Target { pixels, .. } = req.side {
        if pixels.len() != req.points.len() {
            return Err(FeatureError::IndexMismatch {
                expected: req.points.len(),
                got: pixels.len(),
            });
        }
    }
    Ok(())
}

fn parse_list<V: FromStr>(
    params: &BTreeMap<String, String>,
    key: &str,
    default: &str,
) -> Result<Vec<V>, FeatureError> {
    params
        .get(key)
        .map(String::as_str)
        .unwrap_or(default)
        .split(',')
        .map(|s| {
            s.trim()
                .parse()
                .map_err(|_| FeatureError::InvalidConfig(format!("bad value '{s}' for {key}")))
        })
        .collect()
}

struct OracleProvider {
    visual: OracleEncoder,
}

const VISUAL_SALT: u64 = 1;
const GEOMETRIC_SALT: u64 = 2;

impl OracleProvider {
    fn from_params(params: &BTreeMap<String, String>) -> Result<Self, FeatureError> {
        let dim: Vec<usize> = parse_list(params, "visual_dim", "64")?;
        Ok(Self {
            visual: OracleEncoder::new(dim[0], VISUAL_SALT)?,
        })
    }
}

impl<T: Real> DescriptorProvider<T> for OracleProvider {
    fn describe(&self, req: &DescribeRequest<'_, T>) -> Result<Descriptors<T>, FeatureError> {
        check_request(req)?;
        let geometric;
        let (enc, salt) = match req.modality {
            Modality::Visual => (&self.visual, VISUAL_SALT),
            Modality::Geometric => {
                geometric = OracleEncoder::new(req.geo.total_dim(), GEOMETRIC_SALT)?;
                (&geometric, GEOMETRIC_SALT)
            }
        };
        let dim = enc.dim();
        let mut values = Vec::with_capacity(dim * req.points.len());
        match req.side {
            Side::Query { .. } => {
                for p in req.points {
                    enc.encode(p, req.diameter, &mut values);
                }
            }
            Side::Target {
                scene,
                object_id,
                pixels,
                ..
            } => {
                let oracle = scene.oracle.as_ref().ok_or_else(|| {
                    FeatureError::Provider("scene carries no oracle coordinates".into())
                })?;
                for px in pixels {
                    match oracle.get(*px) {
                        Some((id, p)) if id == object_id => {
                            enc.encode(p, req.diameter, &mut values)
                        }
                        _ => {
                            let key = (px.v * scene.intrinsics.width + px.u) as u64;
                            hashed_descriptor(
                                key.wrapping_mul(31).wrapping_add(salt),
                                dim,
                                &mut values,
                            )
                        }
                    }
                }
            }
        }
        Ok(Descriptors { dim, values })
    }
}

struct SyntheticProvider {
    visual: GeoScaleConfig,
}

impl SyntheticProvider {
    fn from_params(params: &BTreeMap<String, String>) -> Result<Self, FeatureError> {
        let visual = GeoScaleConfig {
            radii: parse_list(params, "visual_radii", "0.12,0.2")?,
            dims: parse_list(params, "visual_dims", "32,32")?,
        };
        visual.validate()?;
        Ok(Self { visual })
    }
}

impl<T: Real> DescriptorProvider<T> for SyntheticProvider {
    fn describe(&self, req: &DescribeRequest<'_, T>) -> Result<Descriptors<T>, FeatureError> {
        check_request(req)?;
        let scales = match req.modality {
            Modality::Visual => &self.visual,
            Modality::Geometric => req.geo,
        };
        scales.validate()?;
        let support = match req.side {
            Side::Query { .. } => ShapeSupport::uniform(req.support),
            Side::Target { .. } => ShapeSupport::from_depth_pixels(req.support),
        };
        let dim = scales.total_dim();
        let rows: Vec<Vec<T>> = req
            .points
            .par_iter()
            .map(|p| {
                let mut row = Vec::with_capacity(dim);
                for (r, d) in scales.radii.iter().zip(&scales.dims) {
                    shape_histogram(&support, p, req.diameter * T::lit(*r), *d, &mut row)?;
                }
                Ok(row)
            })
            .collect::<Result<_, FeatureError>>()?;
        Ok(Descriptors {
            dim,
            values: rows.concat(),
        })
    }
}

struct FileProvider {
    params: BTreeMap<String, String>,
}

impl FileProvider {
    fn path<T: Real>(&self, req: &DescribeRequest<'_, T>) -> Result<PathBuf, FeatureError> {
        let key = match (req.side, req.modality) {
            (Side::Query { .. }, Modality::Visual) => "query_visual",
            (Side::Query { .. }, Modality::Geometric) => "query_geometric",
            (Side::Target { .. }, Modality::Visual) => "target_visual",
            (Side::Target { .. }, Modality::Geometric) => "target_geometric",
        };
        let template = self.params.get(key).ok_or_else(|| {
            FeatureError::InvalidConfig(format!("file provider needs parameter '{key}'"))
        })?;
        let path = match req.side {
            Side::Query { view, .. } => match view {
                Some(v) => template.replace("{view}", &v.to_string()),
                None => template.clone(),
            },
            Side::Target {
                scene, mask_ref, ..
            } => template
                .replace("{scene}", &scene.scene_id)
                .replace("{mask}", &mask_ref.to_string()),
        };
        Ok(PathBuf::from(path))
    }
}

impl<T: Real> DescriptorProvider<T> for FileProvider {
    fn describe(&self, req: &DescribeRequest<'_, T>) -> Result<Descriptors<T>, FeatureError> {
        check_request(req)?;
        let path = self.path(req)?;
        if !path.exists() {
            return Err(FeatureError::FileMissing(path));
        }
        let fc = load_feature_cloud::<T>(&path)?;
        if fc.len() != req.key_count {
            return Err(FeatureError::IndexMismatch {
                expected: req.key_count,
                got: fc.len(),
            });
        }
        let mut values = Vec::with_capacity(fc.dim() * req.keys.len());
        for &k in req.keys {
            if k >= fc.len() {
                return Err(FeatureError::IndexMismatch {
                    expected: req.key_count,
                    got: k + 1,
                });
            }
            values.extend_from_slice(fc.descriptor(k));
        }
        Ok(Descriptors {
            dim: fc.dim(),
            values,
        })
    }

    fn view_dependent(&self) -> bool {
        self.params
            .get("query_visual")
            .is_some_and(|p| p.contains("{view}"))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::features::save_feature_cloud;
    use crate::geometry::shapes;
    use crate::types::FeatureCloud;

    fn query_request<'a>(
        model: &'a ObjectModel<f64>,
        pts: &'a [Point3<f64>],
        keys: &'a [usize],
        geo: &'a GeoScaleConfig,
        modality: Modality,
    ) -> DescribeRequest<'a, f64> {
        DescribeRequest {
            side: Side::Query { model, view: None },
            modality,
            keys,
            key_count: keys.len(),
            points: pts,
            support: pts,
            diameter: model.diameter(),
            geo,
        }
    }

    #[test]
    fn kind_parsing() {
        assert_eq!(
            "oracle".parse::<ProviderKind>().unwrap(),
            ProviderKind::Oracle
        );
        assert_eq!(
            "synthetic-geometric".parse::<ProviderKind>().unwrap(),
            ProviderKind::SyntheticGeometric
        );
        assert!("dino".parse::<ProviderKind>().is_err());
    }

    #[test]
    fn oracle_distinct_points() {
        let model = shapes::unit_cube::<f64>().unwrap();
        let pts = vec![Point3::new(0.5, 0.1, 0.2), Point3::new(0.5, 0.3, -0.2)];
        let geo = GeoScaleConfig::default();
        let spec = DescriptorProviderSpec::new(ProviderKind::Oracle);
        let d = provider_describe(
            &spec,
            &query_request(&model, &pts, &[0, 1], &geo, Modality::Geometric),
        )
        .unwrap();
        assert_eq!(d.dim, 64);
        let dot: f64 = d.row(0).iter().zip(d.row(1)).map(|(a, b)| a * b).sum();
        assert!(dot < 1.0 - 1e-6);
    }

    #[test]
    fn file_provider_count_mismatch() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("vis.fcl");
        let fc = FeatureCloud::new(vec![Point3::origin(); 3], vec![1.0f64; 12], 4).unwrap();
        save_feature_cloud(&fc, &path).unwrap();
        let spec = DescriptorProviderSpec::new(ProviderKind::File)
            .with_param("query_visual", path.to_string_lossy());
        let model = shapes::unit_cube::<f64>().unwrap();
        let pts = vec![Point3::origin(); 4];
        let geo = GeoScaleConfig::default();
        let req = query_request(&model, &pts, &[0, 1, 2, 3], &geo, Modality::Visual);
        assert!(matches!(
            provider_describe(&spec, &req),
            Err(FeatureError::IndexMismatch {
                expected: 4,
                got: 3
            })
        ));
        let missing = DescriptorProviderSpec::new(ProviderKind::File)
            .with_param("query_visual", "/nonexistent/x.fcl");
        assert!(matches!(
            provider_describe(&missing, &req),
            Err(FeatureError::FileMissing(_))
        ));
    }

    #[test]
    fn file_provider_gathers_rows_by_key() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("geo.fcl");
        let desc: Vec<f64> = (0..6).map(|i| i as f64).collect();
        let fc = FeatureCloud::new(vec![Point3::origin(); 3], desc, 2).unwrap();
        save_feature_cloud(&fc, &path).unwrap();
        let spec = DescriptorProviderSpec::new(ProviderKind::File)
            .with_param("query_geometric", path.to_string_lossy());
        let model = shapes::unit_cube::<f64>().unwrap();
        let pts = vec![Point3::origin(); 2];
        let geo = GeoScaleConfig::default();
        let mut req = query_request(&model, &pts, &[2, 0], &geo, Modality::Geometric);
        req.key_count = 3;
        let d = provider_describe(&spec, &req).unwrap();
        assert_eq!(d.values, vec![4.0, 5.0, 0.0, 1.0]);
    }

    #[test]
    fn half_override() {
        let spec = DescriptorProviderSpec::new(ProviderKind::SyntheticGeometric)
            .with_param("visual_kind", "oracle");
        assert_eq!(
            spec.kind_for(Modality::Visual).unwrap(),
            ProviderKind::Oracle
        );
        assert_eq!(
            spec.kind_for(Modality::Geometric).unwrap(),
            ProviderKind::SyntheticGeometric
        );
    }
}
