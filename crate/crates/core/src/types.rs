//! Domain types shared by every stage of the pipeline.
//!
//! Units are meters for 3D quantities and pixels for image quantities.
//! All types are immutable after construction and validate their
//! invariants in their constructors.

use crate::scalar::Real;
use nalgebra::{Matrix3, Point2, Point3, Rotation3, Unit, Vector3};
use rayon::prelude::*;
use std::collections::BTreeMap;
use std::path::PathBuf;
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CoreError {
    #[error("rotation is not orthonormal (max |R^T R - I| = {0:e})")]
    NotARotation(f64),
    #[error("rotation is a reflection (det = {0})")]
    Reflection(f64),
    #[error("invalid camera intrinsics: {0}")]
    InvalidIntrinsics(String),
    #[error("invalid depth image: {0}")]
    InvalidDepth(String),
    #[error("invalid mask: {0}")]
    InvalidMask(String),
    #[error("invalid object model: {0}")]
    InvalidModel(String),
    #[error("invalid feature cloud: {0}")]
    InvalidFeatureCloud(String),
    #[error("invalid scene: {0}")]
    InvalidScene(String),
}

/// Rigid transform `x -> R x + t`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Pose<T: Real> {
    pub rotation: Matrix3<T>,
    pub translation: Vector3<T>,
}

/// Checks orthonormality first, then handedness.
pub fn validate_pose<T: Real>(p: &Pose<T>) -> Result<(), CoreError> {
    let r = &p.rotation;
    if r.iter().chain(p.translation.iter()).any(|v| !v.is_finite()) {
        return Err(CoreError::NotARotation(f64::INFINITY));
    }
    let dev = (r.transpose() * r - Matrix3::identity()).amax();
    if dev >= T::rotation_tolerance() {
        return Err(CoreError::NotARotation(dev.as_f64()));
    }
    let det = r.determinant();
    if (det - T::one()).abs() > T::rotation_tolerance() {
        return Err(CoreError::Reflection(det.as_f64()));
    }
    Ok(())
}

impl<T: Real> Pose<T> {
    pub fn identity() -> Self {
        Self {
            rotation: Matrix3::identity(),
            translation: Vector3::zeros(),
        }
    }

    /// Validated constructor.
    pub fn new(rotation: Matrix3<T>, translation: Vector3<T>) -> Result<Self, CoreError> {
        let p = Self {
            rotation,
            translation,
        };
        validate_pose(&p)?;
        Ok(p)
    }

    /// Constructor for rotations that are orthonormal by construction
    /// (SVD products, axis-angle maps).
    pub fn from_parts(rotation: Matrix3<T>, translation: Vector3<T>) -> Self {
        Self {
            rotation,
            translation,
        }
    }

    pub fn from_translation(translation: Vector3<T>) -> Self {
        Self {
            rotation: Matrix3::identity(),
            translation,
        }
    }

    pub fn from_axis_angle(axis: &Vector3<T>, angle: T, translation: Vector3<T>) -> Self {
        let rot = Rotation3::from_axis_angle(&Unit::new_normalize(*axis), angle);
        Self {
            rotation: *rot.matrix(),
            translation,
        }
    }

    /// Row-major 3x3 rotation followed by the translation.
    pub fn from_row_major(r: &[T; 9], t: &[T; 3]) -> Result<Self, CoreError> {
        Self::new(Matrix3::from_row_slice(r), Vector3::new(t[0], t[1], t[2]))
    }

    pub fn rotation_row_major(&self) -> [T; 9] {
        let r = &self.rotation;
        [
            r[(0, 0)],
            r[(0, 1)],
            r[(0, 2)],
            r[(1, 0)],
            r[(1, 1)],
            r[(1, 2)],
            r[(2, 0)],
            r[(2, 1)],
            r[(2, 2)],
        ]
    }

    /// `self ∘ other`: apply `other` first.
    pub fn compose(&self, other: &Pose<T>) -> Pose<T> {
        Pose {
            rotation: self.rotation * other.rotation,
            translation: self.rotation * other.translation + self.translation,
        }
    }

    pub fn inverse(&self) -> Pose<T> {
        let rt = self.rotation.transpose();
        Pose {
            rotation: rt,
            translation: -(rt * self.translation),
        }
    }

    #[inline]
    pub fn transform_point(&self, p: &Point3<T>) -> Point3<T> {
        Point3::from(self.rotation * p.coords + self.translation)
    }

    /// Geodesic angle (radians) between the two rotations.
    pub fn rotation_error(&self, other: &Pose<T>) -> T {
        let rel = self.rotation.transpose() * other.rotation;
        let c = (rel.trace() - T::one()) * T::lit(0.5);
        c.clamp(-T::one(), T::one()).acos()
    }

    pub fn translation_error(&self, other: &Pose<T>) -> T {
        (self.translation - other.translation).norm()
    }

    pub fn cast<U: Real>(&self) -> Pose<U> {
        Pose {
            rotation: self.rotation.map(|v| U::lit(v.as_f64())),
            translation: self.translation.map(|v| U::lit(v.as_f64())),
        }
    }
}

/// Pinhole intrinsics.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CameraIntrinsics<T: Real> {
    pub fx: T,
    pub fy: T,
    pub cx: T,
    pub cy: T,
    pub width: usize,
    pub height: usize,
}

impl<T: Real> CameraIntrinsics<T> {
    pub fn new(fx: T, fy: T, cx: T, cy: T, width: usize, height: usize) -> Result<Self, CoreError> {
        if !(fx > T::zero() && fy > T::zero()) {
            return Err(CoreError::InvalidIntrinsics(format!(
                "focal lengths must be positive (fx={fx}, fy={fy})"
            )));
        }
        if !(cx >= T::zero()
            && cx < T::from_count(width)
            && cy >= T::zero()
            && cy < T::from_count(height))
        {
            return Err(CoreError::InvalidIntrinsics(format!(
                "principal point ({cx}, {cy}) outside {width}x{height} image"
            )));
        }
        Ok(Self {
            fx,
            fy,
            cx,
            cy,
            width,
            height,
        })
    }

    /// Square image with the given vertical field of view, principal point
    /// at the image center.
    pub fn from_fov(size: usize, fov_y: T) -> Result<Self, CoreError> {
        let half = T::from_count(size) * T::lit(0.5);
        let f = half / (fov_y * T::lit(0.5)).tan();
        Self::new(f, f, half, half, size, size)
    }

    /// Forward pinhole map. `None` for points at or behind the camera plane.
    #[inline]
    pub fn project(&self, p: &Point3<T>) -> Option<Point2<T>> {
        if p.z <= T::zero() {
            return None;
        }
        Some(Point2::new(
            self.fx * p.x / p.z + self.cx,
            self.fy * p.y / p.z + self.cy,
        ))
    }

    #[inline]
    pub fn backproject(&self, u: T, v: T, depth: T) -> Point3<T> {
        Point3::new(
            (u - self.cx) * depth / self.fx,
            (v - self.cy) * depth / self.fy,
            depth,
        )
    }

    pub fn cast<U: Real>(&self) -> CameraIntrinsics<U> {
        CameraIntrinsics {
            fx: U::lit(self.fx.as_f64()),
            fy: U::lit(self.fy.as_f64()),
            cx: U::lit(self.cx.as_f64()),
            cy: U::lit(self.cy.as_f64()),
            width: self.width,
            height: self.height,
        }
    }
}

/// Per-pixel range along the optical axis in meters; 0 marks invalid.
#[derive(Clone, Debug, PartialEq)]
pub struct DepthImage<T: Real> {
    width: usize,
    height: usize,
    values: Vec<T>,
}

impl<T: Real> DepthImage<T> {
    pub fn new(width: usize, height: usize, values: Vec<T>) -> Result<Self, CoreError> {
        if values.len() != width * height {
            return Err(CoreError::InvalidDepth(format!(
                "{} values for a {width}x{height} image",
                values.len()
            )));
        }
        if let Some(bad) = values.iter().find(|v| !v.is_finite() || **v < T::zero()) {
            return Err(CoreError::InvalidDepth(format!(
                "value {bad} is negative or non-finite"
            )));
        }
        Ok(Self {
            width,
            height,
            values,
        })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn values(&self) -> &[T] {
        &self.values
    }

    #[inline]
    pub fn get(&self, u: usize, v: usize) -> T {
        self.values[v * self.width + u]
    }
}

/// Binary instance segmentation hypothesis from one segmentation source.
#[derive(Clone, Debug, PartialEq)]
pub struct CandidateMask {
    width: usize,
    height: usize,
    bitmap: Vec<bool>,
    pub confidence: f64,
    pub source_id: String,
    pub object_id: String,
}

impl CandidateMask {
    pub fn new(
        width: usize,
        height: usize,
        bitmap: Vec<bool>,
        confidence: f64,
        source_id: impl Into<String>,
        object_id: impl Into<String>,
    ) -> Result<Self, CoreError> {
        if bitmap.len() != width * height {
            return Err(CoreError::InvalidMask(format!(
                "{} entries for a {width}x{height} bitmap",
                bitmap.len()
            )));
        }
        if !(0.0..=1.0).contains(&confidence) {
            return Err(CoreError::InvalidMask(format!(
                "confidence {confidence} outside [0,1]"
            )));
        }
        Ok(Self {
            width,
            height,
            bitmap,
            confidence,
            source_id: source_id.into(),
            object_id: object_id.into(),
        })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn bitmap(&self) -> &[bool] {
        &self.bitmap
    }

    #[inline]
    pub fn contains(&self, u: usize, v: usize) -> bool {
        u < self.width && v < self.height && self.bitmap[v * self.width + u]
    }

    pub fn area(&self) -> usize {
        self.bitmap.iter().filter(|b| **b).count()
    }

    pub fn is_empty(&self) -> bool {
        !self.bitmap.iter().any(|b| *b)
    }

    /// Inside pixels in row-major order.
    pub fn pixels(&self) -> impl Iterator<Item = Pixel> + '_ {
        self.bitmap
            .iter()
            .enumerate()
            .filter(|(_, b)| **b)
            .map(move |(i, _)| Pixel::new(i % self.width, i / self.width))
    }
}

/// Integer pixel coordinate; `u` is the column, `v` the row.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Pixel {
    pub u: usize,
    pub v: usize,
}

impl Pixel {
    pub const fn new(u: usize, v: usize) -> Self {
        Self { u, v }
    }
}

/// Triangle mesh of the query object with its diameter and discrete
/// symmetry set.
#[derive(Clone, Debug, PartialEq)]
pub struct ObjectModel<T: Real> {
    vertices: Vec<Point3<T>>,
    triangles: Vec<[usize; 3]>,
    diameter: T,
    symmetries: Vec<Pose<T>>,
}

/// Maximum pairwise distance, brute force.
pub fn max_pairwise_distance<T: Real>(points: &[Point3<T>]) -> T {
    points
        .par_iter()
        .enumerate()
        .map(|(i, a)| {
            points[i + 1..]
                .iter()
                .map(|b| (a - b).norm_squared())
                .fold(T::zero(), |m, d| if d > m { d } else { m })
        })
        .reduce(T::zero, |a, b| if b > a { b } else { a })
        .sqrt()
}

impl<T: Real> ObjectModel<T> {
    /// Builds a model, computing the diameter from the vertices. The
    /// identity is prepended to `symmetries` when absent.
    pub fn new(
        vertices: Vec<Point3<T>>,
        triangles: Vec<[usize; 3]>,
        symmetries: Vec<Pose<T>>,
    ) -> Result<Self, CoreError> {
        let diameter = max_pairwise_distance(&vertices);
        Self::with_diameter(vertices, triangles, symmetries, diameter)
    }

    /// Builds a model with a known diameter, which must match the vertex
    /// set to 1e-9 relative.
    pub fn with_diameter(
        vertices: Vec<Point3<T>>,
        triangles: Vec<[usize; 3]>,
        mut symmetries: Vec<Pose<T>>,
        diameter: T,
    ) -> Result<Self, CoreError> {
        if vertices.is_empty() {
            return Err(CoreError::InvalidModel("no vertices".into()));
        }
        if let Some(t) = triangles
            .iter()
            .find(|t| t.iter().any(|&i| i >= vertices.len()))
        {
            return Err(CoreError::InvalidModel(format!(
                "triangle {t:?} indexes past {} vertices",
                vertices.len()
            )));
        }
        if vertices
            .iter()
            .any(|v| !v.coords.iter().all(|c| c.is_finite()))
        {
            return Err(CoreError::InvalidModel("non-finite vertex".into()));
        }
        let brute = max_pairwise_distance(&vertices);
        if !(diameter > T::zero()) || (diameter - brute).abs() > T::lit(1e-9) * brute {
            return Err(CoreError::InvalidModel(format!(
                "diameter {diameter} does not match max vertex distance {brute}"
            )));
        }
        for s in &symmetries {
            validate_pose(s)?;
        }
        let has_identity = symmetries.iter().any(|s| {
            (s.rotation - Matrix3::identity()).amax() < T::rotation_tolerance()
                && s.translation.amax() < T::rotation_tolerance() * diameter
        });
        if !has_identity {
            symmetries.insert(0, Pose::identity());
        }
        Ok(Self {
            vertices,
            triangles,
            diameter,
            symmetries,
        })
    }

    pub fn vertices(&self) -> &[Point3<T>] {
        &self.vertices
    }

    pub fn triangles(&self) -> &[[usize; 3]] {
        &self.triangles
    }

    pub fn diameter(&self) -> T {
        self.diameter
    }

    pub fn symmetries(&self) -> &[Pose<T>] {
        &self.symmetries
    }

    pub fn triangle(&self, i: usize) -> [Point3<T>; 3] {
        let [a, b, c] = self.triangles[i];
        [self.vertices[a], self.vertices[b], self.vertices[c]]
    }

    pub fn triangle_area(&self, i: usize) -> T {
        let [a, b, c] = self.triangle(i);
        (b - a).cross(&(c - a)).norm() * T::lit(0.5)
    }

    pub fn surface_area(&self) -> T {
        (0..self.triangles.len()).fold(T::zero(), |acc, i| acc + self.triangle_area(i))
    }

    /// Replace the symmetry list (identity is re-added when missing).
    pub fn with_symmetries(self, symmetries: Vec<Pose<T>>) -> Result<Self, CoreError> {
        Self::with_diameter(self.vertices, self.triangles, symmetries, self.diameter)
    }
}

/// 3D points each carrying a descriptor of dimension `dim`.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureCloud<T: Real> {
    points: Vec<Point3<T>>,
    descriptors: Vec<T>,
    dim: usize,
}

impl<T: Real> FeatureCloud<T> {
    /// `descriptors` is row-major `N x dim`.
    pub fn new(points: Vec<Point3<T>>, descriptors: Vec<T>, dim: usize) -> Result<Self, CoreError> {
        if points.is_empty() {
            return Err(CoreError::InvalidFeatureCloud("no points".into()));
        }
        if dim == 0 || descriptors.len() != points.len() * dim {
            return Err(CoreError::InvalidFeatureCloud(format!(
                "{} descriptor values for {} points of dim {dim}",
                descriptors.len(),
                points.len()
            )));
        }
        Ok(Self {
            points,
            descriptors,
            dim,
        })
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn points(&self) -> &[Point3<T>] {
        &self.points
    }

    pub fn descriptors(&self) -> &[T] {
        &self.descriptors
    }

    #[inline]
    pub fn point(&self, i: usize) -> &Point3<T> {
        &self.points[i]
    }

    #[inline]
    pub fn descriptor(&self, i: usize) -> &[T] {
        &self.descriptors[i * self.dim..(i + 1) * self.dim]
    }

    /// Same descriptors, points moved by `pose`.
    pub fn transformed(&self, pose: &Pose<T>) -> Self {
        Self {
            points: self
                .points
                .iter()
                .map(|p| pose.transform_point(p))
                .collect(),
            descriptors: self.descriptors.clone(),
            dim: self.dim,
        }
    }
}

/// Refined pose with its score tuple.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ScoredPose<T: Real> {
    pub pose: Pose<T>,
    pub s_coarse: T,
    pub s_fine: T,
    pub s_icp: T,
    pub s_final: T,
    pub mask_ref: usize,
}

/// Candidate masks produced by one segmentation method.
#[derive(Clone, Debug, PartialEq)]
pub struct MaskSource {
    pub source_id: String,
    pub masks: Vec<CandidateMask>,
}

/// Ground-truth model-frame surface coordinates per pixel, used only by the
/// oracle descriptor provider on synthetic scenes.
#[derive(Clone, Debug, PartialEq)]
pub struct OracleCoordinates<T: Real> {
    pub width: usize,
    pub height: usize,
    /// `(object_id, model-frame point)` for pixels covered by an object.
    pub coords: Vec<Option<(String, Point3<T>)>>,
}

impl<T: Real> OracleCoordinates<T> {
    pub fn get(&self, px: Pixel) -> Option<&(String, Point3<T>)> {
        self.coords
            .get(px.v * self.width + px.u)
            .and_then(|c| c.as_ref())
    }
}

/// Where precomputed target features for a mask come from.
#[derive(Clone, Debug, PartialEq)]
pub enum TargetFeatureSource<T: Real> {
    File(PathBuf),
    InMemory {
        sparse: FeatureCloud<T>,
        dense: Vec<Point3<T>>,
    },
}

/// Everything the pipeline consumes from one test image.
#[derive(Clone, Debug, PartialEq)]
pub struct SceneBundle<T: Real> {
    pub scene_id: String,
    pub depth: DepthImage<T>,
    pub intrinsics: CameraIntrinsics<T>,
    pub sources: Vec<MaskSource>,
    /// Keyed by flat mask index (see [`SceneBundle::masks`]).
    pub precomputed_target_features: BTreeMap<usize, TargetFeatureSource<T>>,
    pub oracle: Option<OracleCoordinates<T>>,
}

impl<T: Real> SceneBundle<T> {
    pub fn new(
        scene_id: impl Into<String>,
        depth: DepthImage<T>,
        intrinsics: CameraIntrinsics<T>,
        sources: Vec<MaskSource>,
    ) -> Result<Self, CoreError> {
        if depth.width() != intrinsics.width || depth.height() != intrinsics.height {
            return Err(CoreError::InvalidScene(format!(
                "depth {}x{} does not match camera {}x{}",
                depth.width(),
                depth.height(),
                intrinsics.width,
                intrinsics.height
            )));
        }
        for src in &sources {
            for m in &src.masks {
                if m.width() != depth.width() || m.height() != depth.height() {
                    return Err(CoreError::InvalidScene(format!(
                        "mask {}x{} from source {} does not match depth {}x{}",
                        m.width(),
                        m.height(),
                        src.source_id,
                        depth.width(),
                        depth.height()
                    )));
                }
            }
        }
        Ok(Self {
            scene_id: scene_id.into(),
            depth,
            intrinsics,
            sources,
            precomputed_target_features: BTreeMap::new(),
            oracle: None,
        })
    }

    /// All masks flattened in source order; the position is the mask's
    /// `mask_ref`.
    pub fn masks(&self) -> impl Iterator<Item = (usize, &CandidateMask)> {
        self.sources.iter().flat_map(|s| s.masks.iter()).enumerate()
    }

    pub fn mask(&self, mask_ref: usize) -> Option<&CandidateMask> {
        self.masks().nth(mask_ref).map(|(_, m)| m)
    }
}
