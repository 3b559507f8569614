//! Built-in descriptor kernels: a positional encoding of model coordinates
//! for oracle tests and a rotation-invariant local shape histogram.

use super::FeatureError;
use crate::geometry::sphere_directions;
use crate::scalar::Real;
use crate::spatial::KdTree;
use nalgebra::{Point3, Rotation3, Vector3};

/// Longest and shortest encoding wavelength, in diameters.
const LONGEST_WAVELENGTH: f64 = 2.0;
const SHORTEST_WAVELENGTH: f64 = 0.25;

/// Sinusoidal encoding of `p / diameter` along `dim / 2` directions.
///
/// Each direction contributes a `(cos, sin)` pair at its own frequency, so
/// the dot product of two codes equals the mean of `cos(w_j u_j . (p - q))`
/// and depends only on the offset `p - q`. It peaks (at 1) for `p == q`.
/// `salt` rotates the direction set so different salts give unrelated
/// codes for the same point.
#[derive(Clone, Debug)]
pub struct OracleEncoder {
    waves: Vec<Vector3<f64>>,
    odd: bool,
}

impl OracleEncoder {
    pub fn new(dim: usize, salt: u64) -> Result<Self, FeatureError> {
        if dim < 2 {
            return Err(FeatureError::InvalidConfig(format!(
                "oracle dimension {dim} < 2"
            )));
        }
        let pairs = dim / 2;
        let twist =
            Rotation3::from_euler_angles(0.7 * salt as f64, 1.3 * salt as f64, 0.4 * salt as f64);
        let dirs = sphere_directions(pairs.max(4));
        let waves = (0..pairs)
            .map(|j| {
                let frac = if pairs > 1 {
                    j as f64 / (pairs - 1) as f64
                } else {
                    0.0
                };
                let wavelength =
                    LONGEST_WAVELENGTH * (SHORTEST_WAVELENGTH / LONGEST_WAVELENGTH).powf(frac);
                // Interleave directions so each frequency band sees a spread of them.
                let d = dirs[(j * 7 + salt as usize) % dirs.len()];
                twist * d * (std::f64::consts::TAU / wavelength)
            })
            .collect();
        Ok(Self {
            waves,
            odd: dim % 2 == 1,
        })
    }

    pub fn dim(&self) -> usize {
        self.waves.len() * 2 + usize::from(self.odd)
    }

    pub fn encode<T: Real>(&self, p: &Point3<T>, diameter: T, out: &mut Vec<T>) {
        let q = p.coords.map(|c| c.as_f64()) / diameter.as_f64();
        let scale = 1.0 / (self.waves.len() as f64).sqrt();
        for w in &self.waves {
            let phase = w.dot(&q);
            out.push(T::lit(phase.cos() * scale));
            out.push(T::lit(phase.sin() * scale));
        }
        if self.odd {
            out.push(T::zero());
        }
    }
}

/// Deterministic pseudo-random unit-variance code for a key, used for
/// pixels the oracle knows nothing about.
pub fn hashed_descriptor<T: Real>(key: u64, dim: usize, out: &mut Vec<T>) {
    let mut state = key ^ 0x9E37_79B9_7F4A_7C15;
    let scale = 1.0 / (dim.max(1) as f64).sqrt();
    for _ in 0..dim {
        state = state.wrapping_add(0x9E37_79B9_7F4A_7C15);
        let mut z = state;
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^= z >> 31;
        let u = (z >> 11) as f64 / (1u64 << 53) as f64;
        out.push(T::lit((2.0 * u - 1.0) * 3f64.sqrt() * scale));
    }
}

/// Radial bins of the shape histogram.
const RADIAL_BINS: usize = 4;

/// Neighbours used for the local reference normal.
pub const NORMAL_NEIGHBOURS: usize = 12;

/// Support cloud with normals and per-point area weights, shared by all
/// descriptor centers of one request.
pub struct ShapeSupport<'a, T: Real> {
    pub points: &'a [Point3<T>],
    pub normals: Vec<Vector3<T>>,
    pub weights: Vec<T>,
    tree: KdTree<T>,
}

impl<'a, T: Real> ShapeSupport<'a, T> {
    /// Uniform weights; suitable for surface samples of even density.
    pub fn uniform(points: &'a [Point3<T>]) -> Self {
        let tree = KdTree::new(points);
        let normals = crate::geometry::estimate_normals_with(
            &tree,
            points,
            NORMAL_NEIGHBOURS.min(points.len()),
        );
        Self {
            points,
            normals,
            weights: vec![T::one(); points.len()],
            tree,
        }
    }

    /// Weights each camera-frame point by the surface area its pixel
    /// covers, undoing the view-dependent density of depth pixels.
    pub fn from_depth_pixels(points: &'a [Point3<T>]) -> Self {
        let mut s = Self::uniform(points);
        let floor = T::lit(0.2);
        s.weights = points
            .iter()
            .zip(&s.normals)
            .map(|(p, n)| {
                let ray = p.coords.normalize();
                let c = n.dot(&ray).abs().max(floor);
                p.z * p.z / c
            })
            .collect();
        let mean =
            s.weights.iter().fold(T::zero(), |a, w| a + *w) / T::from_count(points.len().max(1));
        if mean > T::zero() {
            s.weights.iter_mut().for_each(|w| *w /= mean);
        }
        s
    }

    /// Reference normal at an arbitrary center.
    pub fn normal_at(&self, c: &Point3<T>) -> Vector3<T> {
        let nbrs: Vec<Point3<T>> = self
            .tree
            .k_nearest(c, NORMAL_NEIGHBOURS.min(self.points.len()))
            .into_iter()
            .map(|(i, _)| self.points[i])
            .collect();
        crate::geometry::plane_normal(&nbrs).unwrap_or_else(Vector3::z)
    }

    pub fn neighbours(&self, c: &Point3<T>, radius: T) -> Vec<usize> {
        self.tree.within_radius(c, radius)
    }
}

/// Soft-assign `x` in `[0, 1]` to `n` bins with linear interpolation
/// between bin centers.
fn soft_bin(x: f64, n: usize) -> [(usize, f64); 2] {
    let pos = (x.clamp(0.0, 1.0) * n as f64 - 0.5).clamp(0.0, (n - 1) as f64);
    let lo = pos.floor() as usize;
    let hi = (lo + 1).min(n - 1);
    let f = pos - lo as f64;
    [(lo, 1.0 - f), (hi, f)]
}

/// Local shape histogram at `center` over neighbours within `radius`.
///
/// Two joint histograms with `RADIAL_BINS` radial bins each: normalized
/// distance against `|n_c . n_i|`, and normalized distance against the
/// elevation `|n_c . (p_i - c)| / |p_i - c|`. Only distances and absolute
/// angles against the reference normal enter, so the result is invariant
/// to rigid motion of the whole cloud. Contributions taper linearly to
/// zero at the radius. Output sums to one (or is all zero without
/// neighbours). `dim` must be a multiple of `2 * RADIAL_BINS`.
pub fn shape_histogram<T: Real>(
    support: &ShapeSupport<'_, T>,
    center: &Point3<T>,
    radius: T,
    dim: usize,
    out: &mut Vec<T>,
) -> Result<(), FeatureError> {
    if dim == 0 || !dim.is_multiple_of(2 * RADIAL_BINS) {
        return Err(FeatureError::InvalidConfig(format!(
            "shape histogram dimension {dim} is not a multiple of {}",
            2 * RADIAL_BINS
        )));
    }
    let angle_bins = dim / (2 * RADIAL_BINS);
    let half = RADIAL_BINS * angle_bins;
    let mut hist = vec![0.0f64; dim];
    let nc = support.normal_at(center).map(|c| c.as_f64());
    let c = center.coords.map(|v| v.as_f64());
    let r = radius.as_f64();
    for i in support.neighbours(center, radius) {
        let d = support.points[i].coords.map(|v| v.as_f64()) - c;
        let dist = d.norm();
        let rho = dist / r;
        let w = support.weights[i].as_f64() * (1.0 - rho).max(0.0);
        if w <= 0.0 {
            continue;
        }
        let align = nc.dot(&support.normals[i].map(|v| v.as_f64())).abs();
        let elev = if dist > 1e-12 * r {
            nc.dot(&d).abs() / dist
        } else {
            0.0
        };
        for (rb, rw) in soft_bin(rho, RADIAL_BINS) {
            for (ab, aw) in soft_bin(align, angle_bins) {
                hist[rb * angle_bins + ab] += w * rw * aw;
            }
            for (eb, ew) in soft_bin(elev, angle_bins) {
                hist[half + rb * angle_bins + eb] += w * rw * ew;
            }
        }
    }
    let total: f64 = hist.iter().sum();
    if total > 0.0 {
        hist.iter_mut().for_each(|h| *h /= total);
    }
    out.extend(hist.into_iter().map(T::lit));
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{poisson_disk_sample, shapes};
    use crate::types::Pose;

    fn cosine(a: &[f64], b: &[f64]) -> f64 {
        let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
        let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
        let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
        dot / (na * nb)
    }

    #[test]
    fn oracle_codes_distinct_and_unit() {
        let enc = OracleEncoder::new(64, 0).unwrap();
        let (mut a, mut b) = (Vec::new(), Vec::new());
        enc.encode(&Point3::new(0.01, 0.02, 0.0), 0.1, &mut a);
        enc.encode(&Point3::new(0.02, 0.02, 0.0), 0.1, &mut b);
        let na: f64 = a.iter().map(|x| x * x).sum::<f64>();
        assert!((na - 1.0).abs() < 1e-12);
        assert!(cosine(&a, &b) < 1.0 - 1e-6);
    }

    #[test]
    fn oracle_similarity_peaks_at_same_point() {
        let enc = OracleEncoder::new(64, 3).unwrap();
        let base = Point3::new(0.0, 0.0, 0.0);
        let mut a = Vec::new();
        enc.encode(&base, 1.0, &mut a);
        let mut prev = 1.0;
        for step in 1..5 {
            let mut b = Vec::new();
            enc.encode(&Point3::new(0.01 * step as f64, 0.0, 0.0), 1.0, &mut b);
            let c = cosine(&a, &b);
            assert!(c < prev);
            prev = c;
        }
    }

    #[test]
    fn hashed_codes_deterministic() {
        let (mut a, mut b, mut c) = (Vec::<f64>::new(), Vec::<f64>::new(), Vec::<f64>::new());
        hashed_descriptor(7, 32, &mut a);
        hashed_descriptor(7, 32, &mut b);
        hashed_descriptor(8, 32, &mut c);
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn shape_histogram_rigid_invariance() {
        let model = shapes::asymmetric_blocks::<f64>(0.1).unwrap();
        let pts = poisson_disk_sample(&model, 1500, 2).unwrap().points;
        let g = Pose::from_axis_angle(
            &Vector3::new(0.3, -1.0, 0.5).normalize(),
            1.1,
            Vector3::new(0.4, -0.2, 0.9),
        );
        let moved: Vec<Point3<f64>> = pts.iter().map(|p| g.transform_point(p)).collect();
        let s0 = ShapeSupport::uniform(&pts);
        let s1 = ShapeSupport::uniform(&moved);
        let r = model.diameter() * 0.3;
        for i in (0..pts.len()).step_by(97) {
            let (mut a, mut b) = (Vec::new(), Vec::new());
            shape_histogram(&s0, &pts[i], r, 32, &mut a).unwrap();
            shape_histogram(&s1, &moved[i], r, 32, &mut b).unwrap();
            assert!(1.0 - cosine(&a, &b) < 1e-5);
            let total: f64 = a.iter().sum();
            assert!((total - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn shape_histogram_rejects_bad_dim() {
        let pts = vec![Point3::new(0.0, 0.0, 0.0); 3];
        let s = ShapeSupport::uniform(&pts);
        assert!(shape_histogram(&s, &pts[0], 1.0, 12, &mut Vec::<f64>::new()).is_err());
    }
}
