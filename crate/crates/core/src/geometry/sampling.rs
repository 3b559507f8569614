//! Blue-noise surface sampling by weighted sample elimination.
//!
//! A dense uniform pre-sample (five candidates per requested point) is
//! thinned by repeatedly removing the candidate with the largest
//! accumulated neighbour weight until exactly the requested number of
//! points remains.

use super::GeometryError;
use crate::scalar::Real;
use crate::spatial::KdTree;
use crate::types::ObjectModel;
use nalgebra::Point3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::cmp::Ordering;
use std::collections::BinaryHeap;

const CANDIDATE_FACTOR: usize = 5;
const WEIGHT_ALPHA: i32 = 8;
const LIMIT_BETA: f64 = 0.65;
const LIMIT_GAMMA: f64 = 1.5;

/// Output of [`poisson_disk_sample`].
#[derive(Clone, Debug)]
pub struct SurfaceSamples<T: Real> {
    pub points: Vec<Point3<T>>,
    /// Triangle each point was drawn from.
    pub triangles: Vec<usize>,
    /// Minimum pairwise distance of `points`; no pair is closer.
    pub radius: T,
    /// Nominal spacing for the requested count on this surface.
    pub nominal_radius: T,
}

/// `count` points uniformly distributed over the surface by area.
pub fn uniform_surface_samples<T: Real>(
    model: &ObjectModel<T>,
    count: usize,
    rng: &mut impl Rng,
) -> Result<(Vec<Point3<T>>, Vec<usize>), GeometryError> {
    let mut cumulative = Vec::with_capacity(model.triangles().len());
    let mut total = 0.0f64;
    for i in 0..model.triangles().len() {
        total += model.triangle_area(i).as_f64();
        cumulative.push(total);
    }
    if !(total > 0.0) {
        return Err(GeometryError::DegenerateMesh);
    }
    let mut points = Vec::with_capacity(count);
    let mut tris = Vec::with_capacity(count);
    for _ in 0..count {
        let x = rng.random::<f64>() * total;
        let ti = cumulative
            .partition_point(|&c| c <= x)
            .min(cumulative.len() - 1);
        let [a, b, c] = model.triangle(ti);
        let r1 = rng.random::<f64>().sqrt();
        let r2 = rng.random::<f64>();
        let (wa, wb, wc) = (T::lit(1.0 - r1), T::lit(r1 * (1.0 - r2)), T::lit(r1 * r2));
        points.push(Point3::from(a.coords * wa + b.coords * wb + c.coords * wc));
        tris.push(ti);
    }
    Ok((points, tris))
}

#[derive(PartialEq)]
struct HeapEntry {
    weight: f64,
    index: usize,
    stamp: u32,
}

impl Eq for HeapEntry {}

impl Ord for HeapEntry {
    fn cmp(&self, other: &Self) -> Ordering {
        // Max weight first, then the larger index.
        self.weight
            .total_cmp(&other.weight)
            .then(self.index.cmp(&other.index))
    }
}

impl PartialOrd for HeapEntry {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

/// Minimum pairwise distance, via nearest neighbours.
pub fn min_pairwise_distance<T: Real>(points: &[Point3<T>]) -> T {
    if points.len() < 2 {
        return T::lit(f64::INFINITY);
    }
    let tree = KdTree::new(points);
    points
        .iter()
        .enumerate()
        .map(|(i, p)| {
            tree.k_nearest(p, 2)
                .into_iter()
                .filter(|&(j, _)| j != i)
                .map(|(_, d2)| d2)
                .fold(T::lit(f64::INFINITY), |a, b| a.min(b))
        })
        .fold(T::lit(f64::INFINITY), |a, b| a.min(b))
        .sqrt()
}

/// Blue-noise sample of exactly `target_count` surface points,
/// deterministic for a given `seed`.
pub fn poisson_disk_sample<T: Real>(
    model: &ObjectModel<T>,
    target_count: usize,
    seed: u64,
) -> Result<SurfaceSamples<T>, GeometryError> {
    if target_count == 0 {
        return Err(GeometryError::InvalidArgument(
            "target_count must be positive".into(),
        ));
    }
    let area = model.surface_area().as_f64();
    if !(area > 0.0) {
        return Err(GeometryError::DegenerateMesh);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n_cand = target_count * CANDIDATE_FACTOR;
    let (cands, tris) = uniform_surface_samples(model, n_cand, &mut rng)?;

    let r_max = (area / (2.0 * 3f64.sqrt() * target_count as f64)).sqrt();
    let r_min =
        r_max * LIMIT_BETA * (1.0 - (target_count as f64 / n_cand as f64).powf(LIMIT_GAMMA));
    let reach = 2.0 * r_max;
    let weight = |d: f64| (1.0 - d.max(2.0 * r_min) / reach).powi(WEIGHT_ALPHA);

    let tree = KdTree::new(&cands);
    let neighbours: Vec<Vec<(usize, f64)>> = cands
        .iter()
        .enumerate()
        .map(|(i, p)| {
            tree.within_radius(p, T::lit(reach))
                .into_iter()
                .filter(|&j| j != i)
                .map(|j| (j, weight((cands[j] - p).norm().as_f64())))
                .collect()
        })
        .collect();

    let mut weights: Vec<f64> = neighbours
        .iter()
        .map(|ns| ns.iter().map(|&(_, w)| w).sum())
        .collect();
    let mut stamps = vec![0u32; n_cand];
    let mut alive = vec![true; n_cand];
    let mut heap: BinaryHeap<HeapEntry> = weights
        .iter()
        .enumerate()
        .map(|(index, &weight)| HeapEntry {
            weight,
            index,
            stamp: 0,
        })
        .collect();

    let mut remaining = n_cand;
    while remaining > target_count {
        let Some(top) = heap.pop() else { break };
        if !alive[top.index] || stamps[top.index] != top.stamp {
            continue;
        }
        alive[top.index] = false;
        remaining -= 1;
        for &(j, w) in &neighbours[top.index] {
            if alive[j] {
                weights[j] -= w;
                stamps[j] += 1;
                heap.push(HeapEntry {
                    weight: weights[j],
                    index: j,
                    stamp: stamps[j],
                });
            }
        }
    }

    let (points, triangles): (Vec<_>, Vec<_>) = cands
        .into_iter()
        .zip(tris)
        .zip(alive)
        .filter(|(_, a)| *a)
        .map(|(pt, _)| pt)
        .unzip();
    let radius = min_pairwise_distance(&points);
    Ok(SurfaceSamples {
        points,
        triangles,
        radius,
        nominal_radius: T::lit(r_max),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::shapes;
    use nalgebra::Vector3;

    fn brute_min_distance(pts: &[Point3<f64>]) -> f64 {
        let mut m = f64::INFINITY;
        for i in 0..pts.len() {
            for j in i + 1..pts.len() {
                m = m.min((pts[i] - pts[j]).norm());
            }
        }
        m
    }

    #[test]
    fn unit_cube_spacing() {
        let cube = shapes::unit_cube::<f64>().unwrap();
        let s = poisson_disk_sample(&cube, 5000, 7).unwrap();
        assert!((4500..=5500).contains(&s.points.len()));
        let brute = brute_min_distance(&s.points);
        assert_eq!(brute, s.radius);
        let bound = 0.25 * (6.0f64 / 5000.0).sqrt();
        assert!(brute > bound, "min distance {brute} <= {bound}");
        for p in &s.points {
            assert!(p.coords.amax() <= 0.5 + 1e-12);
            let on_face = p.coords.iter().any(|c| (c.abs() - 0.5).abs() < 1e-12);
            assert!(on_face);
        }
    }

    #[test]
    fn single_triangle_single_point() {
        let tri = shapes::triangle::<f64>(Vector3::zeros(), Vector3::x(), Vector3::y()).unwrap();
        let s = poisson_disk_sample(&tri, 1, 0).unwrap();
        assert_eq!(s.points.len(), 1);
        let p = s.points[0];
        assert!(p.x >= 0.0 && p.y >= 0.0 && p.x + p.y <= 1.0 + 1e-12 && p.z == 0.0);
    }

    #[test]
    fn sphere_seeds_differ_and_keep_spacing() {
        let sphere = shapes::icosphere::<f64>(1.0, 4).unwrap();
        let area = sphere.surface_area();
        let a = poisson_disk_sample(&sphere, 5000, 1).unwrap();
        let b = poisson_disk_sample(&sphere, 5000, 2).unwrap();
        assert_ne!(a.points, b.points);
        let bound = 0.25 * (area / 5000.0).sqrt();
        for s in [&a, &b] {
            assert_eq!(s.points.len(), 5000);
            assert!(brute_min_distance(&s.points) > bound);
        }
        let again = poisson_disk_sample(&sphere, 5000, 1).unwrap();
        assert_eq!(again.points, a.points);
    }

    #[test]
    fn degenerate_mesh_rejected() {
        let flat =
            shapes::triangle::<f64>(Vector3::zeros(), Vector3::x(), Vector3::x() * 2.0).unwrap();
        assert!(matches!(
            poisson_disk_sample(&flat, 10, 0),
            Err(GeometryError::DegenerateMesh)
        ));
    }
}
