use crate::scalar::Real;
use crate::spatial::KdTree;
use nalgebra::{Matrix3, Point3, Vector3};

/// Unoriented unit normal of the best-fit plane through `pts`
/// (eigenvector of the smallest covariance eigenvalue).
pub fn plane_normal<T: Real>(pts: &[Point3<T>]) -> Option<Vector3<T>> {
    if pts.len() < 3 {
        return None;
    }
    let c = pts.iter().fold(Vector3::zeros(), |a, p| a + p.coords) / T::from_count(pts.len());
    let mut cov = Matrix3::zeros();
    for p in pts {
        let d = p.coords - c;
        cov += d * d.transpose();
    }
    let eig = cov.symmetric_eigen();
    let (mut best, mut val) = (0, eig.eigenvalues[0]);
    for i in 1..3 {
        if eig.eigenvalues[i] < val {
            best = i;
            val = eig.eigenvalues[i];
        }
    }
    let n: Vector3<T> = eig.eigenvectors.column(best).into_owned();
    let norm = n.norm();
    if !(norm > T::zero()) {
        return None;
    }
    Some(canonical_sign(n / norm))
}

/// Flip so the largest-magnitude component is positive; normals computed
/// this way are independent of eigensolver sign choices.
fn canonical_sign<T: Real>(n: Vector3<T>) -> Vector3<T> {
    let i = n.iamax();
    if n[i] < T::zero() {
        -n
    } else {
        n
    }
}

/// PCA normals from the `k` nearest neighbours of every point. Points whose
/// neighbourhood is degenerate get `+z`.
pub fn estimate_normals<T: Real>(points: &[Point3<T>], k: usize) -> Vec<Vector3<T>> {
    let tree = KdTree::new(points);
    estimate_normals_with(&tree, points, k)
}

/// As [`estimate_normals`] for `queries` against the cloud in `tree`.
pub fn estimate_normals_with<T: Real>(
    tree: &KdTree<T>,
    queries: &[Point3<T>],
    k: usize,
) -> Vec<Vector3<T>> {
    let cloud = tree.points();
    let mut nbrs = Vec::with_capacity(k);
    queries
        .iter()
        .map(|q| {
            nbrs.clear();
            nbrs.extend(tree.k_nearest(q, k).into_iter().map(|(i, _)| cloud[i]));
            plane_normal(&nbrs).unwrap_or_else(Vector3::z)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn plane_normal_of_xy_plane() {
        let pts: Vec<Point3<f64>> = (0..5)
            .flat_map(|i| (0..5).map(move |j| Point3::new(i as f64 * 0.1, j as f64 * 0.3, 2.0)))
            .collect();
        let n = plane_normal(&pts).unwrap();
        assert!((n - Vector3::z()).norm() < 1e-12);
    }

    #[test]
    fn sphere_normals_are_radial() {
        let (v, _) = crate::geometry::shapes::icosphere_mesh(3);
        let pts: Vec<Point3<f64>> = v.iter().map(|p| Point3::from(*p)).collect();
        let ns = estimate_normals(&pts, 10);
        for (p, n) in pts.iter().zip(&ns) {
            assert!(n.dot(&p.coords).abs() > 0.99);
        }
    }
}
