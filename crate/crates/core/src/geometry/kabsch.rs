use super::GeometryError;
use crate::scalar::Real;
use crate::types::Pose;
use nalgebra::{Matrix3, Point3, Vector3};

/// Minimum source triangle area (m²) for a well-posed triplet.
pub const MIN_TRIPLET_AREA: f64 = 1e-12;

fn centroid<T: Real>(pts: &[Point3<T>]) -> Vector3<T> {
    pts.iter().fold(Vector3::zeros(), |acc, p| acc + p.coords) / T::from_count(pts.len())
}

/// Least-squares rigid transform minimizing `Σ |R src_i + t - dst_i|²`
/// with `det(R) = +1`.
pub fn kabsch<T: Real>(src: &[Point3<T>], dst: &[Point3<T>]) -> Result<Pose<T>, GeometryError> {
    if src.len() != dst.len() || src.len() < 3 {
        return Err(GeometryError::InvalidArgument(format!(
            "need matching point sets of size >= 3 (got {} and {})",
            src.len(),
            dst.len()
        )));
    }
    let cs = centroid(src);
    let cd = centroid(dst);
    let mut h = Matrix3::zeros();
    let mut src_cov = Matrix3::zeros();
    for (s, d) in src.iter().zip(dst) {
        let a = s.coords - cs;
        let b = d.coords - cd;
        h += a * b.transpose();
        src_cov += a * a.transpose();
    }
    if src.len() == 3 {
        let area = (src[1] - src[0]).cross(&(src[2] - src[0])).norm() * T::lit(0.5);
        if !(area > T::lit(MIN_TRIPLET_AREA)) {
            return Err(GeometryError::DegenerateTriplet);
        }
    } else {
        let ev = src_cov.symmetric_eigenvalues();
        let mut ev: Vec<T> = ev.iter().copied().collect();
        ev.sort_by(|a, b| b.partial_cmp(a).unwrap_or(std::cmp::Ordering::Equal));
        if !(ev[1] > T::lit(1e-24) && ev[1] > ev[0] * T::lit(1e-12)) {
            return Err(GeometryError::DegenerateTriplet);
        }
    }
    let svd = h.svd(true, true);
    let (Some(u), Some(v_t)) = (svd.u, svd.v_t) else {
        return Err(GeometryError::DegenerateTriplet);
    };
    let v = v_t.transpose();
    let d = (v * u.transpose()).determinant();
    let mut fix = Matrix3::identity();
    if d < T::zero() {
        fix[(2, 2)] = -T::one();
    }
    let r = v * fix * u.transpose();
    let t = cd - r * cs;
    Ok(Pose::from_parts(r, t))
}

/// Sum of squared residuals of `pose` on the pairs.
pub fn alignment_residual<T: Real>(pose: &Pose<T>, src: &[Point3<T>], dst: &[Point3<T>]) -> T {
    src.iter().zip(dst).fold(T::zero(), |acc, (s, d)| {
        acc + (pose.transform_point(s) - d).norm_squared()
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn tri() -> Vec<Point3<f64>> {
        vec![
            Point3::new(0.1, 0.0, 0.0),
            Point3::new(0.0, 0.2, 0.05),
            Point3::new(-0.1, -0.05, 0.1),
        ]
    }

    #[test]
    fn identity_when_equal() {
        let p = kabsch(&tri(), &tri()).unwrap();
        assert!((p.rotation - Matrix3::identity()).amax() < 1e-12);
        assert!(p.translation.norm() < 1e-12);
    }

    #[test]
    fn exact_quarter_turn() {
        let truth = Pose::from_axis_angle(
            &Vector3::z(),
            std::f64::consts::FRAC_PI_2,
            Vector3::new(1.0, 0.0, 0.0),
        );
        let src = tri();
        let dst: Vec<_> = src.iter().map(|p| truth.transform_point(p)).collect();
        let p = kabsch(&src, &dst).unwrap();
        assert!((p.rotation - truth.rotation).amax() < 1e-9);
        assert!((p.translation - truth.translation).amax() < 1e-9);
    }

    #[test]
    fn collinear_rejected() {
        let src = vec![
            Point3::new(0.0, 0.0, 0.0),
            Point3::new(1.0, 0.0, 0.0),
            Point3::new(2.0, 0.0, 0.0),
        ];
        assert!(matches!(
            kabsch(&src, &src),
            Err(GeometryError::DegenerateTriplet)
        ));
    }

    #[test]
    fn reflection_is_never_returned() {
        // Mirrored destination: best proper rotation, not a reflection.
        let src = tri();
        let dst: Vec<_> = src.iter().map(|p| Point3::new(-p.x, p.y, p.z)).collect();
        let p = kabsch(&src, &dst).unwrap();
        assert!((p.rotation.determinant() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn left_invariance() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..50 {
            let src: Vec<Point3<f64>> = (0..3)
                .map(|_| {
                    Point3::new(
                        rng.random_range(-1.0..1.0),
                        rng.random_range(-1.0..1.0),
                        rng.random_range(-1.0..1.0),
                    )
                })
                .collect();
            let dst: Vec<Point3<f64>> = src
                .iter()
                .map(|p| {
                    p + Vector3::new(
                        rng.random_range(-0.1..0.1),
                        rng.random_range(-0.1..0.1),
                        rng.random_range(-0.1..0.1),
                    )
                })
                .collect();
            let axis = Vector3::new(
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
            );
            let g = Pose::from_axis_angle(
                &axis,
                rng.random_range(-3.0..3.0),
                Vector3::new(0.3, -2.0, 1.0),
            );
            let moved: Vec<_> = dst.iter().map(|p| g.transform_point(p)).collect();
            let a = g.compose(&kabsch(&src, &dst).unwrap());
            let b = kabsch(&src, &moved).unwrap();
            assert!((a.rotation - b.rotation).amax() < 1e-6);
            assert!((a.translation - b.translation).amax() < 1e-6);
        }
    }
}
