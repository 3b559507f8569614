//! Template viewpoints on a sphere around the model and point-splat
//! visibility.

use super::normals::estimate_normals;
use super::shapes::icosphere_mesh;
use super::GeometryError;
use crate::scalar::Real;
use crate::types::{CameraIntrinsics, ObjectModel, Pose};
use nalgebra::{Matrix3, Point3, Vector3};
use rayon::prelude::*;

/// Image side of template views unless the caller chooses otherwise.
pub const DEFAULT_TEMPLATE_SIZE: usize = 128;
/// Vertical field of view of template views (radians).
pub const TEMPLATE_FOV_Y: f64 = std::f64::consts::FRAC_PI_3;
/// Template sphere radius as a multiple of the model diameter.
pub const TEMPLATE_RADIUS_FACTOR: f64 = 2.5;
/// Visibility depth tolerance as a fraction of the model diameter.
pub const VISIBILITY_DEPTH_TOLERANCE: f64 = 0.01;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Viewpoint<T: Real> {
    /// Camera-from-world.
    pub pose: Pose<T>,
    pub intrinsics: CameraIntrinsics<T>,
}

impl<T: Real> Viewpoint<T> {
    /// Camera center in world coordinates.
    pub fn center(&self) -> Point3<T> {
        Point3::from(-(self.pose.rotation.transpose() * self.pose.translation))
    }

    /// Unit vector from the world origin towards the camera.
    pub fn direction(&self) -> Vector3<T> {
        self.center().coords.normalize()
    }
}

fn tetrahedron_dirs() -> Vec<Vector3<f64>> {
    [
        (1.0, 1.0, 1.0),
        (1.0, -1.0, -1.0),
        (-1.0, 1.0, -1.0),
        (-1.0, -1.0, 1.0),
    ]
    .iter()
    .map(|&(x, y, z)| Vector3::new(x, y, z).normalize())
    .collect()
}

fn fibonacci_dirs(count: usize) -> Vec<Vector3<f64>> {
    let golden = std::f64::consts::PI * (3.0 - 5f64.sqrt());
    (0..count)
        .map(|i| {
            let z = 1.0 - 2.0 * (i as f64 + 0.5) / count as f64;
            let r = (1.0 - z * z).sqrt();
            let phi = golden * i as f64;
            Vector3::new(r * phi.cos(), r * phi.sin(), z)
        })
        .collect()
}

/// Direction set: a tetrahedron for 4, icosphere vertices when `count` is
/// `10 * 4^k + 2` (12, 42, 162, 642, ...), a Fibonacci lattice otherwise.
pub fn sphere_directions(count: usize) -> Vec<Vector3<f64>> {
    if count == 4 {
        return tetrahedron_dirs();
    }
    for level in 0..8u32 {
        if count == 10 * 4usize.pow(level) + 2 {
            return icosphere_mesh(level).0;
        }
    }
    fibonacci_dirs(count)
}

/// Camera-from-world pose at `center` looking at the origin: optical axis
/// `+z` towards the origin, image `y` down.
pub fn look_at_origin<T: Real>(center: Vector3<f64>) -> Pose<T> {
    let z = -center.normalize();
    let up = if z.z.abs() > 0.9 {
        Vector3::y()
    } else {
        Vector3::z()
    };
    let y = -(up - z * up.dot(&z)).normalize();
    let x = y.cross(&z);
    let r = Matrix3::from_rows(&[x.transpose(), y.transpose(), z.transpose()]);
    let t = -(r * center);
    Pose::from_parts(r.map(T::lit), t.map(T::lit))
}

/// `count` viewpoints on a sphere of `radius` around the origin, with
/// [`DEFAULT_TEMPLATE_SIZE`] square images and a 60° vertical FOV.
pub fn sample_template_viewpoints<T: Real>(
    count: usize,
    radius: T,
) -> Result<Vec<Viewpoint<T>>, GeometryError> {
    let k = CameraIntrinsics::from_fov(DEFAULT_TEMPLATE_SIZE, T::lit(TEMPLATE_FOV_Y))?;
    sample_template_viewpoints_with(count, radius, k)
}

pub fn sample_template_viewpoints_with<T: Real>(
    count: usize,
    radius: T,
    intrinsics: CameraIntrinsics<T>,
) -> Result<Vec<Viewpoint<T>>, GeometryError> {
    if count < 4 {
        return Err(GeometryError::InvalidArgument(format!(
            "need at least 4 viewpoints, got {count}"
        )));
    }
    if !(radius > T::zero()) {
        return Err(GeometryError::InvalidArgument(
            "radius must be positive".into(),
        ));
    }
    Ok(sphere_directions(count)
        .into_iter()
        .map(|d| Viewpoint {
            pose: look_at_origin(d * radius.as_f64()),
            intrinsics,
        })
        .collect())
}

/// Square template image size so that points with the given spacing
/// leave no holes between splats of side `splat_px`.
pub fn template_image_size(diameter: f64, point_spacing: f64, splat_px: usize) -> usize {
    let radius = TEMPLATE_RADIUS_FACTOR * diameter;
    // Pixels per meter at the sphere center distance.
    let half_extent = radius * (TEMPLATE_FOV_Y * 0.5).tan();
    let want_px_per_m = (splat_px.max(1) as f64 * 0.75) / point_spacing.max(1e-12);
    let size = (2.0 * half_extent * want_px_per_m).ceil() as usize;
    size.clamp(32, 1024)
}

/// Number of neighbours used for splat normals.
const SPLAT_NORMAL_NEIGHBOURS: usize = 12;

/// Depth buffer of splatted surfels: each point covers the
/// `splat_px x splat_px` square around its projected pixel with the depth
/// of its tangent plane along each pixel ray (constant depth when no
/// normal is given).
pub fn splat_depth<T: Real>(
    points_cam: &[Point3<T>],
    normals_cam: Option<&[Vector3<T>]>,
    k: &CameraIntrinsics<T>,
    splat_px: usize,
) -> Vec<T> {
    let inf = T::lit(f64::INFINITY);
    let mut buf = vec![inf; k.width * k.height];
    let side = splat_px.max(1) as isize;
    let lo = (side - 1) / 2;
    let hi = side - 1 - lo;
    for (i, p) in points_cam.iter().enumerate() {
        let Some(uv) = k.project(p) else { continue };
        let (u0, v0) = (
            uv.x.as_f64().round() as isize,
            uv.y.as_f64().round() as isize,
        );
        // Tangent-plane depth may not stray further than a few footprints.
        let slack = T::lit(3.0 * side as f64) * p.z / k.fx.min(k.fy);
        for dv in -lo..=hi {
            for du in -lo..=hi {
                let (u, v) = (u0 + du, v0 + dv);
                if u < 0 || v < 0 || u >= k.width as isize || v >= k.height as isize {
                    continue;
                }
                let z = match normals_cam {
                    Some(ns) => {
                        let n = ns[i];
                        let ray = Vector3::new(
                            (T::lit(u as f64) - k.cx) / k.fx,
                            (T::lit(v as f64) - k.cy) / k.fy,
                            T::one(),
                        );
                        let denom = n.dot(&ray);
                        if denom.abs() > T::lit(1e-6) * ray.norm() {
                            (n.dot(&p.coords) / denom).clamp(p.z - slack, p.z + slack)
                        } else {
                            p.z
                        }
                    }
                    None => p.z,
                };
                let cell = &mut buf[v as usize * k.width + u as usize];
                if z < *cell {
                    *cell = z;
                }
            }
        }
    }
    buf
}

/// For every point, the indices of views in which it is visible: its
/// projected depth lies within `depth_tolerance` of the splat buffer.
pub fn visibility_sets<T: Real>(
    points: &[Point3<T>],
    views: &[Viewpoint<T>],
    splat_px: usize,
    depth_tolerance: T,
) -> Vec<Vec<usize>> {
    let normals = estimate_normals(points, SPLAT_NORMAL_NEIGHBOURS.min(points.len()));
    let per_view: Vec<Vec<bool>> = views
        .par_iter()
        .map(|view| {
            let cam: Vec<Point3<T>> = points
                .iter()
                .map(|p| view.pose.transform_point(p))
                .collect();
            let ncam: Vec<Vector3<T>> = normals.iter().map(|n| view.pose.rotation * n).collect();
            let k = &view.intrinsics;
            let buf = splat_depth(&cam, Some(&ncam), k, splat_px);
            cam.iter()
                .map(|p| {
                    let Some(uv) = k.project(p) else { return false };
                    let (u, v) = (uv.x.as_f64().round(), uv.y.as_f64().round());
                    if u < 0.0 || v < 0.0 || u >= k.width as f64 || v >= k.height as f64 {
                        return false;
                    }
                    p.z <= buf[v as usize * k.width + u as usize] + depth_tolerance
                })
                .collect()
        })
        .collect();
    (0..points.len())
        .map(|i| (0..views.len()).filter(|&v| per_view[v][i]).collect())
        .collect()
}

/// Indices (ascending) of points visible in at least `min_views` views.
pub fn visibility_filter<T: Real>(
    points: &[Point3<T>],
    model: &ObjectModel<T>,
    views: &[Viewpoint<T>],
    min_views: usize,
    splat_px: usize,
) -> Result<Vec<usize>, GeometryError> {
    let tol = model.diameter() * T::lit(VISIBILITY_DEPTH_TOLERANCE);
    let sets = visibility_sets(points, views, splat_px, tol);
    let kept: Vec<usize> = sets
        .iter()
        .enumerate()
        .filter(|(_, s)| s.len() >= min_views)
        .map(|(i, _)| i)
        .collect();
    if kept.is_empty() {
        return Err(GeometryError::EmptyResult);
    }
    Ok(kept)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::poisson_disk_sample;
    use crate::geometry::shapes;

    #[test]
    fn one_sixty_two_views_on_sphere() {
        let views = sample_template_viewpoints::<f64>(162, 1.0).unwrap();
        assert_eq!(views.len(), 162);
        for v in &views {
            assert!((v.center().coords.norm() - 1.0).abs() < 1e-9);
            // The origin projects onto the optical axis.
            let o = v.pose.transform_point(&Point3::origin());
            assert!(o.x.abs() < 1e-9 && o.y.abs() < 1e-9 && o.z > 0.0);
            assert!(crate::types::validate_pose(&v.pose).is_ok());
        }
    }

    #[test]
    fn four_views_form_tetrahedron() {
        let views = sample_template_viewpoints::<f64>(4, 2.0).unwrap();
        let dirs: Vec<_> = views.iter().map(|v| v.direction()).collect();
        for i in 0..4 {
            for j in i + 1..4 {
                assert!((dirs[i].dot(&dirs[j]) + 1.0 / 3.0).abs() < 1e-9);
            }
        }
        assert!(sample_template_viewpoints::<f64>(3, 1.0).is_err());
    }

    fn sphere_setup() -> (ObjectModel<f64>, Vec<Point3<f64>>, Vec<Viewpoint<f64>>) {
        let sphere = shapes::icosphere::<f64>(0.5, 4).unwrap();
        let pts = poisson_disk_sample(&sphere, 2000, 3).unwrap().points;
        let size = template_image_size(1.0, (sphere.surface_area() / 2000.0).sqrt(), 3);
        let k = CameraIntrinsics::from_fov(size, TEMPLATE_FOV_Y).unwrap();
        let views = sample_template_viewpoints_with(162, 2.5, k).unwrap();
        (sphere, pts, views)
    }

    #[test]
    fn convex_sphere_keeps_all_points() {
        let (sphere, pts, views) = sphere_setup();
        // Ray-test oracle: on a convex body a surface point sees a camera iff
        // the camera lies above its tangent plane.
        for p in &pts {
            let n = p.coords.normalize();
            let oracle = views
                .iter()
                .filter(|v| (v.center() - p).dot(&n) > 0.0)
                .count();
            assert!(oracle >= 18);
        }
        let kept = visibility_filter(&pts, &sphere, &views, 18, 3).unwrap();
        assert_eq!(kept, (0..pts.len()).collect::<Vec<_>>());
    }

    #[test]
    fn interior_point_rejected_and_unsatisfiable_threshold() {
        let (sphere, mut pts, views) = sphere_setup();
        pts.push(Point3::new(0.05, -0.02, 0.01));
        let kept = visibility_filter(&pts, &sphere, &views, 18, 3).unwrap();
        assert!(!kept.contains(&(pts.len() - 1)));
        assert!(kept.windows(2).all(|w| w[0] < w[1]));
        assert!(matches!(
            visibility_filter(&pts, &sphere, &views, views.len() + 1, 3),
            Err(GeometryError::EmptyResult)
        ));
    }
}
