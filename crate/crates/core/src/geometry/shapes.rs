//! Procedural meshes used for template view placement, tests and
//! synthetic scenes.

use crate::scalar::Real;
use crate::types::{CoreError, ObjectModel, Pose};
use nalgebra::{Point3, Vector3};
use std::collections::HashMap;

/// Vertices and faces of a subdivided icosahedron on the unit sphere.
/// Level `k` has `10 * 4^k + 2` vertices.
pub fn icosphere_mesh(level: u32) -> (Vec<Vector3<f64>>, Vec<[usize; 3]>) {
    let t = (1.0 + 5f64.sqrt()) / 2.0;
    let mut verts: Vec<Vector3<f64>> = [
        (-1.0, t, 0.0),
        (1.0, t, 0.0),
        (-1.0, -t, 0.0),
        (1.0, -t, 0.0),
        (0.0, -1.0, t),
        (0.0, 1.0, t),
        (0.0, -1.0, -t),
        (0.0, 1.0, -t),
        (t, 0.0, -1.0),
        (t, 0.0, 1.0),
        (-t, 0.0, -1.0),
        (-t, 0.0, 1.0),
    ]
    .iter()
    .map(|&(x, y, z)| Vector3::new(x, y, z).normalize())
    .collect();
    let mut faces: Vec<[usize; 3]> = vec![
        [0, 11, 5],
        [0, 5, 1],
        [0, 1, 7],
        [0, 7, 10],
        [0, 10, 11],
        [1, 5, 9],
        [5, 11, 4],
        [11, 10, 2],
        [10, 7, 6],
        [7, 1, 8],
        [3, 9, 4],
        [3, 4, 2],
        [3, 2, 6],
        [3, 6, 8],
        [3, 8, 9],
        [4, 9, 5],
        [2, 4, 11],
        [6, 2, 10],
        [8, 6, 7],
        [9, 8, 1],
    ];
    for _ in 0..level {
        let mut cache: HashMap<(usize, usize), usize> = HashMap::new();
        let mut midpoint = |a: usize, b: usize, verts: &mut Vec<Vector3<f64>>| {
            let key = (a.min(b), a.max(b));
            *cache.entry(key).or_insert_with(|| {
                verts.push(((verts[a] + verts[b]) * 0.5).normalize());
                verts.len() - 1
            })
        };
        let mut next = Vec::with_capacity(faces.len() * 4);
        for &[a, b, c] in &faces {
            let ab = midpoint(a, b, &mut verts);
            let bc = midpoint(b, c, &mut verts);
            let ca = midpoint(c, a, &mut verts);
            next.extend_from_slice(&[[a, ab, ca], [b, bc, ab], [c, ca, bc], [ab, bc, ca]]);
        }
        faces = next;
    }
    (verts, faces)
}

fn to_model<T: Real>(
    verts: impl IntoIterator<Item = Vector3<f64>>,
    faces: Vec<[usize; 3]>,
    symmetries: Vec<Pose<T>>,
) -> Result<ObjectModel<T>, CoreError> {
    let verts = verts
        .into_iter()
        .map(|v| Point3::new(T::lit(v.x), T::lit(v.y), T::lit(v.z)))
        .collect();
    ObjectModel::new(verts, faces, symmetries)
}

/// Sphere approximated by an icosphere of the given subdivision level.
pub fn icosphere<T: Real>(radius: f64, level: u32) -> Result<ObjectModel<T>, CoreError> {
    let (v, f) = icosphere_mesh(level);
    to_model(v.into_iter().map(|p| p * radius), f, vec![])
}

/// Smooth star-shaped surface with no symmetry: a tapered ellipsoid
/// modulated by Gaussian bumps and dents of different sizes. The longest extent is
/// about `scale`.
pub fn lumpy_blob<T: Real>(scale: f64) -> Result<ObjectModel<T>, CoreError> {
    // (direction, amplitude, angular width)
    let bumps: [([f64; 3], f64, f64); 12] = [
        ([1.0, 0.2, 0.1], 0.45, 0.5),
        ([-0.3, 1.0, 0.4], 0.30, 0.45),
        ([-0.5, -0.6, 0.9], 0.25, 0.35),
        ([0.2, -0.4, -1.0], -0.15, 0.5),
        ([-1.0, 0.1, -0.3], 0.22, 0.3),
        ([0.6, 0.7, -0.4], 0.18, 0.25),
        ([0.3, -0.9, 0.3], -0.12, 0.3),
        ([0.7, -0.1, 0.7], 0.15, 0.22),
        ([-0.6, 0.5, -0.7], 0.2, 0.28),
        ([0.0, 0.3, 1.0], -0.1, 0.25),
        ([-0.2, -1.0, -0.5], 0.16, 0.2),
        ([0.9, -0.5, -0.2], 0.12, 0.18),
    ];
    let axes = Vector3::new(0.5, 0.38, 0.3);
    let (v, f) = icosphere_mesh(5);
    let verts: Vec<Vector3<f64>> = v
        .into_iter()
        .map(|p| {
            let r = 1.0
                + bumps
                    .iter()
                    .map(|&(dir, amp, width)| {
                        let a = p
                            .dot(&Vector3::from(dir).normalize())
                            .clamp(-1.0, 1.0)
                            .acos();
                        amp * (-(a * a) / (2.0 * width * width)).exp()
                    })
                    .sum::<f64>();
            // Egg taper along x and a skew in y break the ellipsoid's
            // mirror planes.
            let taper = 1.0 + 0.22 * p.x + 0.1 * p.y * p.z;
            p.component_mul(&axes) * r * taper
        })
        .collect();
    let extent = verts.iter().map(|v| v.norm()).fold(0.0, f64::max) * 2.0;
    to_model(verts.into_iter().map(|v| v * (scale / extent)), f, vec![])
}

/// Axis-aligned box centered at the origin, outward-facing triangles.
pub fn box_mesh(size: Vector3<f64>, center: Vector3<f64>) -> (Vec<Vector3<f64>>, Vec<[usize; 3]>) {
    let h = size * 0.5;
    let verts: Vec<Vector3<f64>> = (0..8)
        .map(|i| {
            let sx = if i & 1 == 0 { -h.x } else { h.x };
            let sy = if i & 2 == 0 { -h.y } else { h.y };
            let sz = if i & 4 == 0 { -h.z } else { h.z };
            center + Vector3::new(sx, sy, sz)
        })
        .collect();
    let faces = vec![
        [0, 2, 1],
        [1, 2, 3],
        [4, 5, 6],
        [5, 7, 6],
        [0, 1, 4],
        [1, 5, 4],
        [2, 6, 3],
        [3, 6, 7],
        [0, 4, 2],
        [2, 4, 6],
        [1, 3, 5],
        [3, 7, 5],
    ];
    (verts, faces)
}

pub fn cuboid<T: Real>(size: Vector3<f64>) -> Result<ObjectModel<T>, CoreError> {
    let (v, f) = box_mesh(size, Vector3::zeros());
    to_model(v, f, vec![])
}

pub fn unit_cube<T: Real>() -> Result<ObjectModel<T>, CoreError> {
    cuboid(Vector3::new(1.0, 1.0, 1.0))
}

type Part = (Vec<Vector3<f64>>, Vec<[usize; 3]>);

fn merge(parts: Vec<Part>) -> Part {
    let mut verts = Vec::new();
    let mut faces = Vec::new();
    for (v, f) in parts {
        let off = verts.len();
        verts.extend(v);
        faces.extend(f.into_iter().map(|[a, b, c]| [a + off, b + off, c + off]));
    }
    (verts, faces)
}

/// Union of boxes with no rotational or mirror symmetry, scaled so that
/// its longest extent is about `scale`.
pub fn asymmetric_blocks<T: Real>(scale: f64) -> Result<ObjectModel<T>, CoreError> {
    let s = scale;
    let parts = vec![
        box_mesh(
            Vector3::new(0.60, 0.36, 0.22) * s,
            Vector3::new(0.0, 0.0, 0.0),
        ),
        box_mesh(
            Vector3::new(0.18, 0.18, 0.34) * s,
            Vector3::new(0.19, 0.07, 0.28) * s,
        ),
        box_mesh(
            Vector3::new(0.14, 0.30, 0.10) * s,
            Vector3::new(-0.24, -0.25, 0.03) * s,
        ),
        box_mesh(
            Vector3::new(0.10, 0.10, 0.16) * s,
            Vector3::new(-0.17, 0.10, -0.19) * s,
        ),
    ];
    let (v, f) = merge(parts);
    to_model(v, f, vec![])
}

/// Box union that is invariant under a 180° turn about the z axis (and
/// not otherwise symmetric). The symmetry list records that turn.
pub fn twofold_blocks<T: Real>(scale: f64) -> Result<ObjectModel<T>, CoreError> {
    let s = scale;
    let parts = vec![
        box_mesh(Vector3::new(0.60, 0.30, 0.20) * s, Vector3::zeros()),
        box_mesh(
            Vector3::new(0.14, 0.14, 0.20) * s,
            Vector3::new(0.20, 0.06, 0.20) * s,
        ),
        box_mesh(
            Vector3::new(0.14, 0.14, 0.20) * s,
            Vector3::new(-0.20, -0.06, 0.20) * s,
        ),
    ];
    let (v, f) = merge(parts);
    let half_turn = Pose::from_axis_angle(&Vector3::z(), T::pi(), Vector3::zeros());
    to_model(v, f, vec![Pose::identity(), half_turn])
}

/// Single triangle, mainly for degenerate-input tests.
pub fn triangle<T: Real>(
    a: Vector3<f64>,
    b: Vector3<f64>,
    c: Vector3<f64>,
) -> Result<ObjectModel<T>, CoreError> {
    to_model(vec![a, b, c], vec![[0, 1, 2]], vec![])
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn icosphere_vertex_counts() {
        for level in 0..4 {
            let (v, f) = icosphere_mesh(level);
            assert_eq!(v.len(), 10 * 4usize.pow(level) + 2);
            assert_eq!(f.len(), 20 * 4usize.pow(level));
        }
    }

    #[test]
    fn box_faces_point_outward() {
        let (v, f) = box_mesh(Vector3::new(1.0, 2.0, 3.0), Vector3::zeros());
        for [a, b, c] in f {
            let n = (v[b] - v[a]).cross(&(v[c] - v[a]));
            let centroid = (v[a] + v[b] + v[c]) / 3.0;
            assert!(n.dot(&centroid) > 0.0);
        }
    }

    #[test]
    fn twofold_symmetry_maps_vertices_onto_vertices() {
        let m = twofold_blocks::<f64>(1.0).unwrap();
        let s = m.symmetries()[1];
        for v in m.vertices() {
            let w = s.transform_point(v);
            assert!(m.vertices().iter().any(|u| (u - w).norm() < 1e-12));
        }
    }
}
