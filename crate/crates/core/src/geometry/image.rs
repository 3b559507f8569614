use super::GeometryError;
use crate::scalar::Real;
use crate::types::{CameraIntrinsics, CandidateMask, DepthImage, Pixel};
use nalgebra::Point3;

/// Result of lifting pixels to 3D.
#[derive(Clone, Debug, PartialEq)]
pub struct Backprojection<T: Real> {
    pub points: Vec<Point3<T>>,
    /// Input positions of the emitted points.
    pub kept: Vec<usize>,
    /// Input positions whose depth was 0.
    pub dropped: Vec<usize>,
}

/// Lift pixels with valid depth to camera-frame points. Zero-depth pixels
/// are dropped, never interpolated.
pub fn backproject<T: Real>(
    depth: &DepthImage<T>,
    k: &CameraIntrinsics<T>,
    pixels: &[Pixel],
) -> Result<Backprojection<T>, GeometryError> {
    let mut out = Backprojection {
        points: Vec::with_capacity(pixels.len()),
        kept: Vec::with_capacity(pixels.len()),
        dropped: Vec::new(),
    };
    for (i, px) in pixels.iter().enumerate() {
        if px.u >= depth.width() || px.v >= depth.height() {
            return Err(GeometryError::OutOfBounds { u: px.u, v: px.v });
        }
        let d = depth.get(px.u, px.v);
        if d > T::zero() {
            out.points
                .push(k.backproject(T::from_count(px.u), T::from_count(px.v), d));
            out.kept.push(i);
        } else {
            out.dropped.push(i);
        }
    }
    Ok(out)
}

/// Inclusive pixel bounding box `(u_min, v_min, u_max, v_max)`.
pub fn mask_bounds(mask: &CandidateMask) -> Option<(usize, usize, usize, usize)> {
    mask.pixels().fold(None, |acc, p| {
        Some(match acc {
            None => (p.u, p.v, p.u, p.v),
            Some((a, b, c, d)) => (a.min(p.u), b.min(p.v), c.max(p.u), d.max(p.v)),
        })
    })
}

/// Centers of a `grid x grid` lattice of patches over the smallest square
/// enclosing the mask, keeping those whose pixel lies inside the mask.
/// Row-major lattice order, duplicates removed.
pub fn grid_patch_centers(mask: &CandidateMask, grid: usize) -> Result<Vec<Pixel>, GeometryError> {
    if grid == 0 {
        return Err(GeometryError::InvalidArgument(
            "grid must be positive".into(),
        ));
    }
    let (u0, v0, u1, v1) = mask_bounds(mask).ok_or(GeometryError::EmptyMask)?;
    let (w, h) = ((u1 - u0 + 1) as f64, (v1 - v0 + 1) as f64);
    let side = w.max(h);
    let origin_u = u0 as f64 + (w - side) * 0.5;
    let origin_v = v0 as f64 + (h - side) * 0.5;
    let step = side / grid as f64;
    let mut out: Vec<Pixel> = Vec::with_capacity(grid * grid);
    let mut seen = std::collections::HashSet::new();
    for j in 0..grid {
        for i in 0..grid {
            let u = (origin_u + (i as f64 + 0.5) * step).floor();
            let v = (origin_v + (j as f64 + 0.5) * step).floor();
            if u < 0.0 || v < 0.0 {
                continue;
            }
            let px = Pixel::new(u as usize, v as usize);
            if mask.contains(px.u, px.v) && seen.insert(px) {
                out.push(px);
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn camera() -> CameraIntrinsics<f64> {
        CameraIntrinsics::new(500.0, 480.0, 320.0, 240.0, 640, 480).unwrap()
    }

    fn rect_mask(w: usize, h: usize, u0: usize, v0: usize, u1: usize, v1: usize) -> CandidateMask {
        let mut bits = vec![false; w * h];
        for v in v0..=v1 {
            for u in u0..=u1 {
                bits[v * w + u] = true;
            }
        }
        CandidateMask::new(w, h, bits, 1.0, "s", "o").unwrap()
    }

    #[test]
    fn principal_point_and_unit_tangent() {
        let k = camera();
        let mut vals = vec![0.0; 640 * 480];
        vals[240 * 640 + 320] = 2.0;
        // (cx + fx, cy) falls outside a 640-wide image; use a wider one.
        let wide = CameraIntrinsics::new(500.0, 480.0, 320.0, 240.0, 1000, 480).unwrap();
        let mut wide_vals = vec![0.0; 1000 * 480];
        wide_vals[240 * 1000 + 820] = 1.0;
        let d = DepthImage::new(640, 480, vals).unwrap();
        let bp = backproject(&d, &k, &[Pixel::new(320, 240), Pixel::new(0, 0)]).unwrap();
        assert_eq!(bp.points, vec![Point3::new(0.0, 0.0, 2.0)]);
        assert_eq!(bp.dropped, vec![1]);
        assert_eq!(bp.kept, vec![0]);

        let dw = DepthImage::new(1000, 480, wide_vals).unwrap();
        let bp = backproject(&dw, &wide, &[Pixel::new(820, 240)]).unwrap();
        assert_eq!(bp.points, vec![Point3::new(1.0, 0.0, 1.0)]);
    }

    #[test]
    fn out_of_bounds_rejected() {
        let d = DepthImage::new(4, 4, vec![1.0; 16]).unwrap();
        let k = CameraIntrinsics::new(1.0, 1.0, 2.0, 2.0, 4, 4).unwrap();
        assert!(matches!(
            backproject(&d, &k, &[Pixel::new(4, 0)]),
            Err(GeometryError::OutOfBounds { .. })
        ));
    }

    proptest! {
        #[test]
        fn project_then_backproject_is_identity(u in 0usize..640, v in 0usize..480, d in 0.1f64..5.0) {
            let k = camera();
            let p = k.backproject(u as f64, v as f64, d);
            let uv = k.project(&p).unwrap();
            let q = k.backproject(uv.x, uv.y, p.z);
            prop_assert!((p - q).norm() < 1e-9);
            prop_assert!((uv.x - u as f64).abs() < 1e-9 && (uv.y - v as f64).abs() < 1e-9);
        }
    }

    #[test]
    fn full_square_gives_256_centers() {
        let m = rect_mask(100, 100, 10, 20, 57, 67);
        let c = grid_patch_centers(&m, 16).unwrap();
        assert_eq!(c.len(), 256);
    }

    #[test]
    fn left_half_mask() {
        // 24 wide, 48 tall: the enclosing square is 48x48 and the mask
        // occupies its middle half.
        let m = rect_mask(100, 100, 30, 10, 53, 57);
        let c = grid_patch_centers(&m, 16).unwrap();
        assert!(c.len() <= 128 && !c.is_empty());
        assert!(c.iter().all(|p| m.contains(p.u, p.v)));
        // Truly left half of its square: mask [10, 33] x [10, 57].
        let m = rect_mask(100, 100, 10, 10, 33, 57);
        let c = grid_patch_centers(&m, 16).unwrap();
        let brute = c.iter().filter(|p| m.contains(p.u, p.v)).count();
        assert_eq!(brute, c.len());
        assert!(c.len() <= 128);
    }

    #[test]
    fn single_pixel_mask() {
        let m = rect_mask(10, 10, 3, 7, 3, 7);
        assert_eq!(grid_patch_centers(&m, 16).unwrap(), vec![Pixel::new(3, 7)]);
        let empty = CandidateMask::new(2, 2, vec![false; 4], 0.5, "s", "o").unwrap();
        assert!(matches!(
            grid_patch_centers(&empty, 16),
            Err(GeometryError::EmptyMask)
        ));
    }

    proptest! {
        #[test]
        fn centers_subset_of_mask(bits in prop::collection::vec(any::<bool>(), 64)) {
            prop_assume!(bits.iter().any(|b| *b));
            let m = CandidateMask::new(8, 8, bits, 0.5, "s", "o").unwrap();
            let c = grid_patch_centers(&m, 16).unwrap();
            prop_assert!(c.len() <= 256);
            prop_assert!(c.iter().all(|p| m.contains(p.u, p.v)));
        }
    }
}
