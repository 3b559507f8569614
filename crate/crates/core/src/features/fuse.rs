use super::{FeatureError, PcaProjection};
use crate::scalar::Real;

/// Norm floor below which a descriptor half is considered degenerate.
pub const ZERO_NORM: f64 = 1e-12;

pub fn l2_normalize<T: Real>(v: &mut [T]) -> Result<(), FeatureError> {
    let n = v.iter().fold(T::zero(), |a, x| a + *x * *x).sqrt();
    if !(n >= T::lit(ZERO_NORM)) {
        return Err(FeatureError::ZeroVector);
    }
    v.iter_mut().for_each(|x| *x /= n);
    Ok(())
}

/// `[norm(PCA(f_vis)), norm(f_geo)]`; both halves have dimension
/// `f_geo.len()`.
pub fn fuse<T: Real>(
    f_vis: &[T],
    f_geo: &[T],
    pca: &PcaProjection<T>,
) -> Result<Vec<T>, FeatureError> {
    if pca.d_out() != f_geo.len() {
        return Err(FeatureError::DimMismatch {
            expected: f_geo.len(),
            got: pca.d_out(),
        });
    }
    let mut out = pca.project(f_vis)?;
    l2_normalize(&mut out)?;
    let mut geo = f_geo.to_vec();
    l2_normalize(&mut geo)?;
    out.extend(geo);
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::{DMatrix, DVector};

    fn identity_pca(d: usize) -> PcaProjection<f64> {
        PcaProjection {
            mean: DVector::zeros(d),
            basis: DMatrix::identity(d, d),
            rank: d,
        }
    }

    #[test]
    fn halves_become_unit() {
        let pca = identity_pca(64);
        let mut vis = vec![0.0; 64];
        vis[0] = 5.0;
        let mut geo = vec![0.0; 64];
        geo[0] = 3.0;
        let f = fuse(&vis, &geo, &pca).unwrap();
        assert_eq!(f.len(), 128);
        assert_eq!(f[0], 1.0);
        assert_eq!(f[64], 1.0);
        let n: f64 = f.iter().map(|x| x * x).sum::<f64>().sqrt();
        assert!((n - 2f64.sqrt()).abs() < 1e-12);
    }

    #[test]
    fn wide_visual_input() {
        let pca = PcaProjection {
            mean: DVector::zeros(1536),
            basis: DMatrix::from_fn(64, 1536, |r, c| if r == c { 1.0 } else { 0.0 }),
            rank: 64,
        };
        let vis: Vec<f64> = (0..1536).map(|i| (i as f64).sin()).collect();
        let geo: Vec<f64> = (0..64).map(|i| (i as f64 + 1.0).cos()).collect();
        assert_eq!(fuse(&vis, &geo, &pca).unwrap().len(), 128);
    }

    #[test]
    fn zero_geometric_half_rejected() {
        let pca = identity_pca(4);
        assert!(matches!(
            fuse(&[1.0, 0.0, 0.0, 0.0], &[0.0; 4], &pca),
            Err(FeatureError::ZeroVector)
        ));
        assert!(matches!(
            fuse(&[1.0, 0.0, 0.0, 0.0], &[1.0; 3], &pca),
            Err(FeatureError::DimMismatch { .. })
        ));
    }
}
