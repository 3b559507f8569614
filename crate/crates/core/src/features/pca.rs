use super::FeatureError;
use crate::scalar::Real;
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

/// Linear projection onto the leading principal directions.
///
/// `basis` is `d_out x d_in`; its first `rank` rows are orthonormal and
/// the remaining rows (if any) are zero.
#[derive(Clone, Debug, PartialEq)]
pub struct PcaProjection<T: Real> {
    pub mean: DVector<T>,
    pub basis: DMatrix<T>,
    pub rank: usize,
}

/// Relative eigenvalue floor below which a direction counts as empty.
const RANK_TOLERANCE: f64 = 1e-10;

impl<T: Real> PcaProjection<T> {
    pub fn d_in(&self) -> usize {
        self.mean.len()
    }

    pub fn d_out(&self) -> usize {
        self.basis.nrows()
    }

    pub fn is_rank_deficient(&self) -> bool {
        self.rank < self.d_out()
    }

    pub fn project(&self, x: &[T]) -> Result<Vec<T>, FeatureError> {
        if x.len() != self.d_in() {
            return Err(FeatureError::DimMismatch {
                expected: self.d_in(),
                got: x.len(),
            });
        }
        let centered = DVector::from_iterator(
            x.len(),
            x.iter().zip(self.mean.iter()).map(|(a, m)| *a - *m),
        );
        Ok((&self.basis * centered).iter().copied().collect())
    }

    pub fn to_serde(&self) -> PcaRecord {
        PcaRecord {
            d_in: self.d_in(),
            d_out: self.d_out(),
            rank: self.rank,
            mean: self.mean.iter().map(|v| v.as_f64()).collect(),
            basis_row_major: (0..self.d_out())
                .flat_map(|r| (0..self.d_in()).map(move |c| (r, c)))
                .map(|(r, c)| self.basis[(r, c)].as_f64())
                .collect(),
        }
    }

    pub fn from_serde(rec: &PcaRecord) -> Result<Self, FeatureError> {
        if rec.mean.len() != rec.d_in
            || rec.basis_row_major.len() != rec.d_in * rec.d_out
            || rec.rank > rec.d_out
        {
            return Err(FeatureError::InvalidConfig(
                "inconsistent PCA record".into(),
            ));
        }
        Ok(Self {
            mean: DVector::from_iterator(rec.d_in, rec.mean.iter().map(|v| T::lit(*v))),
            basis: DMatrix::from_row_iterator(
                rec.d_out,
                rec.d_in,
                rec.basis_row_major.iter().map(|v| T::lit(*v)),
            ),
            rank: rec.rank,
        })
    }
}

/// On-disk form of a [`PcaProjection`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PcaRecord {
    pub d_in: usize,
    pub d_out: usize,
    pub rank: usize,
    pub mean: Vec<f64>,
    pub basis_row_major: Vec<f64>,
}

/// Fit PCA on `features` (`m` rows of dimension `d_in`, row-major).
///
/// Rows of the basis are the top `d_out` eigenvectors of the covariance by
/// descending eigenvalue, each signed so that its first nonzero entry is
/// positive. With fewer than `d_out` nonzero eigenvalues the missing rows
/// are zero and `rank` reports the available count.
pub fn fit_pca<T: Real>(
    features: &[T],
    d_in: usize,
    d_out: usize,
) -> Result<PcaProjection<T>, FeatureError> {
    if d_in == 0 || !features.len().is_multiple_of(d_in) || features.is_empty() {
        return Err(FeatureError::InvalidConfig(format!(
            "{} values are not rows of dimension {d_in}",
            features.len()
        )));
    }
    if d_out == 0 || d_out > d_in {
        return Err(FeatureError::InvalidConfig(format!(
            "cannot project {d_in} dims onto {d_out}"
        )));
    }
    let m = features.len() / d_in;
    let x = DMatrix::from_row_slice(m, d_in, features);
    let mean: DVector<T> = x.row_mean().transpose();
    let mut centered = x;
    for mut row in centered.row_iter_mut() {
        row -= mean.transpose();
    }
    let denom = T::from_count(m.saturating_sub(1).max(1));
    let cov = (centered.transpose() * &centered) / denom;
    let eig = cov.symmetric_eigen();
    let mut order: Vec<usize> = (0..d_in).collect();
    order.sort_by(|&a, &b| {
        eig.eigenvalues[b]
            .partial_cmp(&eig.eigenvalues[a])
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    });
    let top = eig.eigenvalues[order[0]].max(T::zero());
    let floor = top * T::lit(RANK_TOLERANCE);
    let mut basis = DMatrix::zeros(d_out, d_in);
    let mut rank = 0;
    for (row, &col) in order.iter().take(d_out).enumerate() {
        let ev = eig.eigenvalues[col];
        if !(ev > floor && ev > T::zero()) {
            break;
        }
        let mut v: DVector<T> = eig.eigenvectors.column(col).into_owned();
        v /= v.norm();
        let eps = T::lit(1e-12);
        if let Some(first) = v.iter().find(|c| c.abs() > eps) {
            if *first < T::zero() {
                v = -v;
            }
        }
        basis.row_mut(row).copy_from(&v.transpose());
        rank += 1;
    }
    if rank < d_out {
        log::warn!("PCA rank {rank} < requested {d_out}; padding with zero rows");
    }
    Ok(PcaProjection { mean, basis, rank })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    #[test]
    fn x_axis_points() {
        let pts: Vec<f64> = (0..10).flat_map(|i| [i as f64, 0.0]).collect();
        let p = fit_pca(&pts, 2, 1).unwrap();
        assert_eq!(p.rank, 1);
        assert!((p.basis[(0, 0)] - 1.0).abs() < 1e-12 && p.basis[(0, 1)].abs() < 1e-12);
    }

    #[test]
    fn too_few_samples_is_rank_deficient() {
        // Three samples in 8-D span at most two directions.
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let pts: Vec<f64> = (0..3 * 8)
            .map(|_| StandardNormal.sample(&mut rng))
            .collect();
        let p = fit_pca(&pts, 8, 3).unwrap();
        assert!(p.is_rank_deficient());
        assert_eq!(p.rank, 2);
        assert!(p.basis.row(2).iter().all(|v| *v == 0.0));
    }

    #[test]
    fn rows_orthonormal_and_sign_convention() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let pts: Vec<f64> = (0..200 * 6)
            .map(|i| {
                let s: f64 = StandardNormal.sample(&mut rng);
                s * (1.0 + (i % 6) as f64)
            })
            .collect();
        let p = fit_pca(&pts, 6, 4).unwrap();
        let gram = &p.basis * p.basis.transpose();
        assert!((gram - DMatrix::identity(4, 4)).amax() < 1e-6);
        for r in 0..4 {
            let first = p
                .basis
                .row(r)
                .iter()
                .copied()
                .find(|v| v.abs() > 1e-12)
                .unwrap();
            assert!(first > 0.0);
        }
    }
}
