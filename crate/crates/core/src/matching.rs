//! Sparse-to-dense top-k matching by cosine similarity.

use crate::scalar::Real;
use crate::types::FeatureCloud;
use rayon::prelude::*;
use std::cmp::Ordering;
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MatchError {
    #[error("descriptor dimension mismatch: target {target}, query {query}")]
    DimMismatch { target: usize, query: usize },
    #[error("k = {k} exceeds the {available} query points")]
    KTooLarge { k: usize, available: usize },
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Correspondence<T> {
    pub target_idx: usize,
    pub query_idx: usize,
    pub similarity: T,
}

/// Cosine similarity; zero when either vector vanishes.
pub fn cosine<T: Real>(a: &[T], b: &[T]) -> T {
    let (mut dot, mut na, mut nb) = (T::zero(), T::zero(), T::zero());
    for (x, y) in a.iter().zip(b) {
        dot += *x * *y;
        na += *x * *x;
        nb += *y * *y;
    }
    let denom = (na * nb).sqrt();
    if denom > T::zero() {
        dot / denom
    } else {
        T::zero()
    }
}

fn norms<T: Real>(fc: &FeatureCloud<T>) -> Vec<T> {
    (0..fc.len())
        .map(|i| {
            fc.descriptor(i)
                .iter()
                .fold(T::zero(), |a, x| a + *x * *x)
                .sqrt()
        })
        .collect()
}

/// Descending similarity, then ascending query index.
fn rank<T: Real>(a: &(usize, T), b: &(usize, T)) -> Ordering {
    b.1.partial_cmp(&a.1)
        .unwrap_or(Ordering::Equal)
        .then(a.0.cmp(&b.0))
}

/// Dot product with eight independent partial sums so the loop
/// vectorizes.
fn dot<T: Real>(a: &[T], b: &[T]) -> T {
    let mut acc = [T::zero(); 8];
    let (ca, cb) = (a.chunks_exact(8), b.chunks_exact(8));
    let tail: T = ca
        .remainder()
        .iter()
        .zip(cb.remainder())
        .fold(T::zero(), |s, (x, y)| s + *x * *y);
    for (x, y) in ca.zip(cb) {
        for i in 0..8 {
            acc[i] += x[i] * y[i];
        }
    }
    acc.iter().fold(tail, |s, v| s + *v)
}

/// The `k` most similar query points for every target point, grouped by
/// target index with similarities non-increasing inside each group.
pub fn topk_correspondences<T: Real>(
    target: &FeatureCloud<T>,
    query: &FeatureCloud<T>,
    k: usize,
) -> Result<Vec<Correspondence<T>>, MatchError> {
    if target.dim() != query.dim() {
        return Err(MatchError::DimMismatch {
            target: target.dim(),
            query: query.dim(),
        });
    }
    if k > query.len() {
        return Err(MatchError::KTooLarge {
            k,
            available: query.len(),
        });
    }
    let qn = norms(query);
    let groups: Vec<Vec<Correspondence<T>>> = (0..target.len())
        .into_par_iter()
        .map(|t| {
            let f = target.descriptor(t);
            let tn = f.iter().fold(T::zero(), |a, x| a + *x * *x).sqrt();
            let mut sims: Vec<(usize, T)> = (0..query.len())
                .map(|q| {
                    let dot = dot(f, query.descriptor(q));
                    let denom = tn * qn[q];
                    (
                        q,
                        if denom > T::zero() {
                            dot / denom
                        } else {
                            T::zero()
                        },
                    )
                })
                .collect();
            if k < sims.len() && k > 0 {
                sims.select_nth_unstable_by(k - 1, rank);
                sims.truncate(k);
            }
            sims.sort_unstable_by(rank);
            sims.truncate(k);
            sims.into_iter()
                .map(|(q, s)| Correspondence {
                    target_idx: t,
                    query_idx: q,
                    similarity: s,
                })
                .collect()
        })
        .collect();
    Ok(groups.concat())
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::Point3;
    use proptest::prelude::*;

    fn cloud(desc: Vec<f64>, dim: usize) -> FeatureCloud<f64> {
        let n = desc.len() / dim;
        FeatureCloud::new(vec![Point3::origin(); n], desc, dim).unwrap()
    }

    fn brute(t: &FeatureCloud<f64>, q: &FeatureCloud<f64>, k: usize) -> Vec<(usize, usize)> {
        let mut out = Vec::new();
        for i in 0..t.len() {
            let mut all: Vec<(usize, f64)> = (0..q.len())
                .map(|j| (j, cosine(t.descriptor(i), q.descriptor(j))))
                .collect();
            all.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
            out.extend(all.into_iter().take(k).map(|(j, _)| (i, j)));
        }
        out
    }

    #[test]
    fn self_match_has_unit_similarity() {
        let desc: Vec<f64> = (0..20 * 8)
            .map(|i| ((i * 7919) % 13) as f64 - 6.0)
            .collect();
        let c = cloud(desc, 8);
        let m = topk_correspondences(&c, &c, 1).unwrap();
        for (i, corr) in m.iter().enumerate() {
            assert_eq!(corr.target_idx, i);
            assert!((corr.similarity - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn ties_go_to_smaller_index() {
        let q = cloud(vec![1.0, 0.0, 1.0, 0.0, 1.0, 0.0], 2);
        let t = cloud(vec![1.0, 0.0], 2);
        let m = topk_correspondences(&t, &q, 2).unwrap();
        assert_eq!((m[0].query_idx, m[1].query_idx), (0, 1));
    }

    #[test]
    fn dim_mismatch() {
        let a = cloud(vec![1.0; 4], 2);
        let b = cloud(vec![1.0; 6], 3);
        assert!(matches!(
            topk_correspondences(&a, &b, 1),
            Err(MatchError::DimMismatch { .. })
        ));
    }

    proptest! {
        #[test]
        fn matches_brute_force(seed in any::<u64>(), k in 1usize..6) {
            use rand::{Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let t = cloud((0..50 * 8).map(|_| rng.random_range(-1.0..1.0)).collect(), 8);
            let q = cloud((0..50 * 8).map(|_| rng.random_range(-1.0..1.0)).collect(), 8);
            let got: Vec<(usize, usize)> = topk_correspondences(&t, &q, k).unwrap()
                .iter().map(|c| (c.target_idx, c.query_idx)).collect();
            prop_assert_eq!(got, brute(&t, &q, k));
        }

        #[test]
        fn scale_invariant(seed in any::<u64>(), s in 0.01f64..100.0) {
            use rand::{Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let t = cloud((0..10 * 4).map(|_| rng.random_range(-1.0..1.0)).collect(), 4);
            let qd: Vec<f64> = (0..30 * 4).map(|_| rng.random_range(-1.0..1.0)).collect();
            let q = cloud(qd.clone(), 4);
            let qs = cloud(qd.iter().map(|x| x * s).collect(), 4);
            let a: Vec<usize> = topk_correspondences(&t, &q, 3).unwrap().iter().map(|c| c.query_idx).collect();
            let b: Vec<usize> = topk_correspondences(&t, &qs, 3).unwrap().iter().map(|c| c.query_idx).collect();
            prop_assert_eq!(a, b);
        }
    }
}
