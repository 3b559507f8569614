//! RANSAC over top-k correspondences with triplet pruning and
//! feature-aware hypothesis scoring.

use crate::geometry::kabsch;
use crate::matching::Correspondence;
use crate::scalar::Real;
use crate::types::{FeatureCloud, Pose};
use nalgebra::Point3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::cmp::Ordering;
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum RegistrationError {
    #[error("need correspondences on at least 3 distinct target points, got {0}")]
    TooFewCorrespondences(usize),
    #[error("every sampled triplet was pruned or degenerate")]
    NoValidHypothesis,
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Scoring {
    /// Sum of inlier cosine similarities over the sparse target size.
    #[default]
    FeatureAware,
    /// Fraction of target points with an inlier.
    InlierRatio,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RansacConfig {
    pub iterations: usize,
    /// Inlier distance as a fraction of the object diameter.
    pub tau_inlier: f64,
    /// Allowed relative edge-length difference between the two sides of a
    /// triplet.
    pub edge_ratio_tol: f64,
    /// Longest allowed triplet edge as a fraction of the diameter.
    pub max_pair_distance: f64,
    pub scoring: Scoring,
    pub seed: u64,
    /// Rounds of least-squares refit of the winning hypothesis on its
    /// inlier set.
    #[serde(default = "default_refit")]
    pub refit_rounds: usize,
}

fn default_refit() -> usize {
    3
}

impl Default for RansacConfig {
    fn default() -> Self {
        Self {
            iterations: 10_000,
            tau_inlier: 0.03,
            edge_ratio_tol: 0.15,
            max_pair_distance: 1.0,
            scoring: Scoring::FeatureAware,
            seed: 0,
            refit_rounds: default_refit(),
        }
    }
}

impl RansacConfig {
    pub fn validate(&self) -> Result<(), RegistrationError> {
        if self.iterations == 0 {
            return Err(RegistrationError::InvalidConfig(
                "iterations must be positive".into(),
            ));
        }
        if !(self.tau_inlier > 0.0) {
            return Err(RegistrationError::InvalidConfig(
                "tau_inlier must be positive".into(),
            ));
        }
        if !(self.edge_ratio_tol > 0.0 && self.edge_ratio_tol < 1.0) {
            return Err(RegistrationError::InvalidConfig(
                "edge_ratio_tol must lie in (0, 1)".into(),
            ));
        }
        if !(self.max_pair_distance > 0.0) {
            return Err(RegistrationError::InvalidConfig(
                "max_pair_distance must be positive".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CoarseResult<T: Real> {
    pub pose: Pose<T>,
    /// Feature-aware score of `pose`, whatever the selection mode.
    pub s_coarse: T,
    /// Score under the configured mode that selected `pose`.
    pub selection_score: T,
    pub inlier_count: usize,
    pub iterations_valid: usize,
}

/// Keep a triplet iff every edge on both sides is at most
/// `max_pair_distance * diameter` and each target edge matches its query
/// edge to within `edge_ratio_tol` of the longer one.
pub fn prune_triplet<T: Real>(
    triplet: [&Correspondence<T>; 3],
    target_pts: &[Point3<T>],
    query_pts: &[Point3<T>],
    cfg: &RansacConfig,
    diameter: T,
) -> bool {
    let max_len = T::lit(cfg.max_pair_distance) * diameter;
    let tol = T::lit(cfg.edge_ratio_tol);
    for (a, b) in [(0, 1), (1, 2), (0, 2)] {
        let lt = (target_pts[triplet[a].target_idx] - target_pts[triplet[b].target_idx]).norm();
        let lq = (query_pts[triplet[a].query_idx] - query_pts[triplet[b].query_idx]).norm();
        if lt > max_len || lq > max_len {
            return false;
        }
        if (lt - lq).abs() > tol * lt.max(lq) {
            return false;
        }
    }
    true
}

/// Correspondences grouped by target index for fast scoring.
struct Groups {
    /// Correspondence indices sorted by (target, input order).
    order: Vec<usize>,
    /// Ranges into `order`, one per distinct target point.
    spans: Vec<(usize, usize)>,
}

impl Groups {
    fn new<T>(corrs: &[Correspondence<T>]) -> Self {
        let mut order: Vec<usize> = (0..corrs.len()).collect();
        order.sort_by_key(|&i| (corrs[i].target_idx, i));
        let mut spans = Vec::new();
        let mut start = 0;
        for i in 1..=order.len() {
            if i == order.len() || corrs[order[i]].target_idx != corrs[order[start]].target_idx {
                spans.push((start, i));
                start = i;
            }
        }
        Self { order, spans }
    }
}

/// Per target point, the best inlier (highest similarity, then earliest).
fn best_inliers<T: Real>(
    pose: &Pose<T>,
    corrs: &[Correspondence<T>],
    groups: &Groups,
    target: &[Point3<T>],
    query: &[Point3<T>],
    tau: T,
    mut visit: impl FnMut(usize),
) {
    let tau2 = tau * tau;
    for &(lo, hi) in &groups.spans {
        let mut best: Option<usize> = None;
        for &ci in &groups.order[lo..hi] {
            let c = &corrs[ci];
            let d2 =
                (pose.transform_point(&query[c.query_idx]) - target[c.target_idx]).norm_squared();
            if d2 < tau2 && best.is_none_or(|b| c.similarity > corrs[b].similarity) {
                best = Some(ci);
            }
        }
        if let Some(b) = best {
            visit(b);
        }
    }
}

fn score_with<T: Real>(
    pose: &Pose<T>,
    corrs: &[Correspondence<T>],
    groups: &Groups,
    target: &FeatureCloud<T>,
    query: &FeatureCloud<T>,
    tau: T,
) -> (T, T, usize) {
    let (mut feat, mut count) = (T::zero(), 0usize);
    best_inliers(
        pose,
        corrs,
        groups,
        target.points(),
        query.points(),
        tau,
        |ci| {
            feat += corrs[ci].similarity.max(T::zero());
            count += 1;
        },
    );
    let n = T::from_count(target.len());
    (feat / n, T::from_count(count) / n, count)
}

/// Hypothesis score: the inlier set keeps, for each target point,
/// its highest-similarity correspondence within `tau` under `pose`.
/// Feature-aware mode sums those similarities (negative ones count as
/// zero) over the sparse target size; inlier-ratio mode counts them.
/// Returns the score and the inlier correspondence indices, ascending.
pub fn score_hypothesis<T: Real>(
    pose: &Pose<T>,
    corrs: &[Correspondence<T>],
    target: &FeatureCloud<T>,
    query: &FeatureCloud<T>,
    tau: T,
    mode: Scoring,
) -> (T, Vec<usize>) {
    let groups = Groups::new(corrs);
    let mut inliers = Vec::new();
    best_inliers(
        pose,
        corrs,
        &groups,
        target.points(),
        query.points(),
        tau,
        |ci| inliers.push(ci),
    );
    inliers.sort_unstable();
    let n = T::from_count(target.len());
    let score = match mode {
        Scoring::FeatureAware => {
            inliers
                .iter()
                .fold(T::zero(), |a, &ci| a + corrs[ci].similarity.max(T::zero()))
                / n
        }
        Scoring::InlierRatio => T::from_count(inliers.len()) / n,
    };
    (score, inliers)
}

/// Maximum redraws when a sampled triplet repeats a target point.
const MAX_REDRAWS: usize = 16;

/// RNG stream of one iteration; independent of scheduling.
fn iteration_rng(seed: u64, iteration: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(iteration as u64);
    rng
}

fn sample_triplet<T>(corrs: &[Correspondence<T>], rng: &mut impl Rng) -> Option<[usize; 3]> {
    let n = corrs.len();
    let a = rng.random_range(0..n);
    let mut pick = |exclude: &[usize]| {
        (0..MAX_REDRAWS).find_map(|_| {
            let c = rng.random_range(0..n);
            exclude
                .iter()
                .all(|&e| corrs[e].target_idx != corrs[c].target_idx)
                .then_some(c)
        })
    };
    let b = pick(&[a])?;
    let c = pick(&[a, b])?;
    Some([a, b, c])
}

#[derive(Clone, Copy)]
struct Candidate<T: Real> {
    iteration: usize,
    score: T,
    pose: Pose<T>,
}

/// Higher score wins; ties go to the earlier iteration.
fn better<T: Real>(a: &Candidate<T>, b: &Candidate<T>) -> bool {
    match a.score.partial_cmp(&b.score).unwrap_or(Ordering::Equal) {
        Ordering::Greater => true,
        Ordering::Less => false,
        Ordering::Equal => a.iteration < b.iteration,
    }
}

/// Iterations per parallel work unit.
const CHUNK: usize = 256;

/// Run all `cfg.iterations` rounds and return the best hypothesis.
pub fn ransac_register<T: Real>(
    corrs: &[Correspondence<T>],
    target: &FeatureCloud<T>,
    query: &FeatureCloud<T>,
    cfg: &RansacConfig,
    diameter: T,
) -> Result<CoarseResult<T>, RegistrationError> {
    cfg.validate()?;
    let groups = Groups::new(corrs);
    if corrs.len() < 3 || groups.spans.len() < 3 {
        return Err(RegistrationError::TooFewCorrespondences(groups.spans.len()));
    }
    let tau = T::lit(cfg.tau_inlier) * diameter;
    let (tp, qp) = (target.points(), query.points());
    let chunks = cfg.iterations.div_ceil(CHUNK);
    let results: Vec<(Option<Candidate<T>>, usize)> = (0..chunks)
        .into_par_iter()
        .map(|chunk| {
            let mut best: Option<Candidate<T>> = None;
            let mut valid = 0;
            for it in chunk * CHUNK..((chunk + 1) * CHUNK).min(cfg.iterations) {
                let mut rng = iteration_rng(cfg.seed, it);
                let Some(tri) = sample_triplet(corrs, &mut rng) else {
                    continue;
                };
                let c = [&corrs[tri[0]], &corrs[tri[1]], &corrs[tri[2]]];
                if !prune_triplet(c, tp, qp, cfg, diameter) {
                    continue;
                }
                let src = [qp[c[0].query_idx], qp[c[1].query_idx], qp[c[2].query_idx]];
                let dst = [
                    tp[c[0].target_idx],
                    tp[c[1].target_idx],
                    tp[c[2].target_idx],
                ];
                let Ok(pose) = kabsch(&src, &dst) else {
                    continue;
                };
                valid += 1;
                let (feat, ratio, _) = score_with(&pose, corrs, &groups, target, query, tau);
                let score = match cfg.scoring {
                    Scoring::FeatureAware => feat,
                    Scoring::InlierRatio => ratio,
                };
                let cand = Candidate {
                    iteration: it,
                    score,
                    pose,
                };
                if best.as_ref().is_none_or(|b| better(&cand, b)) {
                    best = Some(cand);
                }
            }
            (best, valid)
        })
        .collect();
    let iterations_valid = results.iter().map(|r| r.1).sum();
    let best = results
        .into_iter()
        .filter_map(|r| r.0)
        .reduce(|a, b| if better(&b, &a) { b } else { a })
        .ok_or(RegistrationError::NoValidHypothesis)?;
    let best = refit(best, corrs, target, query, tau, cfg);
    let (s_coarse, _, inlier_count) = score_with(&best.pose, corrs, &groups, target, query, tau);
    Ok(CoarseResult {
        pose: best.pose,
        s_coarse,
        selection_score: best.score,
        inlier_count,
        iterations_valid,
    })
}

fn refit<T: Real>(
    mut best: Candidate<T>,
    corrs: &[Correspondence<T>],
    target: &FeatureCloud<T>,
    query: &FeatureCloud<T>,
    tau: T,
    cfg: &RansacConfig,
) -> Candidate<T> {
    let (tp, qp) = (target.points(), query.points());
    let (_, mut inliers) = score_hypothesis(&best.pose, corrs, target, query, tau, cfg.scoring);
    for _ in 0..cfg.refit_rounds {
        if inliers.len() < 3 {
            break;
        }
        let src: Vec<Point3<T>> = inliers.iter().map(|&i| qp[corrs[i].query_idx]).collect();
        let dst: Vec<Point3<T>> = inliers.iter().map(|&i| tp[corrs[i].target_idx]).collect();
        let Ok(pose) = kabsch(&src, &dst) else { break };
        let (score, next) = score_hypothesis(&pose, corrs, target, query, tau, cfg.scoring);
        if pose == best.pose {
            break;
        }
        best = Candidate {
            pose,
            score,
            ..best
        };
        inliers = next;
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::Vector3;

    fn corr(t: usize, q: usize, s: f64) -> Correspondence<f64> {
        Correspondence {
            target_idx: t,
            query_idx: q,
            similarity: s,
        }
    }

    fn cloud(points: Vec<Point3<f64>>) -> FeatureCloud<f64> {
        let n = points.len();
        FeatureCloud::new(points, vec![1.0; n], 1).unwrap()
    }

    #[test]
    fn feature_score_worked_example() {
        let pts = vec![
            Point3::new(0.0, 0.0, 0.0),
            Point3::new(1.0, 0.0, 0.0),
            Point3::new(0.0, 1.0, 0.0),
            Point3::new(0.0, 0.0, 1.0),
        ];
        let target = cloud(pts.clone());
        let query = cloud(pts);
        // Two inliers; the other two correspondences point far away.
        let corrs = vec![
            corr(0, 0, 0.9),
            corr(1, 1, 0.8),
            corr(2, 3, 0.99),
            corr(3, 2, 0.99),
        ];
        let (s, inl) = score_hypothesis(
            &Pose::identity(),
            &corrs,
            &target,
            &query,
            0.1,
            Scoring::FeatureAware,
        );
        assert!((s - 0.425).abs() < 1e-12);
        assert_eq!(inl, vec![0, 1]);
        let (r, _) = score_hypothesis(
            &Pose::identity(),
            &corrs,
            &target,
            &query,
            0.1,
            Scoring::InlierRatio,
        );
        assert!((r - 0.5).abs() < 1e-12);
    }

    #[test]
    fn one_inlier_per_target() {
        let target = cloud(vec![Point3::origin(), Point3::new(1.0, 0.0, 0.0)]);
        let query = cloud(vec![Point3::origin(), Point3::new(0.01, 0.0, 0.0)]);
        let corrs = vec![corr(0, 0, 0.5), corr(0, 1, 0.7)];
        let (s, inl) = score_hypothesis(
            &Pose::identity(),
            &corrs,
            &target,
            &query,
            0.1,
            Scoring::FeatureAware,
        );
        assert_eq!(inl, vec![1]);
        assert!((s - 0.35).abs() < 1e-12);
    }

    #[test]
    fn pruning_rules() {
        let tp = vec![
            Point3::new(0.0, 0.0, 0.0),
            Point3::new(1.0, 0.0, 0.0),
            Point3::new(0.0, 1.0, 0.0),
        ];
        let g = Pose::from_axis_angle(&Vector3::z(), 0.4, Vector3::new(2.0, 0.0, 0.0));
        let mut qp: Vec<Point3<f64>> = tp.iter().map(|p| g.transform_point(p)).collect();
        let cs = [corr(0, 0, 1.0), corr(1, 1, 1.0), corr(2, 2, 1.0)];
        let cfg = RansacConfig {
            max_pair_distance: 2.0,
            ..Default::default()
        };
        assert!(prune_triplet([&cs[0], &cs[1], &cs[2]], &tp, &qp, &cfg, 1.0));
        qp[2] = qp[0] + (qp[2] - qp[0]) * 2.0;
        assert!(!prune_triplet(
            [&cs[0], &cs[1], &cs[2]],
            &tp,
            &qp,
            &cfg,
            1.0
        ));
    }

    #[test]
    fn too_few() {
        let c = cloud(vec![Point3::origin(), Point3::new(1.0, 0.0, 0.0)]);
        let corrs = vec![corr(0, 0, 1.0), corr(1, 1, 1.0)];
        assert!(matches!(
            ransac_register(&corrs, &c, &c, &RansacConfig::default(), 1.0),
            Err(RegistrationError::TooFewCorrespondences(_))
        ));
    }

    #[test]
    fn recovers_rigid_motion_with_outliers() {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let qp: Vec<Point3<f64>> = (0..200)
            .map(|_| Point3::new(rng.random(), rng.random(), rng.random()) * 0.1)
            .collect();
        let g = Pose::from_axis_angle(
            &Vector3::new(1.0, 2.0, 0.5).normalize(),
            0.9,
            Vector3::new(0.1, -0.2, 0.6),
        );
        let tp: Vec<Point3<f64>> = qp[..100].iter().map(|p| g.transform_point(p)).collect();
        let mut corrs = Vec::new();
        for t in 0..100 {
            corrs.push(corr(t, t, 0.9));
            corrs.push(corr(t, rng.random_range(0..200), 0.95));
        }
        let (target, query) = (cloud(tp), cloud(qp));
        let cfg = RansacConfig {
            iterations: 2000,
            seed: 11,
            ..Default::default()
        };
        let r = ransac_register(&corrs, &target, &query, &cfg, 0.17).unwrap();
        assert!(r.pose.rotation_error(&g) < 1e-6);
        assert!(r.pose.translation_error(&g) < 1e-6);
        let again = ransac_register(&corrs, &target, &query, &cfg, 0.17).unwrap();
        assert_eq!(r, again);
    }
}
