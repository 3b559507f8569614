//! ICP refinement, fine rescoring and the final score product.

use crate::geometry::kabsch;
use crate::matching::Correspondence;
use crate::registration::{score_hypothesis, Scoring};
use crate::scalar::Real;
use crate::spatial::KdTree;
use crate::types::{FeatureCloud, Pose};
use nalgebra::{Point3, Rotation3};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum RefinementError {
    #[error("no point pair lies within the ICP threshold at the initial pose")]
    NoOverlap,
    #[error("ICP needs at least 3 points on each side")]
    TooFewPoints,
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
}

/// Exponents of the final score product.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoreWeights {
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
}

impl Default for ScoreWeights {
    fn default() -> Self {
        Self {
            alpha: 1.0,
            beta: 1.0,
            gamma: 1.0,
        }
    }
}

impl ScoreWeights {
    pub fn validate(&self) -> Result<(), RefinementError> {
        for w in [self.alpha, self.beta, self.gamma] {
            if !(w.is_finite() && w >= 0.0) {
                return Err(RefinementError::InvalidConfig(format!(
                    "weight {w} must be finite and >= 0"
                )));
            }
        }
        Ok(())
    }
}

/// Which side's points look up nearest neighbours on the other side.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum IcpAssociation {
    /// Each observed target point pairs with its closest model point.
    /// Only surface that was actually seen takes part.
    #[default]
    TargetToQuery,
    /// Each model point pairs with its closest target point, including
    /// model points hidden from the camera.
    QueryToTarget,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct IcpConfig {
    pub max_iterations: usize,
    /// Association and inlier threshold, fraction of the diameter.
    pub tau_icp: f64,
    /// Stop once the residual improves by less than this fraction of the
    /// diameter.
    pub convergence_eps: f64,
    #[serde(default)]
    pub association: IcpAssociation,
    /// Drop pairs farther than `tau_icp` from the update (the objective
    /// becomes the mean of `min(d^2, tau^2)`). Off by default: every pair
    /// takes part and the threshold only enters `s_icp`.
    #[serde(default)]
    pub trim: bool,
    /// Try 2x and 4x multiples of each update and keep the best one that
    /// lowers the residual. Speeds up sliding along smooth surfaces.
    #[serde(default = "default_true")]
    pub extrapolate: bool,
}

fn default_true() -> bool {
    true
}

/// `s` times the motion `m`: the rotation angle and translation scaled.
fn scale_motion<T: Real>(m: &Pose<T>, s: T) -> Pose<T> {
    let axis = Rotation3::from_matrix_unchecked(m.rotation).scaled_axis();
    Pose::from_parts(*Rotation3::new(axis * s).matrix(), m.translation * s)
}

impl Default for IcpConfig {
    fn default() -> Self {
        Self {
            max_iterations: 50,
            tau_icp: 0.03,
            convergence_eps: 1e-5,
            association: IcpAssociation::default(),
            trim: false,
            extrapolate: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct IcpResult<T: Real> {
    pub pose: Pose<T>,
    pub s_icp: T,
    /// Residual at the initial pose followed by one entry per accepted
    /// update; non-increasing.
    pub residuals: Vec<T>,
}

/// Closest-point residual of a pose plus its associations.
struct Association<T: Real> {
    /// RMS closest-point distance over all lookup points, each capped at
    /// `tau` when trimming.
    residual: T,
    /// `(query index, target index)` pairs used by the update.
    pairs: Vec<(usize, usize)>,
    /// Pairs closer than `tau`.
    close: usize,
}

struct Matcher<'a, T: Real> {
    query: &'a [Point3<T>],
    target: &'a [Point3<T>],
    tree: KdTree<T>,
    mode: IcpAssociation,
    tau: T,
    trim: bool,
}

impl<'a, T: Real> Matcher<'a, T> {
    fn new(
        query: &'a [Point3<T>],
        target: &'a [Point3<T>],
        mode: IcpAssociation,
        tau: T,
        trim: bool,
    ) -> Self {
        let tree = match mode {
            IcpAssociation::TargetToQuery => KdTree::new(query),
            IcpAssociation::QueryToTarget => KdTree::new(target),
        };
        Self {
            query,
            target,
            tree,
            mode,
            tau,
            trim,
        }
    }

    fn associate(&self, pose: &Pose<T>) -> Association<T> {
        let (from, moved) = match self.mode {
            IcpAssociation::TargetToQuery => (self.target, pose.inverse()),
            IcpAssociation::QueryToTarget => (self.query, *pose),
        };
        let tau2 = self.tau * self.tau;
        let nn: Vec<(usize, T)> = from
            .par_iter()
            .map(|p| {
                self.tree
                    .nearest(&moved.transform_point(p))
                    .expect("cloud is non-empty")
            })
            .collect();
        let mut sum = T::zero();
        let mut pairs = Vec::with_capacity(nn.len());
        let mut close = 0;
        for (i, &(j, d2)) in nn.iter().enumerate() {
            let inside = d2 < tau2;
            close += inside as usize;
            if inside || !self.trim {
                sum += d2;
                pairs.push(match self.mode {
                    IcpAssociation::TargetToQuery => (j, i),
                    IcpAssociation::QueryToTarget => (i, j),
                });
            } else {
                sum += tau2;
            }
        }
        Association {
            residual: (sum / T::from_count(from.len())).sqrt(),
            pairs,
            close,
        }
    }
}

/// Fraction of query points within `tau` of the target at `pose`.
pub fn icp_inlier_ratio<T: Real>(
    query: &[Point3<T>],
    target: &[Point3<T>],
    pose: &Pose<T>,
    tau: T,
) -> T {
    let tree = KdTree::new(target);
    let hits = query
        .par_iter()
        .filter(|q| {
            tree.nearest(&pose.transform_point(q))
                .is_some_and(|(_, d2)| d2 < tau * tau)
        })
        .count();
    T::from_count(hits) / T::from_count(query.len())
}

/// Point-to-point ICP from `init`: closest-point association, then a
/// Kabsch update over the pairs.
///
/// The minimized objective is the mean squared closest-point distance over
/// the lookup side (capped at `tau^2` when trimming). Each update cannot
/// increase it; an update that would (through rounding) is rejected and
/// ends the loop. `s_icp` is the fraction of all query points within
/// `tau_icp * diameter` of the target at the returned pose.
pub fn icp_refine<T: Real>(
    query: &[Point3<T>],
    target: &[Point3<T>],
    init: &Pose<T>,
    cfg: &IcpConfig,
    diameter: T,
) -> Result<IcpResult<T>, RefinementError> {
    icp_refine_on_surface(query, query, target, init, cfg, diameter)
}

/// [`icp_refine`] with the model side of the association drawn from
/// `surface` instead of the query points.
///
/// A surface sampled more densely than the query lowers the
/// discretization floor of the alignment. `s_icp` is still measured on
/// `query`.
pub fn icp_refine_on_surface<T: Real>(
    query: &[Point3<T>],
    surface: &[Point3<T>],
    target: &[Point3<T>],
    init: &Pose<T>,
    cfg: &IcpConfig,
    diameter: T,
) -> Result<IcpResult<T>, RefinementError> {
    if query.len() < 3 || surface.len() < 3 || target.len() < 3 {
        return Err(RefinementError::TooFewPoints);
    }
    if !(cfg.tau_icp > 0.0) || cfg.max_iterations == 0 {
        return Err(RefinementError::InvalidConfig(
            "tau_icp and max_iterations must be positive".into(),
        ));
    }
    let tau = T::lit(cfg.tau_icp) * diameter;
    let eps = T::lit(cfg.convergence_eps) * diameter;
    let matcher = Matcher::new(surface, target, cfg.association, tau, cfg.trim);
    let mut pose = *init;
    let mut cur = matcher.associate(&pose);
    if cur.close == 0 {
        return Err(RefinementError::NoOverlap);
    }
    let mut residuals = vec![cur.residual];
    for _ in 0..cfg.max_iterations {
        if cur.pairs.len() < 3 {
            break;
        }
        let src: Vec<Point3<T>> = cur.pairs.iter().map(|&(q, _)| surface[q]).collect();
        let dst: Vec<Point3<T>> = cur.pairs.iter().map(|&(_, t)| target[t]).collect();
        let Ok(mut next) = kabsch(&src, &dst) else {
            break;
        };
        let mut assoc = matcher.associate(&next);
        if assoc.residual > cur.residual {
            break;
        }
        if cfg.extrapolate {
            // Longer steps along the same update, kept while they keep
            // lowering the residual.
            let step = pose.inverse().compose(&next);
            for s in [2.0, 4.0] {
                let cand = pose.compose(&scale_motion(&step, T::lit(s)));
                let a = matcher.associate(&cand);
                if a.residual >= assoc.residual {
                    break;
                }
                next = cand;
                assoc = a;
            }
        }
        let gain = cur.residual - assoc.residual;
        pose = next;
        cur = assoc;
        residuals.push(cur.residual);
        if gain < eps {
            break;
        }
    }
    let s_icp = match cfg.association {
        IcpAssociation::QueryToTarget if std::ptr::eq(query, surface) => {
            T::from_count(cur.close) / T::from_count(query.len())
        }
        _ => icp_inlier_ratio(query, target, &pose, tau),
    };
    Ok(IcpResult {
        pose,
        s_icp,
        residuals,
    })
}

/// Feature-aware score recomputed at the refined pose.
pub fn rescore_fine<T: Real>(
    pose: &Pose<T>,
    corrs: &[Correspondence<T>],
    target: &FeatureCloud<T>,
    query: &FeatureCloud<T>,
    tau: T,
) -> T {
    score_hypothesis(pose, corrs, target, query, tau, Scoring::FeatureAware).0
}

/// `s_coarse^alpha * s_fine^beta * s_icp^gamma` with inputs clamped to
/// `[0, 1]` and `0^0 = 1`.
pub fn final_score<T: Real>(s_coarse: T, s_fine: T, s_icp: T, w: &ScoreWeights) -> T {
    let term = |s: T, e: f64| {
        if e == 0.0 {
            T::one()
        } else {
            s.clamp(T::zero(), T::one()).powf(T::lit(e))
        }
    };
    term(s_coarse, w.alpha) * term(s_fine, w.beta) * term(s_icp, w.gamma)
}
