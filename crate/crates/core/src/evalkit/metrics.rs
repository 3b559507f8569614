use super::EvalError;
use crate::scalar::Real;
use crate::types::{CameraIntrinsics, ObjectModel, Pose};
use serde::{Deserialize, Serialize};
use std::cmp::Ordering;

/// Maximum symmetry-aware surface distance over model vertices.
pub fn mssd<T: Real>(est: &Pose<T>, gt: &Pose<T>, model: &ObjectModel<T>) -> T {
    model
        .symmetries()
        .iter()
        .map(|s| {
            let g = gt.compose(s);
            model
                .vertices()
                .iter()
                .map(|v| (est.transform_point(v) - g.transform_point(v)).norm())
                .fold(T::zero(), |a, b| a.max(b))
        })
        .fold(T::lit(f64::INFINITY), |a, b| a.min(b))
}

/// Maximum symmetry-aware reprojection distance in pixels.
pub fn mspd<T: Real>(
    est: &Pose<T>,
    gt: &Pose<T>,
    model: &ObjectModel<T>,
    k: &CameraIntrinsics<T>,
) -> Result<T, EvalError> {
    let project = |pose: &Pose<T>, v| {
        let p = pose.transform_point(v);
        if p.z > T::zero() {
            Ok(nalgebra::Vector2::new(
                k.fx * p.x / p.z + k.cx,
                k.fy * p.y / p.z + k.cy,
            ))
        } else {
            Err(EvalError::BehindCamera)
        }
    };
    let mut best = T::lit(f64::INFINITY);
    for s in model.symmetries() {
        let g = gt.compose(s);
        let mut worst = T::zero();
        for v in model.vertices() {
            worst = worst.max((project(est, v)? - project(&g, v)?).norm());
        }
        best = best.min(worst);
    }
    Ok(best)
}

/// Recall thresholds; MSSD thresholds are fractions of the diameter, MSPD
/// thresholds are pixels.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricConfig {
    pub thresholds: Vec<f64>,
}

impl MetricConfig {
    /// 0.05 to 0.50 of the diameter in steps of 0.05.
    pub fn mssd_default() -> Self {
        Self {
            thresholds: (1..=10).map(|i| i as f64 * 0.05).collect(),
        }
    }

    /// 5 to 50 px in steps of 5.
    pub fn mspd_default() -> Self {
        Self {
            thresholds: (1..=10).map(|i| i as f64 * 5.0).collect(),
        }
    }

    pub fn validate(&self) -> Result<(), EvalError> {
        if self.thresholds.is_empty()
            || self.thresholds[0] <= 0.0
            || self.thresholds.windows(2).any(|w| w[1] <= w[0])
        {
            return Err(EvalError::InvalidSpec(
                "thresholds must be positive and strictly increasing".into(),
            ));
        }
        Ok(())
    }
}

/// Mean over thresholds of the fraction of errors strictly below each.
pub fn average_recall(errors: &[f64], cfg: &MetricConfig) -> Result<f64, EvalError> {
    cfg.validate()?;
    if errors.is_empty() {
        return Ok(0.0);
    }
    let n = errors.len() as f64;
    Ok(cfg
        .thresholds
        .iter()
        .map(|&t| errors.iter().filter(|&&e| e < t).count() as f64 / n)
        .sum::<f64>()
        / cfg.thresholds.len() as f64)
}

/// Predictions and ground truths of one image for one object.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageMatches {
    pub scores: Vec<f64>,
    /// `errors[p][g]`: error of prediction `p` against ground truth `g`.
    pub errors: Vec<Vec<f64>>,
    pub n_gt: usize,
}

/// Greedy matching in descending score order: each prediction claims
/// the unclaimed ground truth with the smallest error below `threshold`.
/// Returns, per prediction in the given order, whether it matched.
fn greedy_match(img: &ImageMatches, order: &[usize], threshold: f64) -> Vec<bool> {
    let mut claimed = vec![false; img.n_gt];
    let mut tp = vec![false; img.scores.len()];
    for &p in order {
        let best = (0..img.n_gt)
            .filter(|&g| !claimed[g] && img.errors[p][g] < threshold)
            .min_by(|&a, &b| {
                img.errors[p][a]
                    .total_cmp(&img.errors[p][b])
                    .then(a.cmp(&b))
            });
        if let Some(g) = best {
            claimed[g] = true;
            tp[p] = true;
        }
    }
    tp
}

fn score_order(scores: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| {
        scores[b]
            .partial_cmp(&scores[a])
            .unwrap_or(Ordering::Equal)
            .then(a.cmp(&b))
    });
    order
}

/// Per ground truth, the error of the prediction matched to it by greedy
/// score-ordered assignment (smallest error first), or infinity when no
/// prediction is left.
pub fn matched_errors(img: &ImageMatches) -> Vec<f64> {
    let order = score_order(&img.scores);
    let mut out = vec![f64::INFINITY; img.n_gt];
    let mut claimed = vec![false; img.n_gt];
    for &p in &order {
        let best = (0..img.n_gt).filter(|&g| !claimed[g]).min_by(|&a, &b| {
            img.errors[p][a]
                .total_cmp(&img.errors[p][b])
                .then(a.cmp(&b))
        });
        if let Some(g) = best {
            claimed[g] = true;
            out[g] = img.errors[p][g];
        }
    }
    out
}

/// Precision averaged over recall levels (all-point interpolation) at each
/// threshold, then averaged over thresholds. Predictions from all images
/// are ranked together by score.
pub fn average_precision(images: &[ImageMatches], cfg: &MetricConfig) -> Result<f64, EvalError> {
    cfg.validate()?;
    let total_gt: usize = images.iter().map(|i| i.n_gt).sum();
    let n_pred: usize = images.iter().map(|i| i.scores.len()).sum();
    if total_gt == 0 || n_pred == 0 {
        return Ok(0.0);
    }
    let mut ranked: Vec<(f64, usize, usize)> = images
        .iter()
        .enumerate()
        .flat_map(|(i, img)| img.scores.iter().enumerate().map(move |(p, s)| (*s, i, p)))
        .collect();
    ranked.sort_by(|a, b| {
        b.0.partial_cmp(&a.0)
            .unwrap_or(Ordering::Equal)
            .then((a.1, a.2).cmp(&(b.1, b.2)))
    });
    let mut sum = 0.0;
    for &t in &cfg.thresholds {
        let hits: Vec<Vec<bool>> = images
            .iter()
            .map(|img| greedy_match(img, &score_order(&img.scores), t))
            .collect();
        let mut tp = 0usize;
        let mut curve = Vec::with_capacity(ranked.len());
        for (rank, &(_, i, p)) in ranked.iter().enumerate() {
            if hits[i][p] {
                tp += 1;
            }
            curve.push((hits[i][p], tp as f64 / (rank + 1) as f64));
        }
        // Interpolated precision: best precision at any later rank.
        let mut envelope = 0.0f64;
        let mut ap = 0.0;
        for &(hit, prec) in curve.iter().rev() {
            envelope = envelope.max(prec);
            if hit {
                ap += envelope;
            }
        }
        sum += ap / total_gt as f64;
    }
    Ok(sum / cfg.thresholds.len() as f64)
}
