//! Exact nearest-neighbour search over 3D points.
//!
//! A static, implicit kd-tree: the tree is a permutation of the input
//! indices where every range `[lo, hi)` is split at its median along the
//! axis of largest spread. Ties in distance are resolved towards the
//! smaller input index so that results are reproducible.

use crate::scalar::Real;
use nalgebra::Point3;

const LEAF: usize = 8;

#[derive(Clone, Debug)]
pub struct KdTree<T: Real> {
    points: Vec<Point3<T>>,
    order: Vec<usize>,
    axes: Vec<u8>,
    /// Bounding box of every internal range, stored at the range's median
    /// slot.
    boxes: Vec<(Point3<T>, Point3<T>)>,
}

#[inline]
fn closer<T: Real>(d2: T, idx: usize, best_d2: T, best_idx: usize) -> bool {
    d2 < best_d2 || (d2 == best_d2 && idx < best_idx)
}

impl<T: Real> KdTree<T> {
    pub fn new(points: &[Point3<T>]) -> Self {
        let mut tree = Self {
            points: points.to_vec(),
            order: (0..points.len()).collect(),
            axes: vec![0; points.len()],
            boxes: vec![(Point3::origin(), Point3::origin()); points.len()],
        };
        let n = tree.order.len();
        tree.build(0, n);
        tree
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn points(&self) -> &[Point3<T>] {
        &self.points
    }

    fn build(&mut self, lo: usize, hi: usize) {
        if hi - lo <= LEAF {
            return;
        }
        let mut min = self.points[self.order[lo]];
        let mut max = min;
        for &i in &self.order[lo..hi] {
            let p = &self.points[i];
            for a in 0..3 {
                min[a] = min[a].min(p[a]);
                max[a] = max[a].max(p[a]);
            }
        }
        self.boxes[(lo + hi) / 2] = (min, max);
        let spread = max - min;
        let axis = (0..3)
            .max_by(|&a, &b| {
                spread[a]
                    .partial_cmp(&spread[b])
                    .unwrap_or(std::cmp::Ordering::Equal)
            })
            .unwrap_or(0);
        let mid = (lo + hi) / 2;
        let pts = &self.points;
        self.order[lo..hi].select_nth_unstable_by(mid - lo, |&a, &b| {
            pts[a][axis]
                .partial_cmp(&pts[b][axis])
                .unwrap_or(std::cmp::Ordering::Equal)
                .then(a.cmp(&b))
        });
        self.axes[mid] = axis as u8;
        self.build(lo, mid);
        self.build(mid + 1, hi);
    }

    /// Index and squared distance of the closest point.
    pub fn nearest(&self, q: &Point3<T>) -> Option<(usize, T)> {
        if self.points.is_empty() {
            return None;
        }
        let mut best = (usize::MAX, T::lit(f64::INFINITY));
        self.nearest_in(0, self.order.len(), q, &mut best);
        Some(best)
    }

    /// Squared distance from `q` to the bounding box of `[lo, hi)`; zero
    /// for leaves.
    fn box_dist2(&self, lo: usize, hi: usize, q: &Point3<T>) -> T {
        if hi - lo <= LEAF {
            return T::zero();
        }
        let (min, max) = &self.boxes[(lo + hi) / 2];
        let mut d2 = T::zero();
        for a in 0..3 {
            let e = (min[a] - q[a]).max(q[a] - max[a]).max(T::zero());
            d2 += e * e;
        }
        d2
    }

    fn nearest_in(&self, lo: usize, hi: usize, q: &Point3<T>, best: &mut (usize, T)) {
        if hi - lo <= LEAF {
            for &i in &self.order[lo..hi] {
                let d2 = (self.points[i] - q).norm_squared();
                if closer(d2, i, best.1, best.0) {
                    *best = (i, d2);
                }
            }
            return;
        }
        let mid = (lo + hi) / 2;
        let idx = self.order[mid];
        let p = &self.points[idx];
        let d2 = (p - q).norm_squared();
        if closer(d2, idx, best.1, best.0) {
            *best = (idx, d2);
        }
        let axis = self.axes[mid] as usize;
        let diff = q[axis] - p[axis];
        let (near, far) = if diff < T::zero() {
            ((lo, mid), (mid + 1, hi))
        } else {
            ((mid + 1, hi), (lo, mid))
        };
        if self.box_dist2(near.0, near.1, q) <= best.1 {
            self.nearest_in(near.0, near.1, q, best);
        }
        if diff * diff <= best.1 && self.box_dist2(far.0, far.1, q) <= best.1 {
            self.nearest_in(far.0, far.1, q, best);
        }
    }

    /// The `k` closest points, ascending by (distance, index).
    pub fn k_nearest(&self, q: &Point3<T>, k: usize) -> Vec<(usize, T)> {
        let mut out: Vec<(usize, T)> = Vec::with_capacity(k + 1);
        if k > 0 {
            self.knn_in(0, self.order.len(), q, k, &mut out);
        }
        out
    }

    fn knn_push(out: &mut Vec<(usize, T)>, k: usize, i: usize, d2: T) {
        if out.len() == k {
            let (li, ld) = out[k - 1];
            if !closer(d2, i, ld, li) {
                return;
            }
            out.pop();
        }
        let pos = out
            .iter()
            .position(|&(j, e)| closer(d2, i, e, j))
            .unwrap_or(out.len());
        out.insert(pos, (i, d2));
    }

    fn knn_in(&self, lo: usize, hi: usize, q: &Point3<T>, k: usize, out: &mut Vec<(usize, T)>) {
        if hi - lo <= LEAF {
            for &i in &self.order[lo..hi] {
                Self::knn_push(out, k, i, (self.points[i] - q).norm_squared());
            }
            return;
        }
        let mid = (lo + hi) / 2;
        let idx = self.order[mid];
        let p = &self.points[idx];
        Self::knn_push(out, k, idx, (p - q).norm_squared());
        let axis = self.axes[mid] as usize;
        let diff = q[axis] - p[axis];
        let (near, far) = if diff < T::zero() {
            ((lo, mid), (mid + 1, hi))
        } else {
            ((mid + 1, hi), (lo, mid))
        };
        self.knn_in(near.0, near.1, q, k, out);
        if out.len() < k
            || (diff * diff <= out[out.len() - 1].1
                && self.box_dist2(far.0, far.1, q) <= out[out.len() - 1].1)
        {
            self.knn_in(far.0, far.1, q, k, out);
        }
    }

    /// Indices of points strictly closer than `radius`, ascending.
    pub fn within_radius(&self, q: &Point3<T>, radius: T) -> Vec<usize> {
        let mut out = Vec::new();
        self.radius_in(0, self.order.len(), q, radius * radius, &mut out);
        out.sort_unstable();
        out
    }

    fn radius_in(&self, lo: usize, hi: usize, q: &Point3<T>, r2: T, out: &mut Vec<usize>) {
        if hi - lo <= LEAF {
            out.extend(
                self.order[lo..hi]
                    .iter()
                    .copied()
                    .filter(|&i| (self.points[i] - q).norm_squared() < r2),
            );
            return;
        }
        let mid = (lo + hi) / 2;
        let idx = self.order[mid];
        let p = &self.points[idx];
        if (p - q).norm_squared() < r2 {
            out.push(idx);
        }
        let axis = self.axes[mid] as usize;
        let diff = q[axis] - p[axis];
        if diff < T::zero() || diff * diff < r2 {
            self.radius_in(lo, mid, q, r2, out);
        }
        if diff >= T::zero() || diff * diff < r2 {
            self.radius_in(mid + 1, hi, q, r2, out);
        }
    }

    /// Whether any point lies strictly closer than `radius`.
    pub fn any_within(&self, q: &Point3<T>, radius: T) -> bool {
        self.nearest(q).is_some_and(|(_, d2)| d2 < radius * radius)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn brute_nn(pts: &[Point3<f64>], q: &Point3<f64>) -> (usize, f64) {
        let mut best = (usize::MAX, f64::INFINITY);
        for (i, p) in pts.iter().enumerate() {
            let d = (p - q).norm_squared();
            if d < best.1 {
                best = (i, d);
            }
        }
        best
    }

    prop_compose! {
        fn cloud()(v in prop::collection::vec((-1.0f64..1.0, -1.0f64..1.0, -1.0f64..1.0), 1..200)) -> Vec<Point3<f64>> {
            v.into_iter().map(|(x, y, z)| Point3::new(x, y, z)).collect()
        }
    }

    proptest! {
        #[test]
        fn nearest_matches_brute_force(pts in cloud(), q in (-1.5f64..1.5, -1.5f64..1.5, -1.5f64..1.5)) {
            let q = Point3::new(q.0, q.1, q.2);
            let tree = KdTree::new(&pts);
            let (i, d) = tree.nearest(&q).unwrap();
            let (bi, bd) = brute_nn(&pts, &q);
            prop_assert_eq!(d, bd);
            prop_assert_eq!(i, bi);
        }

        #[test]
        fn radius_matches_brute_force(pts in cloud(), r in 0.01f64..1.0) {
            let q = Point3::new(0.1, -0.2, 0.3);
            let tree = KdTree::new(&pts);
            let got = tree.within_radius(&q, r);
            let want: Vec<usize> = (0..pts.len()).filter(|&i| (pts[i] - q).norm_squared() < r * r).collect();
            prop_assert_eq!(got, want);
        }

        #[test]
        fn knn_matches_sorted_scan(pts in cloud(), k in 1usize..20) {
            let q = Point3::new(0.0, 0.0, 0.0);
            let tree = KdTree::new(&pts);
            let got: Vec<usize> = tree.k_nearest(&q, k).into_iter().map(|x| x.0).collect();
            let mut all: Vec<(f64, usize)> = pts.iter().enumerate().map(|(i, p)| ((p - q).norm_squared(), i)).collect();
            all.sort_by(|a, b| a.partial_cmp(b).unwrap());
            let want: Vec<usize> = all.into_iter().take(k).map(|x| x.1).collect();
            prop_assert_eq!(got, want);
        }
    }

    #[test]
    fn duplicate_points_pick_lowest_index() {
        let pts = vec![Point3::new(1.0, 1.0, 1.0); 40];
        let tree = KdTree::new(&pts);
        assert_eq!(tree.nearest(&Point3::origin()).unwrap().0, 0);
    }
}
