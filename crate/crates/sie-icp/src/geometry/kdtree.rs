//! Exact nearest-neighbor index over a point cloud.
//!
//! A median-split kd-tree stored as an implicit tree over an index
//! permutation. Queries are exact; ties are broken toward the smaller
//! point index so results match a linear scan bit-for-bit.

use super::{Point3, PointCloud};
use crate::error::{Error, Result};

/// Read-only nearest-neighbor index; safe for concurrent queries.
#[derive(Debug, Clone)]
pub struct NnIndex {
    points: Vec<Point3>,
    // Permutation of 0..n arranged so the median of every subrange is the
    // splitting node for that subtree.
    order: Vec<u32>,
}

/// Builds an exact Euclidean nearest-neighbor index for the target cloud.
pub fn build_nn_index(target: &PointCloud) -> Result<NnIndex> {
    if target.is_empty() {
        return Err(Error::EmptyCloud);
    }
    let points = target.points().to_vec();
    let mut order: Vec<u32> = (0..points.len() as u32).collect();
    build_range(&points, &mut order, 0);
    Ok(NnIndex { points, order })
}

fn build_range(points: &[Point3], order: &mut [u32], depth: usize) {
    if order.len() <= 1 {
        return;
    }
    let axis = depth % 3;
    let mid = order.len() / 2;
    order.select_nth_unstable_by(mid, |&a, &b| {
        points[a as usize][axis]
            .partial_cmp(&points[b as usize][axis])
            .expect("finite coordinates")
    });
    let (left, rest) = order.split_at_mut(mid);
    build_range(points, left, depth + 1);
    build_range(points, &mut rest[1..], depth + 1);
}

impl NnIndex {
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Returns `(point index, Euclidean distance)` of the exact nearest
    /// neighbor of `query`.
    pub fn nearest(&self, query: &Point3) -> (usize, f64) {
        let mut best = Candidate { index: u32::MAX, dist_sq: f64::INFINITY };
        self.search(&self.order, 0, query, &mut best);
        (best.index as usize, best.dist_sq.sqrt())
    }

    fn search(&self, order: &[u32], depth: usize, query: &Point3, best: &mut Candidate) {
        if order.is_empty() {
            return;
        }
        let mid = order.len() / 2;
        let node_idx = order[mid];
        let node = &self.points[node_idx as usize];
        best.offer(node_idx, (query - node).norm_squared());

        let axis = depth % 3;
        let diff = query[axis] - node[axis];
        let (near, far) = if diff <= 0.0 {
            (&order[..mid], &order[mid + 1..])
        } else {
            (&order[mid + 1..], &order[..mid])
        };
        self.search(near, depth + 1, query, best);
        // Visit the far side whenever it could hold an equal-or-closer point;
        // ties must be found so index tie-breaking stays exact.
        if diff * diff <= best.dist_sq {
            self.search(far, depth + 1, query, best);
        }
    }
}

struct Candidate {
    index: u32,
    dist_sq: f64,
}

impl Candidate {
    fn offer(&mut self, index: u32, dist_sq: f64) {
        if dist_sq < self.dist_sq || (dist_sq == self.dist_sq && index < self.index) {
            self.index = index;
            self.dist_sq = dist_sq;
        }
    }
}

/// Exhaustive scan with the same tie-breaking rule as the kd-tree.
/// Kept public for use as an independent oracle in tests.
pub(crate) fn nearest_linear(points: &[Point3], query: &Point3) -> (usize, f64) {
    let mut best = Candidate { index: u32::MAX, dist_sq: f64::INFINITY };
    for (i, p) in points.iter().enumerate() {
        best.offer(i as u32, (query - p).norm_squared());
    }
    (best.index as usize, best.dist_sq.sqrt())
}
