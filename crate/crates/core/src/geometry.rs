//! Non-differentiable spatial kernels.

use crate::cloud::{sq_dist, Point};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Row indices into a source cloud of `source_size` points.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct IndexSelection {
    pub indices: Vec<usize>,
    pub source_size: usize,
}

/// Members of one ball-query patch, padded with the seed index.
#[derive(Clone, Debug, PartialEq)]
pub struct PatchGroup {
    pub seed: usize,
    pub radius: f64,
    pub members: Vec<usize>,
}

/// Greedy farthest point sampling.
///
/// Starts at `start` and repeatedly picks the unpicked point with the largest
/// squared distance to its nearest picked point; ties go to the lowest index.
pub fn farthest_point_sample(points: &[Point], k: usize, start: usize) -> Result<IndexSelection> {
    let n = points.len();
    if k == 0 || k > n {
        return Err(Error::contract(format!("fps needs 1 <= k <= {n}, got k = {k}")));
    }
    if start >= n {
        return Err(Error::contract(format!("fps start {start} out of range {n}")));
    }
    let mut picked = vec![false; n];
    let mut min_d2 = vec![f64::INFINITY; n];
    let mut indices = Vec::with_capacity(k);
    let mut current = start;
    for _ in 0..k {
        picked[current] = true;
        indices.push(current);
        let c = points[current];
        let mut best = usize::MAX;
        let mut best_d2 = f64::NEG_INFINITY;
        for (i, p) in points.iter().enumerate() {
            if picked[i] {
                continue;
            }
            let d2 = sq_dist(p, &c);
            if d2 < min_d2[i] {
                min_d2[i] = d2;
            }
            if min_d2[i] > best_d2 {
                best_d2 = min_d2[i];
                best = i;
            }
        }
        if best == usize::MAX {
            break;
        }
        current = best;
    }
    Ok(IndexSelection {
        indices,
        source_size: n,
    })
}

/// Index of the lexicographically smallest point; a start rule that does not
/// depend on point order when coordinates are unique.
pub fn lexicographic_min(points: &[Point]) -> usize {
    let mut best = 0;
    for (i, p) in points.iter().enumerate().skip(1) {
        if p.partial_cmp(&points[best]) == Some(std::cmp::Ordering::Less) {
            best = i;
        }
    }
    best
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Neighbor {
    pub index: usize,
    pub distance: f64,
    pub sq_distance: f64,
}

/// Kd-tree over a point set for exact nearest-neighbor queries.
pub struct NeighborIndex<'a> {
    points: &'a [Point],
    /// Point indices, permuted so every node owns a contiguous range.
    order: Vec<usize>,
    nodes: Vec<KdNode>,
}

#[derive(Clone, Copy)]
enum KdNode {
    Leaf { start: usize, end: usize },
    Split { axis: usize, value: f64, left: usize, right: usize },
}

const LEAF_SIZE: usize = 8;

impl<'a> NeighborIndex<'a> {
    pub fn new(points: &'a [Point]) -> Result<Self> {
        if points.is_empty() {
            return Err(Error::contract("neighbor search over an empty cloud"));
        }
        let mut index = Self {
            points,
            order: (0..points.len()).collect(),
            nodes: Vec::with_capacity(2 * points.len() / LEAF_SIZE + 1),
        };
        index.build(0, points.len());
        Ok(index)
    }

    fn build(&mut self, start: usize, end: usize) -> usize {
        let id = self.nodes.len();
        self.nodes.push(KdNode::Leaf { start, end });
        if end - start <= LEAF_SIZE {
            return id;
        }
        let pts = self.points;
        let slice = &mut self.order[start..end];
        let mut lo = [f64::INFINITY; 3];
        let mut hi = [f64::NEG_INFINITY; 3];
        for &i in slice.iter() {
            for k in 0..3 {
                lo[k] = lo[k].min(pts[i][k]);
                hi[k] = hi[k].max(pts[i][k]);
            }
        }
        let axis = (0..3).max_by(|&a, &b| (hi[a] - lo[a]).total_cmp(&(hi[b] - lo[b]))).unwrap();
        if hi[axis] == lo[axis] {
            return id;
        }
        let mid = slice.len() / 2;
        slice.select_nth_unstable_by(mid, |&a, &b| pts[a][axis].total_cmp(&pts[b][axis]));
        let value = pts[slice[mid]][axis];
        let left = self.build(start, start + mid);
        let right = self.build(start + mid, end);
        self.nodes[id] = KdNode::Split { axis, value, left, right };
        id
    }

    /// Exact nearest neighbor; on equal distances the lowest index wins.
    pub fn nearest(&self, q: &Point) -> Neighbor {
        let mut best = (f64::INFINITY, usize::MAX);
        self.search(0, q, &mut best);
        Neighbor {
            index: best.1,
            distance: best.0.sqrt(),
            sq_distance: best.0,
        }
    }

    fn search(&self, node: usize, q: &Point, best: &mut (f64, usize)) {
        match self.nodes[node] {
            KdNode::Leaf { start, end } => {
                for &i in &self.order[start..end] {
                    let d2 = sq_dist(q, &self.points[i]);
                    if d2 < best.0 || (d2 == best.0 && i < best.1) {
                        *best = (d2, i);
                    }
                }
            }
            KdNode::Split { axis, value, left, right } => {
                // left holds coordinates <= value, right holds >= value
                let diff = q[axis] - value;
                let (near, far) = if diff < 0.0 { (left, right) } else { (right, left) };
                self.search(near, q, best);
                // ties must still be visited for the lowest-index rule
                if diff * diff <= best.0 {
                    self.search(far, q, best);
                }
            }
        }
    }
}

/// For each point of `from`, its nearest point in `to`.
pub fn nearest_neighbor(from: &[Point], to: &[Point]) -> Result<Vec<Neighbor>> {
    if from.is_empty() {
        return Err(Error::contract("neighbor search from an empty cloud"));
    }
    let index = NeighborIndex::new(to)?;
    Ok(from.iter().map(|q| index.nearest(q)).collect())
}

/// Members within `radius` (inclusive) of each seed, in ascending index order,
/// capped at `max_samples` and padded with the seed index.
pub fn ball_query(
    points: &[Point],
    seeds: &IndexSelection,
    radius: f64,
    max_samples: usize,
) -> Result<Vec<PatchGroup>> {
    if !(radius > 0.0) {
        return Err(Error::contract(format!("ball radius must be positive, got {radius}")));
    }
    if max_samples == 0 {
        return Err(Error::contract("ball query needs max_samples >= 1"));
    }
    let r2 = radius * radius;
    seeds
        .indices
        .iter()
        .map(|&s| {
            let c = points
                .get(s)
                .ok_or_else(|| Error::contract(format!("seed {s} out of range")))?;
            let mut members: Vec<usize> = points
                .iter()
                .enumerate()
                .filter(|(_, p)| sq_dist(p, c) <= r2)
                .map(|(i, _)| i)
                .take(max_samples)
                .collect();
            members.resize(max_samples, s);
            Ok(PatchGroup {
                seed: s,
                radius,
                members,
            })
        })
        .collect()
}

/// Reflection through the xy-plane: `(x, y, z) -> (x, y, -z)`.
pub fn mirror_xy(points: &[Point]) -> Vec<Point> {
    points.iter().map(|p| [p[0], p[1], -p[2]]).collect()
}

/// Grid codes for `n_points` points each tiled `n_copies` times, laid out
/// interleaved (row `i * n_copies + c` is copy `c` of point `i`).
///
/// Copy `c` gets `(t_c, t_c)` where `t_c` runs evenly over `[-scale, scale]`.
pub fn grid_codes(n_points: usize, n_copies: usize, scale: f64) -> Result<Tensor> {
    if n_copies < 2 {
        return Err(Error::contract(format!("grid codes need n_copies >= 2, got {n_copies}")));
    }
    if n_points == 0 {
        return Err(Error::contract("grid codes for zero points"));
    }
    let codes: Vec<f64> = (0..n_copies)
        .map(|c| -scale + 2.0 * scale * c as f64 / (n_copies - 1) as f64)
        .collect();
    let mut data = Vec::with_capacity(n_points * n_copies * 2);
    for _ in 0..n_points {
        for &t in &codes {
            data.push(t);
            data.push(t);
        }
    }
    Tensor::new([n_points * n_copies, 2], data)
}
