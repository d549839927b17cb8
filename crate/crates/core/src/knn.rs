//! Exact k-nearest-neighbor search over 3D points.
//!
//! Results are ordered by `(squared distance, index)`, so equidistant points are
//! resolved toward the smaller index and every query has a unique answer.

use std::cmp::Ordering;
use std::collections::BinaryHeap;

use crate::{Error, Result};

const LEAF_SIZE: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Neighbor {
    pub index: usize,
    pub dist2: f64,
}

impl Eq for Neighbor {}

impl Ord for Neighbor {
    fn cmp(&self, other: &Self) -> Ordering {
        self.dist2.total_cmp(&other.dist2).then(self.index.cmp(&other.index))
    }
}

impl PartialOrd for Neighbor {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

#[derive(Debug, Clone)]
enum Node {
    Leaf { start: usize, end: usize },
    Split { axis: usize, value: f64, left: usize, right: usize },
}

/// A static kd-tree over a borrowed point set.
#[derive(Debug, Clone)]
pub struct KdTree<'a> {
    points: &'a [[f64; 3]],
    order: Vec<usize>,
    nodes: Vec<Node>,
}

impl<'a> KdTree<'a> {
    pub fn build(points: &'a [[f64; 3]]) -> Self {
        let mut tree = KdTree { points, order: (0..points.len()).collect(), nodes: Vec::new() };
        if !points.is_empty() {
            tree.build_node(0, points.len());
        }
        tree
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    fn build_node(&mut self, start: usize, end: usize) -> usize {
        let id = self.nodes.len();
        if end - start <= LEAF_SIZE {
            self.nodes.push(Node::Leaf { start, end });
            return id;
        }
        // split along the axis of largest spread
        let mut lo = [f64::INFINITY; 3];
        let mut hi = [f64::NEG_INFINITY; 3];
        for &i in &self.order[start..end] {
            for a in 0..3 {
                lo[a] = lo[a].min(self.points[i][a]);
                hi[a] = hi[a].max(self.points[i][a]);
            }
        }
        let axis = (0..3).max_by(|&a, &b| (hi[a] - lo[a]).total_cmp(&(hi[b] - lo[b]))).unwrap();
        let mid = (start + end) / 2;
        let points = self.points;
        self.order[start..end].select_nth_unstable_by(mid - start, |&a, &b| {
            points[a][axis].total_cmp(&points[b][axis]).then(a.cmp(&b))
        });
        let value = points[self.order[mid]][axis];
        self.nodes.push(Node::Leaf { start: 0, end: 0 });
        let left = self.build_node(start, mid);
        let right = self.build_node(mid, end);
        self.nodes[id] = Node::Split { axis, value, left, right };
        id
    }

    /// The `k` nearest points to `query`, skipping `exclude` when given.
    pub fn nearest(&self, query: [f64; 3], k: usize, exclude: Option<usize>) -> Vec<Neighbor> {
        let mut heap = BinaryHeap::with_capacity(k + 1);
        if k > 0 && !self.nodes.is_empty() {
            self.search(0, &query, k, exclude, &mut heap);
        }
        heap.into_sorted_vec()
    }

    fn search(
        &self,
        node: usize,
        q: &[f64; 3],
        k: usize,
        exclude: Option<usize>,
        heap: &mut BinaryHeap<Neighbor>,
    ) {
        match self.nodes[node] {
            Node::Leaf { start, end } => {
                for &i in &self.order[start..end] {
                    if Some(i) == exclude {
                        continue;
                    }
                    let cand = Neighbor { index: i, dist2: dist2(&self.points[i], q) };
                    if heap.len() < k {
                        heap.push(cand);
                    } else if cand < *heap.peek().unwrap() {
                        heap.pop();
                        heap.push(cand);
                    }
                }
            }
            Node::Split { axis, value, left, right } => {
                let diff = q[axis] - value;
                let (near, far) = if diff < 0.0 { (left, right) } else { (right, left) };
                self.search(near, q, k, exclude, heap);
                // `<=` keeps equidistant candidates reachable for the index tiebreak
                if heap.len() < k || diff * diff <= heap.peek().unwrap().dist2 {
                    self.search(far, q, k, exclude, heap);
                }
            }
        }
    }
}

#[inline]
pub fn dist2(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    let d = [a[0] - b[0], a[1] - b[1], a[2] - b[2]];
    d[0] * d[0] + d[1] * d[1] + d[2] * d[2]
}

/// k nearest neighbors of every listed point among `points`, excluding itself.
pub fn knn_of_points(points: &[[f64; 3]], queries: &[usize], k: usize) -> Result<Vec<Vec<Neighbor>>> {
    if k >= points.len() {
        return Err(Error::NotEnoughPoints { k, points: points.len() });
    }
    let tree = KdTree::build(points);
    Ok(queries.iter().map(|&q| tree.nearest(points[q], k, Some(q))).collect())
}

/// Mean Euclidean distance from each point to its `k` nearest other points.
/// Falls back to fewer neighbors when the set is small; a lone point gets `None`.
pub fn mean_neighbor_distance(points: &[[f64; 3]], k: usize) -> Vec<Option<f64>> {
    let k = k.min(points.len().saturating_sub(1));
    if k == 0 {
        return vec![None; points.len()];
    }
    let tree = KdTree::build(points);
    (0..points.len())
        .map(|i| {
            let nn = tree.nearest(points[i], k, Some(i));
            Some(nn.iter().map(|n| n.dist2.sqrt()).sum::<f64>() / nn.len() as f64)
        })
        .collect()
}
