use std::collections::BinaryHeap;

use super::{point_dist2, Candidate, NeighborIndex};
use crate::error::{invalid, Result};
use crate::exec;
use crate::linalg::Vec3;
use crate::pointcloud::PointCloud;

const LEAF_SIZE: usize = 8;

#[derive(Clone, Debug)]
enum Node {
    Leaf {
        start: usize,
        end: usize,
    },
    Split {
        axis: usize,
        value: f64,
        left: usize,
        right: usize,
    },
}

/// Exact kNN index over 3D points.
///
/// Points equal to the split value may land on either side, so the far child
/// is visited whenever its plane distance does not exceed the current worst
/// candidate (`<=`, not `<`): a tie at the boundary can still win on id.
#[derive(Clone, Debug)]
pub struct SpatialIndex {
    points: Vec<Vec3>,
    order: Vec<usize>,
    nodes: Vec<Node>,
}

impl SpatialIndex {
    pub fn build(pc: &PointCloud) -> Self {
        let points = pc.points().to_vec();
        let mut order: Vec<usize> = (0..points.len()).collect();
        let mut nodes = Vec::new();
        build_node(&points, &mut order, 0, &mut nodes);
        Self { points, order, nodes }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// The `m` nearest indexed points to `query`, skipping `exclude`.
    /// Returned as `(id, distance)` ascending by `(distance, id)`.
    pub fn knn(&self, query: Vec3, m: usize, exclude: Option<usize>) -> Vec<(usize, f64)> {
        self.search(query, m, exclude)
            .into_iter()
            .map(|c| (c.id, c.d2.sqrt()))
            .collect()
    }

    /// RF-P rows for every indexed point, self excluded.
    pub fn knn_all(&self, m: usize) -> Result<NeighborIndex> {
        if m >= self.len() {
            return Err(invalid(format!(
                "{m} neighbors requested but only {} points",
                self.len()
            )));
        }
        let rows = exec::map_range(self.len(), |q| self.search(self.points[q], m, Some(q)));
        Ok(NeighborIndex::from_candidates(m, rows))
    }

    fn search(&self, query: Vec3, m: usize, exclude: Option<usize>) -> Vec<Candidate> {
        if m == 0 {
            return Vec::new();
        }
        let mut heap = BinaryHeap::with_capacity(m + 1);
        self.visit(0, query, m, exclude, &mut heap);
        heap.into_sorted_vec()
    }

    fn visit(&self, node: usize, q: Vec3, m: usize, exclude: Option<usize>, heap: &mut BinaryHeap<Candidate>) {
        match self.nodes[node] {
            Node::Leaf { start, end } => {
                for &id in &self.order[start..end] {
                    if Some(id) == exclude {
                        continue;
                    }
                    let c = Candidate {
                        d2: point_dist2(q, self.points[id]),
                        id,
                    };
                    if heap.len() < m {
                        heap.push(c);
                    } else if c < *heap.peek().expect("heap is full") {
                        heap.pop();
                        heap.push(c);
                    }
                }
            }
            Node::Split {
                axis,
                value,
                left,
                right,
            } => {
                let diff = q[axis] - value;
                let (near, far) = if diff < 0.0 { (left, right) } else { (right, left) };
                self.visit(near, q, m, exclude, heap);
                let bound = diff * diff;
                if heap.len() < m || bound <= heap.peek().expect("heap is full").d2 {
                    self.visit(far, q, m, exclude, heap);
                }
            }
        }
    }
}

fn build_node(points: &[Vec3], order: &mut [usize], offset: usize, nodes: &mut Vec<Node>) -> usize {
    let slot = nodes.len();
    if order.len() <= LEAF_SIZE {
        nodes.push(Node::Leaf {
            start: offset,
            end: offset + order.len(),
        });
        return slot;
    }
    // split on the axis of largest spread at the median
    let mut lo = [f64::INFINITY; 3];
    let mut hi = [f64::NEG_INFINITY; 3];
    for &i in order.iter() {
        for k in 0..3 {
            lo[k] = lo[k].min(points[i][k]);
            hi[k] = hi[k].max(points[i][k]);
        }
    }
    let axis = (0..3)
        .max_by(|&a, &b| (hi[a] - lo[a]).total_cmp(&(hi[b] - lo[b])))
        .expect("three axes");
    let mid = order.len() / 2;
    order.select_nth_unstable_by(mid, |&a, &b| points[a][axis].total_cmp(&points[b][axis]));
    let value = points[order[mid]][axis];

    nodes.push(Node::Leaf { start: 0, end: 0 }); // placeholder
    let (l, r) = order.split_at_mut(mid);
    let left = build_node(points, l, offset, nodes);
    let right = build_node(points, r, offset + mid, nodes);
    nodes[slot] = Node::Split {
        axis,
        value,
        left,
        right,
    };
    slot
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::neighbors::{knn_bruteforce, Metric};
    use crate::rng::Rng;

    #[test]
    fn matches_bruteforce_random() {
        let mut rng = Rng::new(21);
        for trial in 0..20 {
            let n = 10 + rng.below(500);
            let pc = PointCloud::new((0..n).map(|_| [rng.normal(), rng.normal(), rng.normal()]).collect()).unwrap();
            let m = 1 + (trial % 10).min(n - 2);
            let a = SpatialIndex::build(&pc).knn_all(m).unwrap();
            let b = knn_bruteforce(Metric::Point(&pc), m).unwrap();
            assert_eq!(a, b, "trial {trial}");
        }
    }

    #[test]
    fn duplicates_and_grid_ties() {
        // integer grid with duplicates: lots of exact distance ties
        let mut rng = Rng::new(2);
        let pts: Vec<Vec3> = (0..300)
            .map(|_| [rng.below(4) as f64, rng.below(4) as f64, rng.below(3) as f64])
            .collect();
        let pc = PointCloud::new(pts).unwrap();
        for m in [1, 5, 10, 40] {
            let a = SpatialIndex::build(&pc).knn_all(m).unwrap();
            let b = knn_bruteforce(Metric::Point(&pc), m).unwrap();
            assert_eq!(a, b, "m = {m}");
        }
    }

    #[test]
    fn external_query() {
        let pc = PointCloud::new(vec![[0.0; 3], [1.0, 0.0, 0.0], [2.0, 0.0, 0.0]]).unwrap();
        let idx = SpatialIndex::build(&pc);
        assert_eq!(
            idx.knn([1.6, 0.0, 0.0], 2, None)
                .iter()
                .map(|x| x.0)
                .collect::<Vec<_>>(),
            vec![2, 1]
        );
        assert_eq!(idx.knn([1.0, 0.0, 0.0], 1, Some(1))[0].0, 0);
    }
}
