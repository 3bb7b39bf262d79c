//! Exact k-nearest-neighbor receptive fields.
//!
//! Two metrics are supported: Euclidean distance between point positions
//! (RF-P) and Euclidean distance between feature rows (RF-F). The query point
//! is never its own neighbor. Candidates are ordered by `(squared distance,
//! id)`, so equal distances resolve to the lower point id and every search
//! route returns the same rows.

mod kdtree;

pub use kdtree::SpatialIndex;

use std::cmp::Ordering;

use crate::error::{invalid, Result};
use crate::exec;
use crate::graphconv::FeatureMap;
use crate::linalg::Vec3;
use crate::pointcloud::PointCloud;

/// For each of `N` query points, `m` neighbors ascending by distance.
#[derive(Clone, Debug, PartialEq)]
pub struct NeighborIndex {
    n: usize,
    m: usize,
    ids: Vec<usize>,
    distances: Vec<f64>,
}

impl NeighborIndex {
    /// Build from per-row `(id, distance)` lists, validating the row invariants.
    pub fn from_rows(m: usize, rows: &[Vec<(usize, f64)>]) -> Result<Self> {
        let n = rows.len();
        let mut ids = Vec::with_capacity(n * m);
        let mut distances = Vec::with_capacity(n * m);
        for (q, row) in rows.iter().enumerate() {
            if row.len() != m {
                return Err(invalid(format!("row {q} has {} neighbors, expected {m}", row.len())));
            }
            let mut prev = 0.0;
            for &(id, d) in row {
                if id >= n || id == q {
                    return Err(invalid(format!("row {q}: bad neighbor id {id}")));
                }
                if !(d.is_finite() && d >= prev) {
                    return Err(invalid(format!("row {q}: distances must be finite and non-decreasing")));
                }
                prev = d;
                ids.push(id);
                distances.push(d);
            }
        }
        Ok(Self { n, m, ids, distances })
    }

    pub(crate) fn from_candidates(m: usize, rows: Vec<Vec<Candidate>>) -> Self {
        let n = rows.len();
        let mut ids = Vec::with_capacity(rows.len() * m);
        let mut distances = Vec::with_capacity(rows.len() * m);
        for row in rows {
            debug_assert_eq!(row.len(), m);
            for c in row {
                ids.push(c.id);
                distances.push(c.d2.sqrt());
            }
        }
        Self { n, m, ids, distances }
    }

    pub fn m(&self) -> usize {
        self.m
    }

    /// Number of query rows.
    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn neighbors(&self, q: usize) -> &[usize] {
        &self.ids[q * self.m..(q + 1) * self.m]
    }

    pub fn distances(&self, q: usize) -> &[f64] {
        &self.distances[q * self.m..(q + 1) * self.m]
    }
}

/// Euclidean distance between two points.
pub fn point_distance(a: Vec3, b: Vec3) -> f64 {
    point_dist2(a, b).sqrt()
}

/// Euclidean distance between two feature vectors.
pub fn feature_distance(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(crate::error::Error::ShapeMismatch {
            what: "feature dimension",
            expected: a.len(),
            got: b.len(),
        });
    }
    Ok(feature_dist2(a, b).sqrt())
}

#[inline]
pub(crate) fn point_dist2(a: Vec3, b: Vec3) -> f64 {
    let dx = a[0] - b[0];
    let dy = a[1] - b[1];
    let dz = a[2] - b[2];
    dx * dx + dy * dy + dz * dz
}

#[inline]
fn feature_dist2(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Data searched by [`knn_bruteforce`], which also fixes the metric.
#[derive(Clone, Copy, Debug)]
pub enum Metric<'a> {
    Point(&'a PointCloud),
    Feature(&'a FeatureMap),
}

impl Metric<'_> {
    fn len(&self) -> usize {
        match self {
            Metric::Point(pc) => pc.len(),
            Metric::Feature(fm) => fm.rows(),
        }
    }

    fn dist2(&self, i: usize, j: usize) -> f64 {
        match self {
            Metric::Point(pc) => point_dist2(pc.point(i), pc.point(j)),
            Metric::Feature(fm) => feature_dist2(fm.row(i), fm.row(j)),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub(crate) struct Candidate {
    pub d2: f64,
    pub id: usize,
}

impl Eq for Candidate {}

impl Ord for Candidate {
    fn cmp(&self, other: &Self) -> Ordering {
        self.d2.total_cmp(&other.d2).then(self.id.cmp(&other.id))
    }
}

impl PartialOrd for Candidate {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

fn check_m(m: usize, n: usize) -> Result<()> {
    if m >= n {
        return Err(invalid(format!("{m} neighbors requested but only {n} points")));
    }
    Ok(())
}

/// Exhaustive kNN over every item of `data`, self excluded.
pub fn knn_bruteforce(data: Metric<'_>, m: usize) -> Result<NeighborIndex> {
    let n = data.len();
    check_m(m, n)?;
    let rows = exec::map_range(n, |q| {
        if m == 0 {
            return Vec::new();
        }
        let mut cands: Vec<Candidate> = (0..n)
            .filter(|&j| j != q)
            .map(|j| Candidate {
                d2: data.dist2(q, j),
                id: j,
            })
            .collect();
        cands.select_nth_unstable(m - 1);
        cands.truncate(m);
        cands.sort_unstable();
        cands
    });
    Ok(NeighborIndex::from_candidates(m, rows))
}

/// RF-P through a kd-tree.
pub fn knn_points(pc: &PointCloud, m: usize) -> Result<NeighborIndex> {
    check_m(m, pc.len())?;
    let index = SpatialIndex::build(pc);
    index.knn_all(m)
}

/// RF-F by exhaustive search over feature rows.
pub fn knn_features(fm: &FeatureMap, m: usize) -> Result<NeighborIndex> {
    knn_bruteforce(Metric::Feature(fm), m)
}
