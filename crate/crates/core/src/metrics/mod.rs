//! Category-level pose metrics: rotation and translation errors, 3D IoU of
//! oriented boxes, threshold accuracies and per-category mean precision.

mod records;

pub use records::{parse_records, read_records, write_records, EvalRecord, Symmetry};

use std::collections::BTreeMap;
use std::fmt::Write as _;

use crate::error::{invalid, Result};
use crate::exec;
use crate::linalg::{self, Mat3, Vec3};
use crate::pointcloud::Pose;
use crate::rng::{derive_seed, Rng};

/// Monte-Carlo samples drawn per parallel chunk.
const CHUNK: usize = 4096;
pub const MIN_IOU_SAMPLES: usize = 10_000;
pub const DEFAULT_IOU_SAMPLES: usize = 100_000;

/// Rotation error in degrees. With an axial symmetry only the image of the
/// axis matters, so any spin about it is free. Both branches use `atan2`,
/// which stays accurate near 0° and 180° where `acos` does not.
pub fn rotation_error_deg(r_pred: &Mat3, r_gt: &Mat3, symmetry: Symmetry) -> f64 {
    let (sin, cos) = match symmetry {
        Symmetry::None => {
            let rel = linalg::mat_mul(&linalg::transpose(r_pred), r_gt);
            let skew = [rel[2][1] - rel[1][2], rel[0][2] - rel[2][0], rel[1][0] - rel[0][1]];
            (linalg::norm(skew) / 2.0, (linalg::trace(&rel) - 1.0) / 2.0)
        }
        Symmetry::Axial(a) => {
            let p = linalg::normalize(linalg::mat_vec(r_pred, a));
            let g = linalg::normalize(linalg::mat_vec(r_gt, a));
            (linalg::norm(linalg::cross(p, g)), linalg::dot(p, g))
        }
    };
    sin.atan2(cos).to_degrees()
}

/// `100 * |t_pred - t_gt|`, meters in, centimeters out.
pub fn translation_error_cm(t_pred: Vec3, t_gt: Vec3) -> f64 {
    100.0 * linalg::norm(linalg::sub(t_pred, t_gt))
}

/// Box centered at the pose translation with full extents `pose.size()`
/// along the rotated axes.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct OrientedBox {
    pub pose: Pose,
}

impl OrientedBox {
    pub fn new(pose: Pose) -> Self {
        Self { pose }
    }

    pub fn axis_aligned(center: Vec3, size: Vec3) -> Result<Self> {
        Ok(Self::new(Pose::new(linalg::IDENTITY, center, size)?))
    }

    pub fn volume(&self) -> f64 {
        let s = self.pose.size();
        s[0] * s[1] * s[2]
    }

    pub fn contains(&self, p: Vec3) -> bool {
        let local = linalg::mat_vec(
            &linalg::transpose(self.pose.rotation()),
            linalg::sub(p, self.pose.translation()),
        );
        let s = self.pose.size();
        (0..3).all(|k| local[k].abs() <= 0.5 * s[k])
    }

    pub fn corners(&self) -> [Vec3; 8] {
        let s = self.pose.size();
        let r = self.pose.rotation();
        let t = self.pose.translation();
        std::array::from_fn(|i| {
            let local = [
                if i & 1 == 0 { -0.5 } else { 0.5 } * s[0],
                if i & 2 == 0 { -0.5 } else { 0.5 } * s[1],
                if i & 4 == 0 { -0.5 } else { 0.5 } * s[2],
            ];
            linalg::add(linalg::mat_vec(r, local), t)
        })
    }

    /// Min and max corner of the axis-aligned hull.
    pub fn bounds(&self) -> (Vec3, Vec3) {
        let mut lo = [f64::INFINITY; 3];
        let mut hi = [f64::NEG_INFINITY; 3];
        for c in self.corners() {
            for k in 0..3 {
                lo[k] = lo[k].min(c[k]);
                hi[k] = hi[k].max(c[k]);
            }
        }
        (lo, hi)
    }

    fn is_axis_aligned(&self) -> bool {
        *self.pose.rotation() == linalg::IDENTITY
    }
}

/// Exact IoU of two axis-aligned boxes.
pub fn iou_axis_aligned(a: &OrientedBox, b: &OrientedBox) -> f64 {
    let (alo, ahi) = a.bounds();
    let (blo, bhi) = b.bounds();
    let mut inter = 1.0;
    for k in 0..3 {
        inter *= (ahi[k].min(bhi[k]) - alo[k].max(blo[k])).max(0.0);
    }
    let union = a.volume() + b.volume() - inter;
    if union > 0.0 {
        inter / union
    } else {
        0.0
    }
}

/// 3D IoU. Boxes that both have identity rotation use the exact overlap
/// formula; everything else is a seeded Monte-Carlo estimate over the axis
/// aligned hull of both boxes.
pub fn iou3d(a: &OrientedBox, b: &OrientedBox, samples: usize, seed: u64) -> Result<f64> {
    if !(a.volume() > 0.0 && b.volume() > 0.0) {
        return Err(invalid("degenerate box with zero volume"));
    }
    if a.is_axis_aligned() && b.is_axis_aligned() {
        return Ok(iou_axis_aligned(a, b));
    }
    iou3d_monte_carlo(a, b, samples, seed)
}

/// Monte-Carlo IoU without the axis-aligned shortcut.
pub fn iou3d_monte_carlo(a: &OrientedBox, b: &OrientedBox, samples: usize, seed: u64) -> Result<f64> {
    if samples < MIN_IOU_SAMPLES {
        return Err(invalid(format!(
            "need at least {MIN_IOU_SAMPLES} samples, got {samples}"
        )));
    }
    if !(a.volume() > 0.0 && b.volume() > 0.0) {
        return Err(invalid("degenerate box with zero volume"));
    }
    let (alo, ahi) = a.bounds();
    let (blo, bhi) = b.bounds();
    let lo: Vec3 = std::array::from_fn(|k| alo[k].min(blo[k]));
    let hi: Vec3 = std::array::from_fn(|k| ahi[k].max(bhi[k]));
    let chunks = samples.div_ceil(CHUNK);
    let counts = exec::map_range(chunks, |c| {
        let n = CHUNK.min(samples - c * CHUNK);
        let mut rng = Rng::new(derive_seed(seed, c as u64));
        let (mut in_a, mut in_b, mut both) = (0u64, 0u64, 0u64);
        for _ in 0..n {
            let p = [
                rng.range(lo[0], hi[0]),
                rng.range(lo[1], hi[1]),
                rng.range(lo[2], hi[2]),
            ];
            let (ia, ib) = (a.contains(p), b.contains(p));
            in_a += ia as u64;
            in_b += ib as u64;
            both += (ia && ib) as u64;
        }
        (in_a, in_b, both)
    });
    let (in_a, in_b, both) = counts
        .into_iter()
        .fold((0, 0, 0), |s, c| (s.0 + c.0, s.1 + c.1, s.2 + c.2));
    let union = in_a + in_b - both;
    Ok(if union == 0 { 0.0 } else { both as f64 / union as f64 })
}

/// Fraction of records under every given threshold (strict `<`).
pub fn threshold_accuracy(
    records: &[EvalRecord],
    rot_thresh_deg: Option<f64>,
    trans_thresh_cm: Option<f64>,
) -> Result<f64> {
    if records.is_empty() {
        return Err(invalid("no records"));
    }
    let hits = records
        .iter()
        .filter(|r| {
            rot_thresh_deg.is_none_or(|t| r.rotation_error_deg() < t)
                && trans_thresh_cm.is_none_or(|t| r.translation_error_cm() < t)
        })
        .count();
    Ok(hits as f64 / records.len() as f64)
}

/// IoU of every record, seeded by its position in the list.
pub fn record_ious(records: &[EvalRecord], samples: usize, seed: u64) -> Result<Vec<f64>> {
    records
        .iter()
        .enumerate()
        .map(|(i, r)| {
            iou3d(
                &OrientedBox::new(r.predicted),
                &OrientedBox::new(r.ground_truth),
                samples,
                derive_seed(seed, i as u64),
            )
        })
        .collect()
}

/// Mean over categories of the fraction of instances with IoU ≥ threshold.
pub fn iou_map(records: &[EvalRecord], iou_threshold: f64, samples: usize, seed: u64) -> Result<f64> {
    if records.is_empty() {
        return Err(invalid("no records"));
    }
    let ious = record_ious(records, samples, seed)?;
    let mut per_cat: BTreeMap<&str, (usize, usize)> = BTreeMap::new();
    for (r, iou) in records.iter().zip(&ious) {
        let e = per_cat.entry(&r.category).or_default();
        e.0 += (*iou >= iou_threshold) as usize;
        e.1 += 1;
    }
    Ok(per_cat.values().map(|&(h, n)| h as f64 / n as f64).sum::<f64>() / per_cat.len() as f64)
}

/// Columns of the report table: IoU thresholds, then (degrees, centimeters) pairs.
pub const IOU_THRESHOLDS: [f64; 3] = [0.25, 0.50, 0.75];
pub const POSE_THRESHOLDS: [(Option<f64>, Option<f64>); 6] = [
    (Some(5.0), Some(2.0)),
    (Some(5.0), Some(5.0)),
    (Some(10.0), Some(2.0)),
    (Some(10.0), Some(5.0)),
    (None, Some(2.0)),
    (Some(5.0), None),
];
pub const COLUMNS: [&str; 9] = [
    "IoU25", "IoU50", "IoU75", "5°2cm", "5°5cm", "10°2cm", "10°5cm", "2cm", "5°",
];

/// One score per entry of [`COLUMNS`].
pub type Scores = [f64; 9];

#[derive(Clone, Debug, PartialEq)]
pub struct MetricsReport {
    /// Unweighted mean of the per-category rows.
    pub mean: Scores,
    pub per_category: BTreeMap<String, Scores>,
    pub count: usize,
}

impl MetricsReport {
    pub fn compute(records: &[EvalRecord], samples: usize, seed: u64) -> Result<Self> {
        if records.is_empty() {
            return Err(invalid("no records"));
        }
        let ious = record_ious(records, samples, seed)?;
        let mut groups: BTreeMap<String, (Vec<EvalRecord>, Vec<f64>)> = BTreeMap::new();
        for (r, iou) in records.iter().zip(ious) {
            let g = groups.entry(r.category.clone()).or_default();
            g.0.push(r.clone());
            g.1.push(iou);
        }
        let mut per_category = BTreeMap::new();
        for (cat, (recs, ious)) in groups {
            let mut row = [0.0; 9];
            for (slot, t) in row.iter_mut().zip(IOU_THRESHOLDS) {
                *slot = ious.iter().filter(|&&v| v >= t).count() as f64 / ious.len() as f64;
            }
            for (slot, (r, t)) in row[3..].iter_mut().zip(POSE_THRESHOLDS) {
                *slot = threshold_accuracy(&recs, r, t)?;
            }
            per_category.insert(cat, row);
        }
        let mut mean = [0.0; 9];
        for row in per_category.values() {
            for (m, v) in mean.iter_mut().zip(row) {
                *m += v / per_category.len() as f64;
            }
        }
        Ok(Self {
            mean,
            per_category,
            count: records.len(),
        })
    }

    /// Aligned plain-text table, one row per category plus the mean.
    pub fn to_table(&self) -> String {
        let name_w = self
            .per_category
            .keys()
            .map(|k| k.chars().count())
            .chain([8])
            .max()
            .unwrap_or(8);
        let mut s = String::new();
        let _ = write!(s, "{:<name_w$}", "category");
        for c in COLUMNS {
            let _ = write!(s, " {c:>8}");
        }
        s.push('\n');
        let mut row = |name: &str, scores: &Scores| {
            let _ = write!(s, "{name:<name_w$}");
            for v in scores {
                let _ = write!(s, " {v:>8.4}");
            }
            s.push('\n');
        };
        for (cat, scores) in &self.per_category {
            row(cat, scores);
        }
        row("mean", &self.mean);
        s
    }
}
