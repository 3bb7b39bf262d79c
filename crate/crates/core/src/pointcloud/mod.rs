//! Point clouds, poses, and the perturbations used by the experiments.

mod io;
mod shapes;

pub use io::{load_pointcloud, parse_ply, parse_xyz, save_pointcloud, write_ply, write_xyz, PointFormat};
pub use shapes::{generate_shape, ShapeKind, ShapeSpec};

use sha2::{Digest, Sha256};

use crate::error::{check_len, invalid, Error, Result};
use crate::linalg::{self, Mat3, Vec3};
use crate::rng::Rng;

/// `N` points in 3D, optionally tagged with an outlier flag per point.
#[derive(Clone, Debug, PartialEq)]
pub struct PointCloud {
    points: Vec<Vec3>,
    outliers: Option<Vec<bool>>,
}

impl PointCloud {
    pub fn new(points: Vec<Vec3>) -> Result<Self> {
        if points.is_empty() {
            return Err(Error::EmptyCloud);
        }
        if let Some(i) = points.iter().position(|p| p.iter().any(|c| !c.is_finite())) {
            return Err(Error::NonFinite(format!("point {i}")));
        }
        Ok(Self { points, outliers: None })
    }

    pub fn with_outlier_flags(points: Vec<Vec3>, flags: Vec<bool>) -> Result<Self> {
        check_len("outlier flags", points.len(), flags.len())?;
        let mut pc = Self::new(points)?;
        pc.outliers = Some(flags);
        Ok(pc)
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    /// Always false for a constructed cloud; provided for API symmetry.
    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn points(&self) -> &[Vec3] {
        &self.points
    }

    pub fn point(&self, i: usize) -> Vec3 {
        self.points[i]
    }

    pub fn outlier_flags(&self) -> Option<&[bool]> {
        self.outliers.as_deref()
    }

    pub fn outlier_count(&self) -> usize {
        self.outliers.as_ref().map_or(0, |f| f.iter().filter(|&&b| b).count())
    }

    pub fn centroid(&self) -> Vec3 {
        let mut c = [0.0; 3];
        for p in &self.points {
            c = linalg::add(c, *p);
        }
        linalg::scale(c, 1.0 / self.len() as f64)
    }

    /// Point-wise map that keeps flags.
    pub fn map_points(&self, f: impl Fn(Vec3) -> Vec3) -> Result<Self> {
        let mut out = Self::new(self.points.iter().map(|&p| f(p)).collect())?;
        out.outliers = self.outliers.clone();
        Ok(out)
    }

    /// Sub-cloud with the given indices, in the given order.
    pub fn select(&self, indices: &[usize]) -> Result<Self> {
        let mut out = Self::new(indices.iter().map(|&i| self.points[i]).collect())?;
        out.outliers = self.outliers.as_ref().map(|f| indices.iter().map(|&i| f[i]).collect());
        Ok(out)
    }

    /// SHA-256 over the little-endian coordinate bytes and flags, hex encoded.
    pub fn content_hash(&self) -> String {
        let mut h = Sha256::new();
        for p in &self.points {
            for c in p {
                h.update(c.to_le_bytes());
            }
        }
        if let Some(flags) = &self.outliers {
            h.update(flags.iter().map(|&b| b as u8).collect::<Vec<_>>());
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }
}

/// Rotation, translation (meters) and per-axis size.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Pose {
    rotation: Mat3,
    translation: Vec3,
    size: Vec3,
}

pub const ROTATION_TOLERANCE: f64 = 1e-9;

impl Pose {
    pub fn new(rotation: Mat3, translation: Vec3, size: Vec3) -> Result<Self> {
        if rotation
            .iter()
            .flatten()
            .chain(&translation)
            .chain(&size)
            .any(|v| !v.is_finite())
        {
            return Err(Error::NonFinite("pose".into()));
        }
        if linalg::orthonormality_error(&rotation) > ROTATION_TOLERANCE
            || (linalg::determinant(&rotation) - 1.0).abs() > ROTATION_TOLERANCE
        {
            return Err(invalid("rotation is not in SO(3)"));
        }
        if size.iter().any(|&s| s <= 0.0) {
            return Err(invalid("size components must be positive"));
        }
        Ok(Self {
            rotation,
            translation,
            size,
        })
    }

    pub fn identity() -> Self {
        Self {
            rotation: linalg::IDENTITY,
            translation: [0.0; 3],
            size: [1.0; 3],
        }
    }

    pub fn rotation(&self) -> &Mat3 {
        &self.rotation
    }

    pub fn translation(&self) -> Vec3 {
        self.translation
    }

    pub fn size(&self) -> Vec3 {
        self.size
    }

    /// `R (s ⊙ p) + t`.
    pub fn transform(&self, p: Vec3) -> Vec3 {
        let scaled = [p[0] * self.size[0], p[1] * self.size[1], p[2] * self.size[2]];
        linalg::add(linalg::mat_vec(&self.rotation, scaled), self.translation)
    }

    /// Inverse of [`Pose::transform`]: `(Rᵀ (q - t)) ⊘ s`.
    pub fn inverse_transform(&self, q: Vec3) -> Vec3 {
        let local = linalg::mat_vec(&linalg::transpose(&self.rotation), linalg::sub(q, self.translation));
        [
            local[0] / self.size[0],
            local[1] / self.size[1],
            local[2] / self.size[2],
        ]
    }
}

/// Subtract the mean. Returns the centered cloud and the subtracted mean.
pub fn center_to_mean(pc: &PointCloud) -> (PointCloud, Vec3) {
    let c = pc.centroid();
    let centered = pc
        .map_points(|p| linalg::sub(p, c))
        .expect("centering keeps points finite");
    (centered, c)
}

/// `n` distinct input points chosen uniformly without replacement.
pub fn random_downsample(pc: &PointCloud, n: usize, seed: u64) -> Result<PointCloud> {
    if n > pc.len() {
        return Err(invalid(format!("cannot keep {n} of {} points", pc.len())));
    }
    if n == 0 {
        return Err(Error::EmptyCloud);
    }
    let idx = Rng::new(seed).sample_indices(pc.len(), n);
    pc.select(&idx)
}

pub fn apply_pose(pc: &PointCloud, pose: &Pose) -> PointCloud {
    pc.map_points(|p| pose.transform(p))
        .expect("finite pose maps finite points to finite points")
}

pub fn remove_pose(pc: &PointCloud, pose: &Pose) -> PointCloud {
    pc.map_points(|p| pose.inverse_transform(p))
        .expect("finite pose maps finite points to finite points")
}

/// Number of points replaced at a given ratio: `round_half_up(ratio * n)`.
pub fn outlier_count(ratio: f64, n: usize) -> usize {
    (ratio * n as f64 + 0.5).floor() as usize
}

/// Replace `round(ratio * N)` object points with points drawn from
/// `background`, flagging them as outliers. `N` is unchanged.
pub fn inject_outliers(pc: &PointCloud, ratio: f64, background: &[Vec3], seed: u64) -> Result<PointCloud> {
    if !(0.0..1.0).contains(&ratio) {
        return Err(invalid(format!("outlier ratio {ratio} outside [0, 1)")));
    }
    let n = pc.len();
    let k = outlier_count(ratio, n);
    if k > 0 && background.is_empty() {
        return Err(invalid("empty background with positive outlier ratio"));
    }
    let mut rng = Rng::new(seed);
    let slots = rng.sample_indices(n, k);
    let sources = if background.len() >= k {
        rng.sample_indices(background.len(), k)
    } else {
        (0..k).map(|_| rng.below(background.len())).collect()
    };
    let mut points = pc.points.clone();
    let mut flags = pc.outliers.clone().unwrap_or_else(|| vec![false; n]);
    for (&slot, &src) in slots.iter().zip(&sources) {
        points[slot] = background[src];
        flags[slot] = true;
    }
    PointCloud::with_outlier_flags(points, flags)
}
