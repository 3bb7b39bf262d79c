//! Desk-scale experiment drivers: the invariance suite, the outlier-ratio
//! sweep and the neighbor-count sweep. Sweeps emit CSV named
//! `<sweep>_<seed>.csv` plus a plain-text summary.

mod invariance;
mod neighbor;
mod noise;

pub use invariance::{run_invariance_suite, CheckStatus, InvarianceCheck, InvarianceReport};
pub use neighbor::{forward_timing_ms, run_neighbor_sweep, NeighborRow, NeighborSweep, TimingRow};
pub use noise::{noisy_test_set, run_noise_sweep, NoiseRow, NoiseSweep, NOISE_TAG};

use std::path::{Path, PathBuf};

use crate::error::{invalid, Result};
use crate::hslayer::EncoderArch;
use crate::linalg::Vec3;
use crate::rng::{derive_seed, Rng};
use crate::training::{ToyTaskSpec, TrainConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SweepVariable {
    OutlierRatio,
    MRff,
    MOrl,
    MBoth,
}

impl SweepVariable {
    pub fn name(&self) -> &'static str {
        match self {
            Self::OutlierRatio => "outlier_ratio",
            Self::MRff => "m_rff",
            Self::MOrl => "m_orl",
            Self::MBoth => "m_both",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        [Self::OutlierRatio, Self::MRff, Self::MOrl, Self::MBoth]
            .into_iter()
            .find(|v| v.name() == name)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SweepSpec {
    pub variable: SweepVariable,
    pub values: Vec<f64>,
    /// Independent experiments, each with its own task, init and noise.
    pub trials: usize,
    pub arch: EncoderArch,
    pub task: ToyTaskSpec,
    pub train: TrainConfig,
    pub seed: u64,
}

impl SweepSpec {
    pub fn validate(&self) -> Result<()> {
        if self.values.is_empty() {
            return Err(invalid("sweep has no values"));
        }
        if self.values.windows(2).any(|w| !(w[0] < w[1])) {
            return Err(invalid("sweep values must be strictly increasing"));
        }
        if self.trials == 0 {
            return Err(invalid("sweep needs at least one trial"));
        }
        Ok(())
    }

    /// Seed of trial `t`. Task, init, training order and noise all derive from it.
    pub fn trial_seed(&self, t: usize) -> u64 {
        derive_seed(self.seed, t as u64)
    }

    /// `<sweep>_<seed>.csv` under `dir`.
    pub fn csv_path(&self, dir: &Path, sweep: &str) -> PathBuf {
        dir.join(format!("{sweep}_{}.csv", self.seed))
    }
}

/// Clutter a detector crop around a centered object would contain: a
/// tabletop patch under it and a few solid spheres beside it, keeping only
/// points within `crop_radius` of the origin.
pub fn tabletop_background(n: usize, crop_radius: f64, seed: u64) -> Result<Vec<Vec3>> {
    if !(crop_radius > 0.0) || !crop_radius.is_finite() {
        return Err(invalid(format!("crop radius must be positive, got {crop_radius}")));
    }
    let mut rng = Rng::new(seed);
    let table_z = -crop_radius * rng.range(0.5, 0.8);
    let spheres: Vec<(Vec3, f64)> = (0..3)
        .map(|_| {
            let angle = rng.range(0.0, std::f64::consts::TAU);
            let dist = crop_radius * rng.range(0.5, 0.9);
            let r = crop_radius * rng.range(0.1, 0.25);
            ([dist * angle.cos(), dist * angle.sin(), table_z + r], r)
        })
        .collect();
    let mut out = Vec::with_capacity(n);
    while out.len() < n {
        let p = if out.len() % 2 == 0 {
            [
                rng.range(-crop_radius, crop_radius),
                rng.range(-crop_radius, crop_radius),
                table_z,
            ]
        } else {
            let (c, r) = spheres[rng.below(spheres.len())];
            let u = rng.unit_vector();
            let s = r * rng.uniform().cbrt();
            [c[0] + s * u[0], c[1] + s * u[1], c[2] + s * u[2]]
        };
        if crate::linalg::norm(p) <= crop_radius {
            out.push(p);
        }
    }
    Ok(out)
}

pub(crate) fn fmt_f(v: f64) -> String {
    format!("{v:.6}")
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(values: Vec<f64>, trials: usize) -> SweepSpec {
        SweepSpec {
            variable: SweepVariable::OutlierRatio,
            values,
            trials,
            arch: EncoderArch::default(),
            task: ToyTaskSpec::default(),
            train: TrainConfig::default(),
            seed: 3,
        }
    }

    #[test]
    fn validation() {
        assert!(spec(vec![0.0, 0.2], 1).validate().is_ok());
        assert!(spec(vec![], 1).validate().is_err());
        assert!(spec(vec![0.2, 0.2], 1).validate().is_err());
        assert!(spec(vec![0.0], 0).validate().is_err());
        assert_eq!(
            spec(vec![0.0], 1).csv_path(Path::new("out"), "noise_sweep"),
            Path::new("out/noise_sweep_3.csv")
        );
    }

    #[test]
    fn variable_names() {
        for v in ["outlier_ratio", "m_rff", "m_orl", "m_both"] {
            assert_eq!(SweepVariable::from_name(v).unwrap().name(), v);
        }
        assert!(SweepVariable::from_name("m").is_none());
    }

    #[test]
    fn background_is_seeded_and_below_or_beside() {
        let a = tabletop_background(200, 1.5, 9).unwrap();
        assert_eq!(a.len(), 200);
        assert_eq!(a, tabletop_background(200, 1.5, 9).unwrap());
        assert_ne!(a, tabletop_background(200, 1.5, 10).unwrap());
        let table_z = a[0][2];
        assert!(a.iter().all(|p| p[2] >= table_z - 1e-12));
        assert!(a.iter().all(|p| crate::linalg::norm(*p) <= 1.5));
        assert!(tabletop_background(10, 0.0, 9).is_err());
    }
}
