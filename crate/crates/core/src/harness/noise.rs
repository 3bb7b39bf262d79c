use std::fmt::Write as _;

use sha2::{Digest, Sha256};

use super::{fmt_f, tabletop_background, SweepSpec, SweepVariable};
use crate::error::{invalid, Result};
use crate::exec;
use crate::linalg;
use crate::pointcloud::{inject_outliers, PointCloud};
use crate::rng::derive_seed;
use crate::training::{
    median, train_toy_rotation, up_axis_error_deg, PoseModel, ToySample, ToyTask, ToyTaskSpec, TrainConfig,
};

pub const NOISE_TAG: u64 = 0x6e_6f69_7365;
/// Crop radius relative to the farthest object point.
pub const CROP_SCALE: f64 = 1.2;

#[derive(Clone, Debug, PartialEq)]
pub struct NoiseRow {
    pub ratio: f64,
    pub trial: usize,
    pub trial_seed: u64,
    pub noise_seed: u64,
    pub hs_median_deg: f64,
    pub plain_gc_median_deg: f64,
    /// Hash of the perturbed test clouds; both variants saw exactly these.
    pub input_hash: String,
}

#[derive(Clone, Debug, PartialEq)]
pub struct NoiseSweep {
    pub seed: u64,
    pub ratios: Vec<f64>,
    pub trials: usize,
    /// Ratio-major, trial-minor.
    pub rows: Vec<NoiseRow>,
}

/// The test clouds of a task with `ratio` of their points swapped for
/// background clutter. Sample `i` draws its background and its replaced
/// slots from `noise_seed`, `i` and the ratio only, so any two callers get
/// the same clouds.
pub fn noisy_test_set(samples: &[ToySample], ratio: f64, noise_seed: u64) -> Result<Vec<PointCloud>> {
    exec::map_range(samples.len(), |i| {
        let s = &samples[i];
        let sample_seed = derive_seed(noise_seed, i as u64);
        let crop = CROP_SCALE * s.cloud.points().iter().map(|&p| linalg::norm(p)).fold(0.0, f64::max);
        let background = tabletop_background(s.cloud.len(), crop, derive_seed(sample_seed, 0))?;
        inject_outliers(
            &s.cloud,
            ratio,
            &background,
            derive_seed(sample_seed, 1 + ratio.to_bits()),
        )
    })
    .into_iter()
    .collect()
}

fn set_hash(clouds: &[PointCloud]) -> String {
    let mut h = Sha256::new();
    for c in clouds {
        h.update(c.content_hash().as_bytes());
    }
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

fn median_error(model: &PoseModel, clouds: &[PointCloud], samples: &[ToySample]) -> Result<f64> {
    let errors: Result<Vec<f64>> = exec::map_range(clouds.len(), |i| {
        model
            .predict(&clouds[i])
            .map(|p| up_axis_error_deg(p, samples[i].label))
    })
    .into_iter()
    .collect();
    Ok(median(&errors?))
}

/// Train the full model and the plain-GC ablation on clean data, then
/// evaluate both on the same perturbed test sets at every ratio.
pub fn run_noise_sweep(spec: &SweepSpec) -> Result<NoiseSweep> {
    spec.validate()?;
    if spec.variable != SweepVariable::OutlierRatio {
        return Err(invalid("noise sweep needs variable outlier_ratio"));
    }
    if spec.values.iter().any(|r| !(0.0..1.0).contains(r)) {
        return Err(invalid("outlier ratios must lie in [0, 1)"));
    }
    let mut per_trial = Vec::with_capacity(spec.trials);
    for t in 0..spec.trials {
        let ts = spec.trial_seed(t);
        let task = ToyTask::generate(&ToyTaskSpec {
            seed: ts,
            ..spec.task.clone()
        })?;
        let train = TrainConfig {
            seed: ts,
            ..spec.train.clone()
        };
        let mut hs = PoseModel::new(&spec.arch.with_seed(ts))?;
        train_toy_rotation(&task, &mut hs, &train)?;
        let mut plain = PoseModel::new(&spec.arch.plain_gc().with_seed(ts))?;
        train_toy_rotation(&task, &mut plain, &train)?;

        let noise_seed = derive_seed(ts, NOISE_TAG);
        let mut rows = Vec::with_capacity(spec.values.len());
        for &ratio in &spec.values {
            let hs_inputs = noisy_test_set(&task.test, ratio, noise_seed)?;
            let plain_inputs = noisy_test_set(&task.test, ratio, noise_seed)?;
            let input_hash = set_hash(&hs_inputs);
            if set_hash(&plain_inputs) != input_hash {
                return Err(invalid(format!("variants saw different inputs at ratio {ratio}")));
            }
            rows.push(NoiseRow {
                ratio,
                trial: t,
                trial_seed: ts,
                noise_seed,
                hs_median_deg: median_error(&hs, &hs_inputs, &task.test)?,
                plain_gc_median_deg: median_error(&plain, &plain_inputs, &task.test)?,
                input_hash,
            });
        }
        per_trial.push(rows);
    }
    let mut rows = Vec::with_capacity(spec.values.len() * spec.trials);
    for v in 0..spec.values.len() {
        rows.extend(per_trial.iter().map(|r| r[v].clone()));
    }
    Ok(NoiseSweep {
        seed: spec.seed,
        ratios: spec.values.clone(),
        trials: spec.trials,
        rows,
    })
}

impl NoiseSweep {
    pub fn rows_at(&self, ratio_index: usize) -> &[NoiseRow] {
        &self.rows[ratio_index * self.trials..(ratio_index + 1) * self.trials]
    }

    /// Per trial, `(hs, plain_gc)` error increase from the first to the last ratio.
    pub fn increases(&self) -> Vec<(f64, f64)> {
        let first = self.rows_at(0);
        let last = self.rows_at(self.ratios.len() - 1);
        first
            .iter()
            .zip(last)
            .map(|(a, b)| {
                (
                    b.hs_median_deg - a.hs_median_deg,
                    b.plain_gc_median_deg - a.plain_gc_median_deg,
                )
            })
            .collect()
    }

    /// Median over trials of [`NoiseSweep::increases`].
    pub fn median_increase(&self) -> (f64, f64) {
        let inc = self.increases();
        let hs: Vec<f64> = inc.iter().map(|p| p.0).collect();
        let plain: Vec<f64> = inc.iter().map(|p| p.1).collect();
        (median(&hs), median(&plain))
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("ratio,trial,trial_seed,noise_seed,hs_median_deg,plain_gc_median_deg,input_hash\n");
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{},{},{},{},{},{},{}",
                fmt_f(r.ratio),
                r.trial,
                r.trial_seed,
                r.noise_seed,
                fmt_f(r.hs_median_deg),
                fmt_f(r.plain_gc_median_deg),
                r.input_hash
            );
        }
        s
    }

    pub fn summary(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "# noise sweep, seed {}, {} trials", self.seed, self.trials);
        let _ = writeln!(
            s,
            "# baseline: same encoder with STE and ORL disabled and point-distance receptive fields"
        );
        let _ = writeln!(s, "# median over trials of the per-trial median test error (degrees)");
        let _ = writeln!(s, "{:>8} {:>10} {:>10}", "ratio", "hs", "plain_gc");
        for (i, &ratio) in self.ratios.iter().enumerate() {
            let rows = self.rows_at(i);
            let hs: Vec<f64> = rows.iter().map(|r| r.hs_median_deg).collect();
            let plain: Vec<f64> = rows.iter().map(|r| r.plain_gc_median_deg).collect();
            let _ = writeln!(s, "{ratio:>8.3} {:>10.4} {:>10.4}", median(&hs), median(&plain));
        }
        let (hs, plain) = self.median_increase();
        let _ = writeln!(s, "increase {hs:>10.4} {plain:>10.4}");
        s
    }
}
