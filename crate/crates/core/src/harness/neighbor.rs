use std::fmt::Write as _;
use std::time::Instant;

use super::{fmt_f, SweepSpec, SweepVariable};
use crate::error::{invalid, Result};
use crate::hslayer::{hs_encoder_forward, EncoderArch};
use crate::pointcloud::PointCloud;
use crate::training::{median, train_toy_rotation, PoseModel, ToyTask, ToyTaskSpec, TrainConfig};

pub const TIMING_WARMUPS: usize = 5;
pub const TIMING_RUNS: usize = 50;

#[derive(Clone, Debug, PartialEq)]
pub struct NeighborRow {
    pub value: usize,
    pub trial: usize,
    pub trial_seed: u64,
    pub median_error_deg: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TimingRow {
    pub value: usize,
    pub forward_ms: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct NeighborSweep {
    pub variable: SweepVariable,
    pub seed: u64,
    pub values: Vec<usize>,
    /// Value-major, trial-minor.
    pub rows: Vec<NeighborRow>,
    pub timing: Option<Vec<TimingRow>>,
}

fn arch_for(base: &EncoderArch, variable: SweepVariable, m: usize) -> Result<EncoderArch> {
    Ok(match variable {
        SweepVariable::MRff => base.with_neighbors(Some(m), None),
        SweepVariable::MOrl => base.with_neighbors(None, Some(m)),
        SweepVariable::MBoth => base.with_neighbors(Some(m), Some(m)),
        SweepVariable::OutlierRatio => return Err(invalid("neighbor sweep needs m_rff, m_orl or m_both")),
    })
}

/// Median wall-clock of one encoder forward pass, in milliseconds.
pub fn forward_timing_ms(arch: &EncoderArch, cloud: &PointCloud, warmups: usize, runs: usize) -> Result<f64> {
    if runs == 0 {
        return Err(invalid("timing needs at least one run"));
    }
    let cfg = arch.build()?;
    for _ in 0..warmups {
        hs_encoder_forward(cloud, &cfg)?;
    }
    let mut times = Vec::with_capacity(runs);
    for _ in 0..runs {
        let t = Instant::now();
        let out = hs_encoder_forward(cloud, &cfg)?;
        times.push(t.elapsed().as_secs_f64() * 1e3);
        std::hint::black_box(out);
    }
    Ok(median(&times))
}

/// Retrain and evaluate at every neighbor count. Wall-clock timing is
/// collected only when asked for, since it is the one output that differs
/// between identical runs.
pub fn run_neighbor_sweep(spec: &SweepSpec, timing: bool) -> Result<NeighborSweep> {
    spec.validate()?;
    let mut values = Vec::with_capacity(spec.values.len());
    for &v in &spec.values {
        if v.fract() != 0.0 || v < 1.0 || v > (spec.task.n_points - 1) as f64 {
            return Err(invalid(format!(
                "neighbor count {v} must be an integer in [1, {}]",
                spec.task.n_points.saturating_sub(1)
            )));
        }
        let m = v as usize;
        let arch = arch_for(&spec.arch, spec.variable, m)?;
        if arch.min_points() > spec.task.n_points {
            return Err(invalid(format!(
                "{} = {m} needs {} points, task has {}",
                spec.variable.name(),
                arch.min_points(),
                spec.task.n_points
            )));
        }
        values.push(m);
    }
    let mut rows = Vec::with_capacity(values.len() * spec.trials);
    let tasks: Vec<ToyTask> = (0..spec.trials)
        .map(|t| {
            ToyTask::generate(&ToyTaskSpec {
                seed: spec.trial_seed(t),
                ..spec.task.clone()
            })
        })
        .collect::<Result<_>>()?;
    for &m in &values {
        for (t, task) in tasks.iter().enumerate() {
            let ts = spec.trial_seed(t);
            let mut model = PoseModel::new(&arch_for(&spec.arch, spec.variable, m)?.with_seed(ts))?;
            let report = train_toy_rotation(
                task,
                &mut model,
                &TrainConfig {
                    seed: ts,
                    ..spec.train.clone()
                },
            )?;
            rows.push(NeighborRow {
                value: m,
                trial: t,
                trial_seed: ts,
                median_error_deg: report.median_error_deg,
            });
        }
    }
    let timing = if timing {
        let cloud = &tasks[0]
            .test
            .first()
            .ok_or_else(|| invalid("timing needs a test sample"))?
            .cloud;
        let rows = values
            .iter()
            .map(|&m| {
                let arch = arch_for(&spec.arch, spec.variable, m)?.with_seed(spec.seed);
                Ok(TimingRow {
                    value: m,
                    forward_ms: forward_timing_ms(&arch, cloud, TIMING_WARMUPS, TIMING_RUNS)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Some(rows)
    } else {
        None
    };
    Ok(NeighborSweep {
        variable: spec.variable,
        seed: spec.seed,
        values,
        rows,
        timing,
    })
}

impl NeighborSweep {
    /// Median over trials at each value, in value order.
    pub fn medians(&self) -> Vec<(usize, f64)> {
        self.values
            .iter()
            .map(|&v| {
                let errs: Vec<f64> = self
                    .rows
                    .iter()
                    .filter(|r| r.value == v)
                    .map(|r| r.median_error_deg)
                    .collect();
                (v, median(&errs))
            })
            .collect()
    }

    pub fn to_csv(&self) -> String {
        let mut s = format!("{},trial,trial_seed,median_error_deg\n", self.variable.name());
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{},{},{},{}",
                r.value,
                r.trial,
                r.trial_seed,
                fmt_f(r.median_error_deg)
            );
        }
        s
    }

    pub fn timing_csv(&self) -> Option<String> {
        self.timing.as_ref().map(|rows| {
            let mut s = format!("{},forward_ms_median\n", self.variable.name());
            for r in rows {
                let _ = writeln!(s, "{},{}", r.value, fmt_f(r.forward_ms));
            }
            s
        })
    }

    pub fn summary(&self) -> String {
        let mut s = format!("# neighbor sweep over {}, seed {}\n", self.variable.name(), self.seed);
        let _ = writeln!(s, "{:>8} {:>12}", self.variable.name(), "median_deg");
        for (v, m) in self.medians() {
            let _ = writeln!(s, "{v:>8} {m:>12.4}");
        }
        s
    }
}
