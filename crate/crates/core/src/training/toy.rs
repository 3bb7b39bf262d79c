//! Up-axis regression on posed boxes and cylinders.
//!
//! Each sample is a shape elongated along its own `+z`, rotated and centered.
//! The label is the rotated up axis `R e_z`. Both shapes look the same after
//! a half turn that flips the up axis, so tilts are drawn from a cap around
//! world `+z` (objects standing on a table, never upside down).

use std::fmt::Write as _;

use crate::error::{check_len, invalid, Error, Result};
use crate::exec;
use crate::graphconv::FeatureMap;
use crate::hslayer::{hs_encoder_backward, hs_encoder_forward_tape, EncoderArch, EncoderConfig, LinearMap};
use crate::linalg::{self, Mat3, Vec3};
use crate::params::ParamVector;
use crate::pointcloud::{center_to_mean, generate_shape, PointCloud, ShapeKind, ShapeSpec};
use crate::rng::{derive_seed, Rng};

#[derive(Clone, Debug, PartialEq)]
pub struct ToyTaskSpec {
    pub n_points: usize,
    pub n_train: usize,
    pub n_test: usize,
    /// Largest angle between the up axis and world `+z`, in degrees.
    pub max_tilt_deg: f64,
    /// Every sample keeps its up axis on `+z` (spin about it only).
    pub constant_label: bool,
    pub seed: u64,
}

impl Default for ToyTaskSpec {
    fn default() -> Self {
        Self {
            n_points: 256,
            n_train: 200,
            n_test: 50,
            max_tilt_deg: 60.0,
            constant_label: false,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ToySample {
    pub shape: ShapeSpec,
    pub rotation: Mat3,
    /// Unit up axis after rotation.
    pub label: Vec3,
    /// Centered, posed cloud.
    pub cloud: PointCloud,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ToyTask {
    pub spec: ToyTaskSpec,
    pub train: Vec<ToySample>,
    pub test: Vec<ToySample>,
}

pub const TRAIN_SPLIT: u64 = 0x74_7261_696e;
pub const TEST_SPLIT: u64 = 0x7465_7374;

impl ToyTask {
    pub fn generate(spec: &ToyTaskSpec) -> Result<Self> {
        if !(0.0..=180.0).contains(&spec.max_tilt_deg) {
            return Err(invalid(format!("max tilt {} outside [0, 180]", spec.max_tilt_deg)));
        }
        let split = |tag: u64, count: usize| -> Result<Vec<ToySample>> {
            let base = derive_seed(spec.seed, tag);
            exec::map_range(count, |i| ToySample::generate(spec, derive_seed(base, i as u64)))
                .into_iter()
                .collect()
        };
        Ok(Self {
            spec: spec.clone(),
            train: split(TRAIN_SPLIT, spec.n_train)?,
            test: split(TEST_SPLIT, spec.n_test)?,
        })
    }
}

impl ToySample {
    pub fn generate(spec: &ToyTaskSpec, seed: u64) -> Result<Self> {
        let mut rng = Rng::new(seed);
        let kind = if rng.below(2) == 0 {
            ShapeKind::Box {
                x: rng.range(0.4, 0.8),
                y: rng.range(0.6, 1.0),
                z: rng.range(1.6, 2.2),
            }
        } else {
            ShapeKind::Cylinder {
                radius: rng.range(0.25, 0.45),
                height: rng.range(1.6, 2.2),
            }
        };
        let shape = ShapeSpec::new(kind, derive_seed(seed, 1))?;
        let spin = linalg::axis_angle([0.0, 0.0, 1.0], rng.range(0.0, std::f64::consts::TAU));
        let rotation = if spec.constant_label {
            spin
        } else {
            // uniform on the spherical cap around +z
            let cos_max = spec.max_tilt_deg.to_radians().cos();
            let tilt = rng.range(cos_max, 1.0).clamp(-1.0, 1.0).acos();
            let azimuth = rng.range(0.0, std::f64::consts::TAU);
            let tilt_axis = [-azimuth.sin(), azimuth.cos(), 0.0];
            linalg::mat_mul(&linalg::axis_angle(tilt_axis, tilt), &spin)
        };
        let raw = generate_shape(&shape, spec.n_points)?;
        let posed = raw.map_points(|p| linalg::mat_vec(&rotation, p))?;
        let (cloud, _) = center_to_mean(&posed);
        let label = linalg::normalize(linalg::mat_vec(&rotation, [0.0, 0.0, 1.0]));
        Ok(Self {
            shape,
            rotation,
            label,
            cloud,
            seed,
        })
    }
}

/// Angle in degrees between two unit vectors.
pub fn up_axis_error_deg(pred: Vec3, label: Vec3) -> f64 {
    linalg::dot(pred, label).clamp(-1.0, 1.0).acos().to_degrees()
}

pub fn median(values: &[f64]) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let mid = v.len() / 2;
    if v.len() % 2 == 1 {
        v[mid]
    } else {
        0.5 * (v[mid - 1] + v[mid])
    }
}

/// HS-encoder followed by a linear head on the mean final feature.
#[derive(Clone, Debug, PartialEq)]
pub struct PoseModel {
    pub encoder: EncoderConfig,
    pub head: LinearMap,
}

impl PoseModel {
    pub fn new(arch: &EncoderArch) -> Result<Self> {
        let encoder = arch.build()?;
        let mut rng = Rng::new(derive_seed(arch.seed, 3));
        let head = LinearMap::init(encoder.d_out(), 3, &mut rng);
        Ok(Self { encoder, head })
    }

    pub fn to_params(&self) -> ParamVector {
        let mut pv = self.encoder.to_params();
        pv.push("head.weights", &[self.head.d_in(), 3], self.head.weights())
            .expect("head tensor names are unique");
        pv.push("head.bias", &[3], self.head.bias())
            .expect("head tensor names are unique");
        pv
    }

    pub fn load_params(&mut self, pv: &ParamVector) -> Result<()> {
        let mut r = pv.reader();
        self.encoder.read_params(&mut r)?;
        let w = r.take("head.weights", &[self.head.d_in(), 3])?;
        let b = r.take("head.bias", &[3])?;
        self.head.set_flat(w, b)?;
        r.finish()
    }

    /// Unnormalized head output.
    fn head_output(&self, features: &FeatureMap) -> (Vec<f64>, Vec3) {
        let pooled = features.column_mean();
        let mut h = [0.0; 3];
        self.head.apply(&pooled, &mut h);
        (pooled, h)
    }

    pub fn predict(&self, pc: &PointCloud) -> Result<Vec3> {
        let tape = hs_encoder_forward_tape(pc, &self.encoder, None)?;
        let (_, h) = self.head_output(&tape.features);
        unit(h)
    }

    /// `1 - cos(prediction, label)` and its gradient in [`PoseModel::to_params`] layout.
    pub fn loss_and_grad(&self, pc: &PointCloud, label: Vec3) -> Result<(f64, ParamVector)> {
        let tape = hs_encoder_forward_tape(pc, &self.encoder, None)?;
        let (pooled, h) = self.head_output(&tape.features);
        let y_hat = unit(h)?;
        let cos = linalg::dot(y_hat, label);
        let loss = 1.0 - cos;
        let h_norm = linalg::norm(h);
        let d_h: Vec<f64> = (0..3).map(|j| -(label[j] - cos * y_hat[j]) / h_norm).collect();

        let d = self.head.d_in();
        let mut head_w = vec![0.0; d * 3];
        for i in 0..d {
            for j in 0..3 {
                head_w[i * 3 + j] = pooled[i] * d_h[j];
            }
        }
        let k = tape.features.rows();
        let d_pooled: Vec<f64> = (0..d)
            .map(|i| (0..3).map(|j| self.head.weights()[i * 3 + j] * d_h[j]).sum::<f64>() / k as f64)
            .collect();
        let grad_features = FeatureMap::from_rows(&vec![d_pooled; k])?;
        let enc = hs_encoder_backward(&self.encoder, &tape, &grad_features)?;
        let mut pv = self.encoder.grad_to_params(&enc)?;
        pv.push("head.weights", &[d, 3], &head_w)?;
        pv.push("head.bias", &[3], &d_h)?;
        Ok((loss, pv))
    }
}

fn unit(h: Vec3) -> Result<Vec3> {
    let n = linalg::norm(h);
    if !(n > 1e-12) || !n.is_finite() {
        return Err(Error::NonFinite(format!("head output norm {n}")));
    }
    Ok(linalg::scale(h, 1.0 / n))
}

/// Angular error in degrees for every sample, in sample order.
pub fn evaluate(model: &PoseModel, samples: &[ToySample]) -> Result<Vec<f64>> {
    exec::map_slice(samples, |s| {
        model
            .predict(&s.cloud)
            .map(|p| up_axis_error_deg(p, s.label))
            .map_err(|e| with_seed(e, s.seed))
    })
    .into_iter()
    .collect()
}

fn with_seed(e: Error, seed: u64) -> Error {
    match e {
        Error::NonFinite(msg) => Error::NonFinite(format!("{msg} (sample seed {seed})")),
        other => other,
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            lr: 0.1,
            batch_size: 4,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    /// Mean training loss over the epoch's samples.
    pub loss: f64,
    pub test_median_deg: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainReport {
    pub curve: Vec<EpochLog>,
    /// Held-out errors of the final model, in test sample order.
    pub test_errors: Vec<f64>,
    pub median_error_deg: f64,
}

impl TrainReport {
    /// Plain-text metrics log: a header then one `epoch loss test_median_deg` row per epoch.
    pub fn to_log(&self) -> String {
        let mut s = String::from("epoch loss test_median_deg\n");
        for e in &self.curve {
            let _ = writeln!(s, "{} {:.9} {:.6}", e.epoch, e.loss, e.test_median_deg);
        }
        let _ = writeln!(s, "# final median test error {:.6} deg", self.median_error_deg);
        s
    }
}

/// Mini-batch SGD on `1 - cos`. Sample order is reshuffled every epoch from
/// `cfg.seed`; per-sample gradients are computed in parallel and summed in
/// sample order, so runs are bit-reproducible.
pub fn train_toy_rotation(task: &ToyTask, model: &mut PoseModel, cfg: &TrainConfig) -> Result<TrainReport> {
    if cfg.batch_size == 0 {
        return Err(invalid("batch size must be positive"));
    }
    if task.train.is_empty() && cfg.epochs > 0 {
        return Err(invalid("no training samples"));
    }
    let mut params = model.to_params();
    let mut curve = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..task.train.len()).collect();
        Rng::new(derive_seed(cfg.seed, epoch as u64)).shuffle(&mut order);
        let mut loss_sum = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            let results = exec::map_slice(batch, |&i| {
                let s = &task.train[i];
                model.loss_and_grad(&s.cloud, s.label).map_err(|e| with_seed(e, s.seed))
            });
            let mut grad = params.zeros_like();
            for (r, &i) in results.into_iter().zip(batch) {
                let (loss, g) = r?;
                if !loss.is_finite() || g.values().iter().any(|v| !v.is_finite()) {
                    return Err(Error::NonFinite(format!("loss (sample seed {})", task.train[i].seed)));
                }
                check_len("gradient length", grad.len(), g.len())?;
                loss_sum += loss;
                for (a, b) in grad.values_mut().iter_mut().zip(g.values()) {
                    *a += b;
                }
            }
            let scale = 1.0 / batch.len() as f64;
            grad.values_mut().iter_mut().for_each(|v| *v *= scale);
            params = super::sgd_step(&params, &grad, cfg.lr)?;
            model.load_params(&params)?;
            // support directions may have been re-normalized on load
            params = model.to_params();
        }
        let errors = evaluate(model, &task.test)?;
        curve.push(EpochLog {
            epoch: epoch + 1,
            loss: loss_sum / task.train.len() as f64,
            test_median_deg: median(&errors),
        });
    }
    let test_errors = evaluate(model, &task.test)?;
    Ok(TrainReport {
        median_error_deg: median(&test_errors),
        test_errors,
        curve,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn labels_are_unit_and_within_cap() {
        let spec = ToyTaskSpec {
            n_points: 64,
            n_train: 30,
            n_test: 10,
            ..ToyTaskSpec::default()
        };
        let task = ToyTask::generate(&spec).unwrap();
        for s in task.train.iter().chain(&task.test) {
            assert!((linalg::norm(s.label) - 1.0).abs() < 1e-9);
            assert!(s.label[2] >= 60f64.to_radians().cos() - 1e-12);
            assert!(linalg::norm(s.cloud.centroid()) < 1e-12);
        }
        assert_eq!(task, ToyTask::generate(&spec).unwrap());
    }

    #[test]
    fn constant_labels() {
        let spec = ToyTaskSpec {
            n_points: 32,
            n_train: 5,
            n_test: 5,
            constant_label: true,
            ..ToyTaskSpec::default()
        };
        let task = ToyTask::generate(&spec).unwrap();
        for s in &task.train {
            assert!(linalg::norm(linalg::sub(s.label, [0.0, 0.0, 1.0])) < 1e-12);
        }
    }

    #[test]
    fn median_cases() {
        assert_eq!(median(&[3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(&[4.0, 1.0, 2.0, 3.0]), 2.5);
        assert!(median(&[]).is_nan());
    }

    #[test]
    fn params_round_trip() {
        let mut m = PoseModel::new(&EncoderArch::default()).unwrap();
        let pv = m.to_params();
        assert_eq!(pv.manifest().last().unwrap().name, "head.bias");
        m.load_params(&pv).unwrap();
        assert_eq!(m.to_params(), pv);
    }

    #[test]
    fn zero_epochs_is_evaluation() {
        let spec = ToyTaskSpec {
            n_points: 128,
            n_train: 4,
            n_test: 6,
            ..ToyTaskSpec::default()
        };
        let task = ToyTask::generate(&spec).unwrap();
        let mut m = PoseModel::new(&EncoderArch::default()).unwrap();
        let before = m.clone();
        let cfg = TrainConfig {
            epochs: 0,
            ..TrainConfig::default()
        };
        let r = train_toy_rotation(&task, &mut m, &cfg).unwrap();
        assert_eq!(m, before);
        assert!(r.curve.is_empty());
        assert_eq!(r.test_errors, evaluate(&before, &task.test).unwrap());
    }
}
