//! Finite-difference gradient oracle, plain SGD, and the toy up-axis task.

mod cases;
mod toy;

pub use cases::{encoder_case, gc_case, layer_case, orl_case, pose_case, ste_case, CaseShape};
pub use toy::{
    evaluate, median, train_toy_rotation, up_axis_error_deg, EpochLog, PoseModel, ToySample, ToyTask, ToyTaskSpec,
    TrainConfig, TrainReport,
};

use std::collections::BTreeMap;

use crate::error::{invalid, Error, Result};
use crate::exec;
use crate::params::ParamVector;
use crate::rng::{derive_seed, Rng};

/// How many fresh instances gradcheck draws before giving up on ties.
pub const MAX_RESAMPLES: usize = 5;
pub const DEFAULT_STEP: f64 = 1e-6;

/// Central differences of `f` along the given coordinates.
pub fn finite_diff_coords<F>(f: &F, params: &ParamVector, coords: &[usize], step: f64) -> Result<Vec<f64>>
where
    F: Fn(&ParamVector) -> Result<f64> + Sync,
{
    finite_diff_terms(&|p: &ParamVector| f(p).map(|v| vec![v]), params, coords, step)
}

/// Central differences of an objective given as a sum of terms. Differences
/// are taken term by term before summing, which keeps roundoff proportional
/// to the terms that actually move rather than to the whole objective.
pub fn finite_diff_terms<F>(f: &F, params: &ParamVector, coords: &[usize], step: f64) -> Result<Vec<f64>>
where
    F: Fn(&ParamVector) -> Result<Vec<f64>> + Sync,
{
    if !(step > 0.0) || !step.is_finite() {
        return Err(invalid(format!("finite-difference step must be positive, got {step}")));
    }
    let results = exec::map_slice(coords, |&i| -> Result<f64> {
        let mut p = params.clone();
        let x = p.values()[i];
        p.values_mut()[i] = x + step;
        let up = f(&p)?;
        p.values_mut()[i] = x - step;
        let down = f(&p)?;
        if up.len() != down.len() || up.iter().chain(&down).any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("objective near coordinate {i}")));
        }
        let diff: f64 = up.iter().zip(&down).map(|(a, b)| a - b).sum();
        Ok(diff / (2.0 * step))
    });
    results.into_iter().collect()
}

/// Full central-difference gradient `(f(p + εe_i) - f(p - εe_i)) / 2ε`.
pub fn finite_diff_grad<F>(f: &F, params: &ParamVector, step: f64) -> Result<ParamVector>
where
    F: Fn(&ParamVector) -> Result<f64> + Sync,
{
    let coords: Vec<usize> = (0..params.len()).collect();
    let vals = finite_diff_coords(f, params, &coords, step)?;
    let mut g = params.zeros_like();
    g.values_mut().copy_from_slice(&vals);
    Ok(g)
}

/// `p - lr * g`.
pub fn sgd_step(params: &ParamVector, grads: &ParamVector, lr: f64) -> Result<ParamVector> {
    if !params.same_layout(grads) {
        return Err(invalid("gradient manifest does not match parameters"));
    }
    let mut out = params.clone();
    for (p, g) in out.values_mut().iter_mut().zip(grads.values()) {
        *p -= lr * g;
    }
    Ok(out)
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / 1e-8_f64.max(analytic.abs()).max(numeric.abs())
}

/// Coarse group a tensor belongs to, with layer prefixes stripped.
pub fn param_group(name: &str) -> &str {
    let tail = name.rsplit_once('.').map_or(name, |(head, _)| head);
    let block = tail.rsplit('.').next().unwrap_or(tail);
    match block {
        "gc" if name.ends_with("support_dirs") => "gc.dirs",
        "gc" => "gc.weights",
        other => other,
    }
}

/// One evaluation of a check objective.
#[derive(Clone, Debug, PartialEq)]
pub struct Probe {
    /// Terms whose sum is the scalar being differentiated.
    pub terms: Vec<f64>,
    /// Winner of every max taken on the way, in a fixed order.
    pub winners: Vec<usize>,
}

/// A scalar objective with every neighbor list frozen at `params`, plus its
/// analytic gradient there.
pub struct CheckCase {
    pub params: ParamVector,
    pub grad: ParamVector,
    /// Max winners at `params`.
    pub winners: Vec<usize>,
    pub loss: CheckLoss,
}

pub type CheckLoss = Box<dyn Fn(&ParamVector) -> Result<Probe> + Sync + Send>;

#[derive(Clone, Debug, PartialEq)]
pub struct CoordCheck {
    pub tensor: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_err: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GroupReport {
    pub group: String,
    pub checked: usize,
    /// Coordinates passed over because stepping them moved a max winner.
    pub skipped: usize,
    pub max_rel_err: f64,
    pub failing: Vec<CoordCheck>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradReport {
    pub tol: f64,
    /// Seed of the instance actually checked.
    pub seed: u64,
    pub resamples: usize,
    pub groups: Vec<GroupReport>,
}

impl GradReport {
    pub fn max_rel_err(&self) -> f64 {
        self.groups.iter().map(|g| g.max_rel_err).fold(0.0, f64::max)
    }

    pub fn passed(&self) -> bool {
        self.max_rel_err() <= self.tol
    }

    pub fn failing(&self) -> impl Iterator<Item = &CoordCheck> {
        self.groups.iter().flat_map(|g| g.failing.iter())
    }
}

/// Central difference along flat coordinate `i`, or `None` when either probe
/// lands on the other side of a max tie.
fn probe_coordinate(case: &CheckCase, i: usize, step: f64) -> Result<Option<f64>> {
    let mut p = case.params.clone();
    let x = p.values()[i];
    p.values_mut()[i] = x + step;
    let up = (case.loss)(&p)?;
    p.values_mut()[i] = x - step;
    let down = (case.loss)(&p)?;
    if up.winners != case.winners || down.winners != case.winners {
        return Ok(None);
    }
    if up.terms.len() != down.terms.len() || up.terms.iter().chain(&down.terms).any(|v| !v.is_finite()) {
        return Err(Error::NonFinite(format!("objective near coordinate {i}")));
    }
    let diff: f64 = up.terms.iter().zip(&down.terms).map(|(a, b)| a - b).sum();
    Ok(Some(diff / (2.0 * step)))
}

/// Check up to `samples` coordinates of every group, drawing replacements
/// for coordinates that sit on a tie. `None` when a group runs out.
fn check_groups(case: &CheckCase, tol: f64, samples: usize, step: f64, seed: u64) -> Result<Option<Vec<GroupReport>>> {
    let mut groups: BTreeMap<String, Vec<(String, usize, usize)>> = BTreeMap::new();
    for (spec, offset) in case.params.offsets() {
        let entry = groups.entry(param_group(&spec.name).to_string()).or_default();
        entry.extend((0..spec.len()).map(|i| (spec.name.clone(), i, offset + i)));
    }
    let mut rng = Rng::new(derive_seed(seed, 0x6772_6164));
    let mut reports = Vec::with_capacity(groups.len());
    for (group, coords) in groups {
        let quota = samples.min(coords.len());
        let mut order: Vec<usize> = (0..coords.len()).collect();
        rng.shuffle(&mut order);
        let mut accepted = Vec::with_capacity(quota);
        let mut skipped = 0;
        let mut next = 0;
        while accepted.len() < quota && next < order.len() {
            let batch = &order[next..(next + quota - accepted.len()).min(order.len())];
            next += batch.len();
            let numeric = exec::map_slice(batch, |&k| probe_coordinate(case, coords[k].2, step));
            for (&k, n) in batch.iter().zip(numeric) {
                match n? {
                    Some(n) => accepted.push((k, n)),
                    None => skipped += 1,
                }
            }
        }
        if accepted.len() < quota {
            return Ok(None);
        }
        accepted.sort_unstable_by_key(|a| a.0);
        let mut max_rel_err: f64 = 0.0;
        let mut failing = Vec::new();
        for (k, n) in accepted {
            let (tensor, index, flat) = &coords[k];
            let a = case.grad.values()[*flat];
            let e = relative_error(a, n);
            max_rel_err = max_rel_err.max(e);
            if e > tol {
                failing.push(CoordCheck {
                    tensor: tensor.clone(),
                    index: *index,
                    analytic: a,
                    numeric: n,
                    rel_err: e,
                });
            }
        }
        reports.push(GroupReport {
            group,
            checked: quota,
            skipped,
            max_rel_err,
            failing,
        });
    }
    Ok(Some(reports))
}

/// Check `build(seed)` against central differences on up to `samples`
/// coordinates per parameter group. A coordinate whose `±step` probe moves
/// any max winner is replaced by another from its group; if a group runs
/// out, the instance is redrawn with a derived seed.
pub fn gradcheck<B>(build: B, tol: f64, samples: usize, step: f64, seed: u64) -> Result<GradReport>
where
    B: Fn(u64) -> Result<CheckCase>,
{
    if !(step > 0.0) || !step.is_finite() {
        return Err(invalid(format!("finite-difference step must be positive, got {step}")));
    }
    let mut case_seed = seed;
    for resamples in 0..=MAX_RESAMPLES {
        if resamples > 0 {
            case_seed = derive_seed(seed, resamples as u64);
        }
        let case = build(case_seed)?;
        if !case.params.same_layout(&case.grad) {
            return Err(invalid("analytic gradient manifest does not match parameters"));
        }
        if let Some(groups) = check_groups(&case, tol, samples, step, case_seed)? {
            return Ok(GradReport {
                tol,
                seed: case_seed,
                resamples,
                groups,
            });
        }
    }
    Err(Error::TieProximity(MAX_RESAMPLES))
}
