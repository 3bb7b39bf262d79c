use std::fmt::Write as _;

use crate::error::Result;
use crate::graphconv::FeatureMap;
use crate::hslayer::{
    hs_layer_forward, layer_neighbors, orl_forward, positions, EncoderConfig, HsLayerParams, LinearMap,
};
use crate::linalg::{self, Vec3};
use crate::neighbors::knn_points;
use crate::pointcloud::PointCloud;
use crate::rng::{derive_seed, Rng};

pub const CLOUD_POINTS: usize = 256;
pub const TRANSFORMS: usize = 100;
pub const INVARIANCE_TOL: f64 = 1e-9;
pub const STE_MIN_CHANGE: f64 = 1e-6;
pub const PERMUTATION_TOL: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CheckStatus {
    Pass,
    Fail,
    Skipped,
}

impl CheckStatus {
    pub fn label(&self) -> &'static str {
        match self {
            Self::Pass => "PASS",
            Self::Fail => "FAIL",
            Self::Skipped => "SKIP",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct InvarianceCheck {
    pub name: &'static str,
    pub status: CheckStatus,
    /// Largest absolute output change seen (for the STE check, the one that must be large).
    pub max_deviation: f64,
    pub detail: String,
}

#[derive(Clone, Debug, PartialEq)]
pub struct InvarianceReport {
    pub seed: u64,
    pub checks: Vec<InvarianceCheck>,
}

impl InvarianceReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.status != CheckStatus::Fail)
    }

    pub fn get(&self, name: &str) -> Option<&InvarianceCheck> {
        self.checks.iter().find(|c| c.name == name)
    }

    pub fn to_text(&self) -> String {
        let mut s = format!("# invariance suite, seed {}\n", self.seed);
        for c in &self.checks {
            let _ = writeln!(
                s,
                "{} {:<28} max_dev {:.3e}  {}",
                c.status.label(),
                c.name,
                c.max_deviation,
                c.detail
            );
        }
        s
    }
}

fn random_cloud(n: usize, rng: &mut Rng) -> PointCloud {
    PointCloud::new((0..n).map(|_| [rng.normal(), rng.normal(), rng.normal()]).collect())
        .expect("gaussian points are finite")
}

fn random_features(rows: usize, cols: usize, rng: &mut Rng) -> FeatureMap {
    FeatureMap::new(rows, cols, (0..rows * cols).map(|_| rng.normal()).collect()).expect("sizes match")
}

/// Layer input as the encoder would feed it.
fn layer_input(pc: &PointCloud, layer: &HsLayerParams, rng: &mut Rng) -> FeatureMap {
    if layer.is_first_layer {
        positions(pc)
    } else {
        random_features(pc.len(), layer.d_in(), rng)
    }
}

fn geometric_only(layer: &HsLayerParams) -> HsLayerParams {
    HsLayerParams {
        ste: None,
        ..layer.clone()
    }
}

fn check(name: &'static str, pass: bool, max_deviation: f64, detail: String) -> InvarianceCheck {
    InvarianceCheck {
        name,
        status: if pass { CheckStatus::Pass } else { CheckStatus::Fail },
        max_deviation,
        detail,
    }
}

/// Geometric path (everything but STE) of every layer under `TRANSFORMS`
/// random maps of a random cloud.
fn transform_check(
    name: &'static str,
    cfg: &EncoderConfig,
    seed: u64,
    map: impl Fn(&mut Rng) -> Box<dyn Fn(Vec3) -> Vec3>,
) -> Result<InvarianceCheck> {
    let mut rng = Rng::new(seed);
    let mut worst: f64 = 0.0;
    for layer in &cfg.layers {
        let geo = geometric_only(layer);
        let pc = random_cloud(CLOUD_POINTS, &mut rng);
        let fm = layer_input(&pc, layer, &mut rng);
        let base = hs_layer_forward(&pc, &fm, &geo)?;
        for _ in 0..TRANSFORMS {
            let f = map(&mut rng);
            let moved = pc.map_points(&f)?;
            // first-layer input is positions, which the geometric path never reads
            let out = hs_layer_forward(&moved, &fm, &geo)?;
            worst = worst.max(base.max_abs_diff(&out));
        }
    }
    Ok(check(
        name,
        worst <= INVARIANCE_TOL,
        worst,
        format!(
            "{} layers x {TRANSFORMS} maps, tol {INVARIANCE_TOL:e}",
            cfg.layers.len()
        ),
    ))
}

fn ste_check(cfg: &EncoderConfig, seed: u64) -> Result<InvarianceCheck> {
    let first = &cfg.layers[0];
    let active = first.ste.as_ref().is_some_and(|s| !s.is_zero());
    if !active {
        return Ok(InvarianceCheck {
            name: "ste_breaks_invariance",
            status: CheckStatus::Skipped,
            max_deviation: 0.0,
            detail: "first layer has no nonzero STE weights".into(),
        });
    }
    let mut rng = Rng::new(seed);
    let pc = random_cloud(CLOUD_POINTS, &mut rng);
    let moved = pc.map_points(|p| linalg::add(p, [1.0, 0.0, 0.0]))?;
    let base = hs_layer_forward(&pc, &positions(&pc), first)?;
    let out = hs_layer_forward(&moved, &positions(&moved), first)?;
    let change = base.max_abs_diff(&out);
    Ok(check(
        "ste_breaks_invariance",
        change > STE_MIN_CHANGE,
        change,
        format!("first layer under translation (1,0,0), needs > {STE_MIN_CHANGE:e}"),
    ))
}

fn first_layer_check(cfg: &EncoderConfig, seed: u64) -> Result<InvarianceCheck> {
    let first = &cfg.layers[0];
    let mut rng = Rng::new(seed);
    let mut mismatches = 0;
    let clouds = 20;
    for _ in 0..clouds {
        let n = first.m_rff + 1 + rng.below(300);
        let pc = random_cloud(n, &mut rng);
        let got = layer_neighbors(&pc, &positions(&pc), first)?;
        if got.gc != knn_points(&pc, first.m_rff)? {
            mismatches += 1;
        }
    }
    Ok(check(
        "first_layer_rfp",
        mismatches == 0,
        mismatches as f64,
        format!("{mismatches} of {clouds} clouds differ from point-distance kNN"),
    ))
}

fn orl_identity_check(cfg: &EncoderConfig, seed: u64) -> Result<InvarianceCheck> {
    let mut rng = Rng::new(seed);
    let mut worst: f64 = 0.0;
    let mut exact = true;
    for layer in &cfg.layers {
        let d = layer.d_out();
        let pc = random_cloud(CLOUD_POINTS, &mut rng);
        let fm = random_features(pc.len(), d, &mut rng);
        let out = orl_forward(&pc, &fm, &knn_points(&pc, layer.m_orl)?, &LinearMap::zeros(2 * d, d))?;
        exact &= out.data() == fm.data();
        worst = worst.max(out.max_abs_diff(&fm));
    }
    Ok(check(
        "orl_residual_identity",
        exact,
        worst,
        "zero ORL parameters, bit-exact".into(),
    ))
}

fn permutation_check(cfg: &EncoderConfig, seed: u64) -> Result<InvarianceCheck> {
    let mut rng = Rng::new(seed);
    let mut worst: f64 = 0.0;
    for layer in &cfg.layers {
        let pc = random_cloud(CLOUD_POINTS, &mut rng);
        let fm = layer_input(&pc, layer, &mut rng);
        let base = hs_layer_forward(&pc, &fm, layer)?;
        let mut perm: Vec<usize> = (0..pc.len()).collect();
        rng.shuffle(&mut perm);
        let out = hs_layer_forward(&pc.select(&perm)?, &fm.select_rows(&perm), layer)?;
        worst = worst.max(base.select_rows(&perm).max_abs_diff(&out));
    }
    Ok(check(
        "permutation_equivariance",
        worst <= PERMUTATION_TOL,
        worst,
        format!("rows follow a random point permutation, tol {PERMUTATION_TOL:e}"),
    ))
}

/// Every layer-level invariance on randomized instances. Failures are report
/// entries; only malformed configs are errors.
pub fn run_invariance_suite(cfg: &EncoderConfig, seed: u64) -> Result<InvarianceReport> {
    cfg.validate()?;
    let translation = transform_check("gc_translation_invariance", cfg, derive_seed(seed, 1), |rng| {
        let t = linalg::scale(rng.unit_vector(), rng.range(0.0, 10.0));
        Box::new(move |p| linalg::add(p, t))
    })?;
    let scaling = transform_check("gc_scale_invariance", cfg, derive_seed(seed, 2), |rng| {
        let s = rng.range(0.01f64.ln(), 100f64.ln()).exp();
        Box::new(move |p| linalg::scale(p, s))
    })?;
    Ok(InvarianceReport {
        seed,
        checks: vec![
            translation,
            scaling,
            ste_check(cfg, derive_seed(seed, 3))?,
            first_layer_check(cfg, derive_seed(seed, 4))?,
            orl_identity_check(cfg, derive_seed(seed, 5))?,
            permutation_check(cfg, derive_seed(seed, 6))?,
        ],
    })
}
