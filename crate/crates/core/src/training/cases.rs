//! Randomized gradient-check instances for each differentiable block.
//!
//! Every case scores the block output with a fixed random projection
//! `L = Σ r ⊙ out`, so the upstream gradient is just `r`. Input features are
//! exposed as an extra `input.features` tensor where the block consumes them,
//! which checks the input gradient alongside the parameters.

use super::{CheckCase, PoseModel, Probe, ToySample, ToyTaskSpec};
use crate::error::Result;
use crate::graphconv::{gc_backward_tape, gc_forward_tape, FeatureMap, GcLayer};
use crate::hslayer::{
    hs_encoder_backward, hs_encoder_forward_tape, hs_layer_backward_tape, hs_layer_forward_tape, orl_backward,
    orl_forward_tape, push_layer, push_layer_grad, read_layer, ste_forward, EncoderArch, HsLayerParams, LayerArch,
    LinearMap, PoolArch,
};
use crate::neighbors::knn_points;
use crate::params::{ParamReader, ParamVector};
use crate::pointcloud::PointCloud;
use crate::rng::{derive_seed, Rng};

/// Size of a gradient-check instance.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct CaseShape {
    pub n: usize,
    pub d_in: usize,
    pub d_out: usize,
    pub supports: usize,
    pub m: usize,
}

impl Default for CaseShape {
    fn default() -> Self {
        Self {
            n: 24,
            d_in: 6,
            d_out: 8,
            supports: 2,
            m: 4,
        }
    }
}

const INPUT: &str = "input.features";

fn cloud(n: usize, rng: &mut Rng) -> Result<PointCloud> {
    PointCloud::new((0..n).map(|_| [rng.normal(), rng.normal(), rng.normal()]).collect())
}

fn features(n: usize, d: usize, rng: &mut Rng) -> Result<FeatureMap> {
    FeatureMap::new(n, d, (0..n * d).map(|_| rng.normal()).collect())
}

fn project(out: &FeatureMap, r: &FeatureMap) -> Vec<f64> {
    out.data().iter().zip(r.data()).map(|(a, b)| a * b).collect()
}

fn randomize_bias(m: &mut LinearMap, rng: &mut Rng) {
    let b: Vec<f64> = (0..m.d_out()).map(|_| 0.5 * rng.normal()).collect();
    let w = m.weights().to_vec();
    m.set_flat(&w, &b).expect("finite values with the right shapes");
}

fn push_linear(pv: &mut ParamVector, prefix: &str, m: &LinearMap) -> Result<()> {
    pv.push(format!("{prefix}.weights"), &[m.d_in(), m.d_out()], m.weights())?;
    pv.push(format!("{prefix}.bias"), &[m.d_out()], m.bias())
}

fn read_linear(r: &mut ParamReader<'_>, prefix: &str, m: &mut LinearMap) -> Result<()> {
    let w = r.take(&format!("{prefix}.weights"), &[m.d_in(), m.d_out()])?;
    let b = r.take(&format!("{prefix}.bias"), &[m.d_out()])?;
    m.set_flat(w, b)
}

fn read_features(r: &mut ParamReader<'_>, like: &FeatureMap) -> Result<FeatureMap> {
    let v = r.take(INPUT, &[like.rows(), like.cols()])?;
    FeatureMap::new(like.rows(), like.cols(), v.to_vec())
}

fn push_gc(pv: &mut ParamVector, g: &GcLayer) -> Result<()> {
    let (di, dout, s) = (g.d_in(), g.d_out(), g.supports());
    pv.push("gc.center", &[dout, di], g.center_weights())?;
    pv.push("gc.support_weights", &[dout, s, di], g.support_weights())?;
    pv.push("gc.support_dirs", &[dout, s, 3], g.support_dirs())
}

/// Graph convolution on a random cloud with point-distance neighbors.
pub fn gc_case(shape: CaseShape, seed: u64) -> Result<CheckCase> {
    let mut rng = Rng::new(seed);
    let pc = cloud(shape.n, &mut rng)?;
    let fm = features(shape.n, shape.d_in, &mut rng)?;
    let layer = GcLayer::init(shape.d_in, shape.d_out, shape.supports, &mut rng);
    let nbrs = knn_points(&pc, shape.m)?;
    let r = features(shape.n, shape.d_out, &mut rng)?;

    let mut params = ParamVector::new();
    push_gc(&mut params, &layer)?;
    params.push(INPUT, &[fm.rows(), fm.cols()], fm.data())?;

    let tape = gc_forward_tape(&pc, &fm, &nbrs, &layer)?;
    let (g_fm, g) = gc_backward_tape(&pc, &fm, &nbrs, &layer, &tape, &r)?;
    let mut grad = ParamVector::new();
    grad.push("gc.center", &[shape.d_out, shape.d_in], &g.center)?;
    grad.push(
        "gc.support_weights",
        &[shape.d_out, shape.supports, shape.d_in],
        &g.support_weights,
    )?;
    grad.push("gc.support_dirs", &[shape.d_out, shape.supports, 3], &g.support_dirs)?;
    grad.push(INPUT, &[fm.rows(), fm.cols()], g_fm.data())?;
    let winners = tape.winners;

    let loss = move |p: &ParamVector| -> Result<Probe> {
        let mut rd = p.reader();
        let mut l = layer.clone();
        let c = rd.take("gc.center", &[l.d_out(), l.d_in()])?;
        let w = rd.take("gc.support_weights", &[l.d_out(), l.supports(), l.d_in()])?;
        let k = rd.take("gc.support_dirs", &[l.d_out(), l.supports(), 3])?;
        l.set_flat(c, w, k)?;
        let f = read_features(&mut rd, &fm)?;
        rd.finish()?;
        let t = gc_forward_tape(&pc, &f, &nbrs, &l)?;
        Ok(Probe {
            terms: project(&t.output, &r),
            winners: t.winners,
        })
    };
    Ok(CheckCase {
        params,
        grad,
        winners,
        loss: Box::new(loss),
    })
}

/// Affine encoding map on random inputs.
pub fn ste_case(shape: CaseShape, seed: u64) -> Result<CheckCase> {
    let mut rng = Rng::new(seed);
    let x = features(shape.n, shape.d_in, &mut rng)?;
    let mut ste = LinearMap::init(shape.d_in, shape.d_out, &mut rng);
    randomize_bias(&mut ste, &mut rng);
    let r = features(shape.n, shape.d_out, &mut rng)?;

    let mut params = ParamVector::new();
    push_linear(&mut params, "ste", &ste)?;
    params.push(INPUT, &[x.rows(), x.cols()], x.data())?;
    let (g_x, g) = ste.backward(&x, &r)?;
    let mut grad = ParamVector::new();
    grad.push("ste.weights", &[shape.d_in, shape.d_out], &g.weights)?;
    grad.push("ste.bias", &[shape.d_out], &g.bias)?;
    grad.push(INPUT, &[x.rows(), x.cols()], g_x.data())?;

    let loss = move |p: &ParamVector| -> Result<Probe> {
        let mut rd = p.reader();
        let mut m = ste.clone();
        read_linear(&mut rd, "ste", &mut m)?;
        let f = read_features(&mut rd, &x)?;
        rd.finish()?;
        Ok(Probe {
            terms: project(&ste_forward(&f, &m)?, &r),
            winners: Vec::new(),
        })
    };
    Ok(CheckCase {
        params,
        grad,
        winners: Vec::new(),
        loss: Box::new(loss),
    })
}

/// Outlier-robust block on random features (`d_out` wide).
pub fn orl_case(shape: CaseShape, seed: u64) -> Result<CheckCase> {
    let mut rng = Rng::new(seed);
    let d = shape.d_out;
    let pc = cloud(shape.n, &mut rng)?;
    let fm = features(shape.n, d, &mut rng)?;
    let mut orl = LinearMap::init(2 * d, d, &mut rng);
    randomize_bias(&mut orl, &mut rng);
    let rfp = knn_points(&pc, shape.m)?;
    let r = features(shape.n, d, &mut rng)?;

    let mut params = ParamVector::new();
    push_linear(&mut params, "orl", &orl)?;
    params.push(INPUT, &[fm.rows(), fm.cols()], fm.data())?;
    let (_, tape) = orl_forward_tape(&pc, &fm, &rfp, &orl)?;
    let (g_fm, g) = orl_backward(&fm, &orl, &tape, &r)?;
    let mut grad = ParamVector::new();
    grad.push("orl.weights", &[2 * d, d], &g.weights)?;
    grad.push("orl.bias", &[d], &g.bias)?;
    grad.push(INPUT, &[fm.rows(), fm.cols()], g_fm.data())?;
    let winners = tape.sources;

    let loss = move |p: &ParamVector| -> Result<Probe> {
        let mut rd = p.reader();
        let mut m = orl.clone();
        read_linear(&mut rd, "orl", &mut m)?;
        let f = read_features(&mut rd, &fm)?;
        rd.finish()?;
        let (out, t) = orl_forward_tape(&pc, &f, &rfp, &m)?;
        Ok(Probe {
            terms: project(&out, &r),
            winners: t.sources,
        })
    };
    Ok(CheckCase {
        params,
        grad,
        winners,
        loss: Box::new(loss),
    })
}

/// One full HS-layer. A non-first layer also exposes its input features.
pub fn layer_case(shape: CaseShape, first: bool, seed: u64) -> Result<CheckCase> {
    let mut rng = Rng::new(seed);
    let pc = cloud(shape.n, &mut rng)?;
    let d_in = if first { 3 } else { shape.d_in };
    let fm = features(shape.n, d_in, &mut rng)?;
    let mut layer = HsLayerParams::init(d_in, shape.d_out, shape.supports, shape.m, first, &mut rng);
    for m in [&mut layer.ste, &mut layer.orl].into_iter().flatten() {
        randomize_bias(m, &mut rng);
    }
    let r = features(shape.n, shape.d_out, &mut rng)?;

    let mut params = ParamVector::new();
    push_layer(&mut params, "hs", &layer);
    if !first {
        params.push(INPUT, &[fm.rows(), fm.cols()], fm.data())?;
    }
    let tape = hs_layer_forward_tape(&pc, &fm, &layer, None)?;
    let (g_fm, g) = hs_layer_backward_tape(&pc, &fm, &layer, &tape, &r)?;
    let mut grad = ParamVector::new();
    push_layer_grad(&mut grad, "hs", &layer, &g)?;
    if !first {
        grad.push(INPUT, &[fm.rows(), fm.cols()], g_fm.data())?;
    }
    let winners = tape.winners();
    let frozen = tape.neighbors;

    let loss = move |p: &ParamVector| -> Result<Probe> {
        let mut rd = p.reader();
        let mut l = layer.clone();
        read_layer(&mut rd, "hs", &mut l)?;
        let f = if first {
            fm.clone()
        } else {
            read_features(&mut rd, &fm)?
        };
        rd.finish()?;
        let t = hs_layer_forward_tape(&pc, &f, &l, Some(&frozen))?;
        Ok(Probe {
            terms: project(&t.output, &r),
            winners: t.winners(),
        })
    };
    Ok(CheckCase {
        params,
        grad,
        winners,
        loss: Box::new(loss),
    })
}

/// Two stacked layers with a pooling stage between them.
pub fn encoder_case(shape: CaseShape, seed: u64) -> Result<CheckCase> {
    let mut rng = Rng::new(seed);
    let pc = cloud(shape.n, &mut rng)?;
    let layer = LayerArch {
        d_out: shape.d_out,
        supports: shape.supports,
        m_rff: shape.m,
        m_orl: shape.m,
    };
    let arch = EncoderArch {
        seed: derive_seed(seed, 1),
        layers: vec![layer; 2],
        pools: vec![PoolArch {
            after: 0,
            keep: (shape.n * 3 / 4).max(shape.m + 1),
            m: shape.m,
        }],
        ..EncoderArch::default()
    };
    let mut cfg = arch.build()?;
    for l in &mut cfg.layers {
        for m in [&mut l.ste, &mut l.orl].into_iter().flatten() {
            randomize_bias(m, &mut rng);
        }
    }
    let tape = hs_encoder_forward_tape(&pc, &cfg, None)?;
    let r = features(tape.features.rows(), tape.features.cols(), &mut rng)?;
    let g = hs_encoder_backward(&cfg, &tape, &r)?;
    let params = cfg.to_params();
    let grad = cfg.grad_to_params(&g)?;
    let winners = tape.winners();
    let frozen = tape.neighbors();

    let loss = move |p: &ParamVector| -> Result<Probe> {
        let mut c = cfg.clone();
        c.load_params(p)?;
        let t = hs_encoder_forward_tape(&pc, &c, Some(&frozen))?;
        Ok(Probe {
            terms: project(&t.features, &r),
            winners: t.winners(),
        })
    };
    Ok(CheckCase {
        params,
        grad,
        winners,
        loss: Box::new(loss),
    })
}

/// The full pose model (encoder, mean readout, head, cosine loss) on one toy sample.
pub fn pose_case(arch: &EncoderArch, n_points: usize, seed: u64) -> Result<CheckCase> {
    let model = PoseModel::new(&arch.with_seed(derive_seed(seed, 1)))?;
    let spec = ToyTaskSpec {
        n_points,
        ..ToyTaskSpec::default()
    };
    let sample = ToySample::generate(&spec, derive_seed(seed, 2))?;
    let tape = hs_encoder_forward_tape(&sample.cloud, &model.encoder, None)?;
    let winners = tape.winners();
    let frozen = tape.neighbors();
    let (_, grad) = model.loss_and_grad(&sample.cloud, sample.label)?;
    let params = model.to_params();

    let loss = move |p: &ParamVector| -> Result<Probe> {
        let mut m = model.clone();
        m.load_params(p)?;
        let t = hs_encoder_forward_tape(&sample.cloud, &m.encoder, Some(&frozen))?;
        let pooled = t.features.column_mean();
        let mut h = [0.0; 3];
        m.head.apply(&pooled, &mut h);
        let n = (h[0] * h[0] + h[1] * h[1] + h[2] * h[2]).sqrt();
        Ok(Probe {
            terms: vec![1.0 - (h[0] * sample.label[0] + h[1] * sample.label[1] + h[2] * sample.label[2]) / n],
            winners: t.winners(),
        })
    };
    Ok(CheckCase {
        params,
        grad,
        winners,
        loss: Box::new(loss),
    })
}
