//! The hybrid-scope layer.
//!
//! Two paths are summed per point. The geometric path runs a graph
//! convolution over a receptive field (feature-distance neighbors, except in
//! the first layer) followed by the outlier-robust block. The encoding path
//! is a plain affine map that keeps the absolute scale and position the
//! geometric path discards.

mod config;
mod encoder;
mod linear;

pub use config::{EncoderArch, LayerArch, PoolArch};
pub use encoder::{
    hs_encoder_backward, hs_encoder_forward, hs_encoder_forward_tape, push_layer, push_layer_grad, read_layer,
    EncoderConfig, EncoderGrad, EncoderTape, PoolStage, StageTape,
};
pub use linear::{LinearGrad, LinearMap};

use crate::error::{check_len, invalid, Result};
use crate::exec;
use crate::graphconv::{gc_backward_tape, gc_forward_tape, FeatureMap, GcGrad, GcLayer, GcTape};
use crate::neighbors::{knn_features, knn_points, NeighborIndex};
use crate::pointcloud::PointCloud;
use crate::rng::Rng;

/// Point positions as an `N x 3` feature map.
pub fn positions(pc: &PointCloud) -> FeatureMap {
    FeatureMap::from_vec(pc.len(), 3, pc.points().iter().flatten().copied().collect())
}

pub fn ste_forward(input: &FeatureMap, ste: &LinearMap) -> Result<FeatureMap> {
    ste.forward(input)
}

/// Intermediates of the outlier-robust block.
#[derive(Clone, Debug)]
pub struct OrlTape {
    /// `sources[n * D + c]` = row that won the local max for `(n, c)`.
    pub sources: Vec<usize>,
    pub margins: Vec<f64>,
    pub global: Vec<f64>,
}

/// `out_n = f_n + orl([f_global, f_n])`, where `f_global` is the mean over
/// points of the channel max across each point and its neighbors.
pub fn orl_forward(pc: &PointCloud, fm: &FeatureMap, rfp: &NeighborIndex, orl: &LinearMap) -> Result<FeatureMap> {
    Ok(orl_forward_tape(pc, fm, rfp, orl)?.0)
}

pub fn orl_forward_tape(
    pc: &PointCloud,
    fm: &FeatureMap,
    rfp: &NeighborIndex,
    orl: &LinearMap,
) -> Result<(FeatureMap, OrlTape)> {
    let (n, d) = (fm.rows(), fm.cols());
    check_len("feature rows vs points", pc.len(), n)?;
    check_len("neighbor rows vs points", n, rfp.len())?;
    check_len("orl input dimension", 2 * d, orl.d_in())?;
    check_len("orl output dimension", d, orl.d_out())?;

    let local = exec::map_range(n, |i| {
        let mut vals = fm.row(i).to_vec();
        let mut srcs = vec![i; d];
        let mut second = vec![f64::NEG_INFINITY; d];
        for &j in rfp.neighbors(i) {
            for c in 0..d {
                let v = fm.get(j, c);
                if v > vals[c] {
                    second[c] = vals[c];
                    vals[c] = v;
                    srcs[c] = j;
                } else if v > second[c] {
                    second[c] = v;
                }
            }
        }
        let gaps: Vec<f64> = vals.iter().zip(&second).map(|(a, b)| a - b).collect();
        (vals, srcs, gaps)
    });
    let mut global = vec![0.0; d];
    let mut sources = Vec::with_capacity(n * d);
    let mut margins = Vec::with_capacity(n * d);
    for (vals, srcs, gaps) in local {
        for (g, v) in global.iter_mut().zip(&vals) {
            *g += v;
        }
        sources.extend(srcs);
        margins.extend(gaps);
    }
    global.iter_mut().for_each(|g| *g /= n as f64);

    let rows = exec::map_range(n, |i| {
        let mut z = global.clone();
        z.extend_from_slice(fm.row(i));
        let mut out = vec![0.0; d];
        orl.apply(&z, &mut out);
        for (o, &f) in out.iter_mut().zip(fm.row(i)) {
            // `0.0 + f` would turn an input -0.0 into +0.0
            *o = if *o == 0.0 { f } else { *o + f };
        }
        out
    });
    let out = FeatureMap::new(n, d, rows.concat())?;
    Ok((
        out,
        OrlTape {
            sources,
            margins,
            global,
        },
    ))
}

pub fn orl_backward(
    fm: &FeatureMap,
    orl: &LinearMap,
    tape: &OrlTape,
    grad_out: &FeatureMap,
) -> Result<(FeatureMap, LinearGrad)> {
    let (n, d) = (fm.rows(), fm.cols());
    check_len("orl gradient rows", n, grad_out.rows())?;
    check_len("orl gradient columns", d, grad_out.cols())?;
    let z = FeatureMap::from_vec(
        n,
        2 * d,
        (0..n)
            .flat_map(|i| tape.global.iter().chain(fm.row(i)).copied().collect::<Vec<_>>())
            .collect(),
    );
    let (grad_z, grad_lin) = orl.backward(&z, grad_out)?;

    // residual plus the f_n half of the concatenation
    let mut grad = grad_out.clone();
    let mut grad_global = vec![0.0; d];
    for i in 0..n {
        let gz = grad_z.row(i);
        for (g, v) in grad_global.iter_mut().zip(&gz[..d]) {
            *g += v;
        }
        for (g, v) in grad.row_mut(i).iter_mut().zip(&gz[d..]) {
            *g += v;
        }
    }
    // the mean spreads the global gradient evenly over the local maxima
    for i in 0..n {
        for c in 0..d {
            let src = tape.sources[i * d + c];
            grad.data_mut()[src * d + c] += grad_global[c] / n as f64;
        }
    }
    Ok((grad, grad_lin))
}

/// Neighbor metric for the convolution in layers after the first.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Receptive {
    /// Feature distance (RF-F).
    Feature,
    /// Point distance (RF-P), used by the plain-GC baseline.
    Point,
}

#[derive(Clone, Debug, PartialEq)]
pub struct HsLayerParams {
    pub gc: GcLayer,
    /// `None` drops the encoding path.
    pub ste: Option<LinearMap>,
    /// `None` skips the outlier-robust block, which is the same map as zero parameters.
    pub orl: Option<LinearMap>,
    pub m_rff: usize,
    pub m_orl: usize,
    pub is_first_layer: bool,
    pub receptive: Receptive,
}

impl HsLayerParams {
    /// A first layer convolves all-ones features of width 1 and encodes 3D positions.
    pub fn init(d_in: usize, d_out: usize, supports: usize, m: usize, first: bool, rng: &mut Rng) -> Self {
        let (gc_in, ste_in) = if first { (1, 3) } else { (d_in, d_in) };
        let gc = GcLayer::init(gc_in, d_out, supports, rng);
        let ste = LinearMap::init(ste_in, d_out, rng);
        let orl = LinearMap::init(2 * d_out, d_out, rng);
        Self {
            gc,
            ste: Some(ste),
            orl: Some(orl),
            m_rff: m,
            m_orl: m,
            is_first_layer: first,
            receptive: Receptive::Feature,
        }
    }

    pub fn d_out(&self) -> usize {
        self.gc.d_out()
    }

    /// Width of the feature map this layer consumes (3 for the first layer).
    pub fn d_in(&self) -> usize {
        if self.is_first_layer {
            3
        } else {
            self.gc.d_in()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let d = self.d_out();
        if let Some(ste) = &self.ste {
            check_len("ste input dimension", self.d_in(), ste.d_in())?;
            check_len("ste output dimension", d, ste.d_out())?;
        }
        if let Some(orl) = &self.orl {
            check_len("orl input dimension", 2 * d, orl.d_in())?;
            check_len("orl output dimension", d, orl.d_out())?;
            if self.m_orl == 0 {
                return Err(invalid("m_orl must be at least 1"));
            }
        }
        if self.m_rff == 0 {
            return Err(invalid("m_rff must be at least 1"));
        }
        Ok(())
    }

    pub fn zero_grad(&self) -> HsLayerGrad {
        HsLayerGrad {
            gc: self.gc.zero_grad(),
            ste: self.ste.as_ref().map(LinearMap::zero_grad),
            orl: self.orl.as_ref().map(LinearMap::zero_grad),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct HsLayerGrad {
    pub gc: GcGrad,
    pub ste: Option<LinearGrad>,
    pub orl: Option<LinearGrad>,
}

/// Neighbor selections used by one layer. Passing them back into the
/// forward pass freezes the discrete kNN choice.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerNeighbors {
    pub gc: NeighborIndex,
    pub orl: Option<NeighborIndex>,
}

pub fn layer_neighbors(pc: &PointCloud, fm: &FeatureMap, params: &HsLayerParams) -> Result<LayerNeighbors> {
    let by_point = params.is_first_layer || params.receptive == Receptive::Point;
    let gc = if by_point {
        knn_points(pc, params.m_rff)?
    } else {
        check_len("feature rows vs points", pc.len(), fm.rows())?;
        knn_features(fm, params.m_rff)?
    };
    let orl = match &params.orl {
        None => None,
        Some(_) if by_point && params.m_orl == params.m_rff => Some(gc.clone()),
        Some(_) => Some(knn_points(pc, params.m_orl)?),
    };
    Ok(LayerNeighbors { gc, orl })
}

#[derive(Clone, Debug)]
pub struct HsLayerTape {
    pub neighbors: LayerNeighbors,
    pub gc: GcTape,
    pub orl: Option<OrlTape>,
    pub output: FeatureMap,
}

impl HsLayerTape {
    /// Smallest winner/runner-up gap over every max in the layer.
    pub fn min_margin(&self) -> f64 {
        let orl = self.orl.iter().flat_map(|t| t.margins.iter());
        self.gc.margins.iter().chain(orl).copied().fold(f64::INFINITY, f64::min)
    }

    /// Every max winner in the layer, GC first, then ORL.
    pub fn winners(&self) -> Vec<usize> {
        let orl = self.orl.iter().flat_map(|t| t.sources.iter());
        self.gc.winners.iter().chain(orl).copied().collect()
    }
}

/// First-layer inputs are ignored: the convolution sees all-ones features
/// and the encoding path sees the point positions.
pub fn hs_layer_forward(pc: &PointCloud, fm: &FeatureMap, params: &HsLayerParams) -> Result<FeatureMap> {
    Ok(hs_layer_forward_tape(pc, fm, params, None)?.output)
}

fn gc_input(pc: &PointCloud, fm: &FeatureMap, params: &HsLayerParams) -> FeatureMap {
    if params.is_first_layer {
        FeatureMap::filled(pc.len(), params.gc.d_in(), 1.0)
    } else {
        fm.clone()
    }
}

fn ste_input(pc: &PointCloud, fm: &FeatureMap, params: &HsLayerParams) -> FeatureMap {
    if params.is_first_layer {
        positions(pc)
    } else {
        fm.clone()
    }
}

pub fn hs_layer_forward_tape(
    pc: &PointCloud,
    fm: &FeatureMap,
    params: &HsLayerParams,
    frozen: Option<&LayerNeighbors>,
) -> Result<HsLayerTape> {
    params.validate()?;
    if !params.is_first_layer {
        check_len("feature rows vs points", pc.len(), fm.rows())?;
        check_len("layer input dimension", params.d_in(), fm.cols())?;
    }
    let needed = params.m_rff.max(if params.orl.is_some() { params.m_orl } else { 0 }) + 1;
    if pc.len() < needed {
        return Err(crate::Error::TooFewPoints { needed, got: pc.len() });
    }
    let neighbors = match frozen {
        Some(n) => {
            check_len("frozen neighbor rows", pc.len(), n.gc.len())?;
            n.clone()
        }
        None => layer_neighbors(pc, fm, params)?,
    };
    let gc = gc_forward_tape(pc, &gc_input(pc, fm, params), &neighbors.gc, &params.gc)?;
    let (mut output, orl) = match (&params.orl, &neighbors.orl) {
        (Some(orl), Some(rfp)) => {
            let (out, tape) = orl_forward_tape(pc, &gc.output, rfp, orl)?;
            (out, Some(tape))
        }
        (Some(_), None) => return Err(invalid("frozen neighbors lack the orl receptive field")),
        (None, _) => (gc.output.clone(), None),
    };
    if let Some(ste) = &params.ste {
        output.add_assign(&ste_forward(&ste_input(pc, fm, params), ste)?);
    }
    Ok(HsLayerTape {
        neighbors,
        gc,
        orl,
        output,
    })
}

pub fn hs_layer_backward(
    pc: &PointCloud,
    fm: &FeatureMap,
    params: &HsLayerParams,
    grad_out: &FeatureMap,
) -> Result<(FeatureMap, HsLayerGrad)> {
    let tape = hs_layer_forward_tape(pc, fm, params, None)?;
    hs_layer_backward_tape(pc, fm, params, &tape, grad_out)
}

/// Gradients with the tape's neighbor selections held fixed. The first
/// layer returns a zero input gradient since its inputs are data.
pub fn hs_layer_backward_tape(
    pc: &PointCloud,
    fm: &FeatureMap,
    params: &HsLayerParams,
    tape: &HsLayerTape,
    grad_out: &FeatureMap,
) -> Result<(FeatureMap, HsLayerGrad)> {
    check_len("layer gradient rows", pc.len(), grad_out.rows())?;
    check_len("layer gradient columns", params.d_out(), grad_out.cols())?;

    let (grad_gc_out, orl_grad) = match (&params.orl, &tape.orl) {
        (Some(orl), Some(orl_tape)) => {
            let (g, lin) = orl_backward(&tape.gc.output, orl, orl_tape, grad_out)?;
            (g, Some(lin))
        }
        _ => (grad_out.clone(), None),
    };
    let (grad_gc_in, gc_grad) = gc_backward_tape(
        pc,
        &gc_input(pc, fm, params),
        &tape.neighbors.gc,
        &params.gc,
        &tape.gc,
        &grad_gc_out,
    )?;
    let (grad_ste_in, ste_grad) = match &params.ste {
        Some(ste) => {
            let (g, lin) = ste.backward(&ste_input(pc, fm, params), grad_out)?;
            (Some(g), Some(lin))
        }
        None => (None, None),
    };

    let grad_fm = if params.is_first_layer {
        FeatureMap::zeros(pc.len(), fm.cols())
    } else {
        let mut g = grad_gc_in;
        if let Some(s) = &grad_ste_in {
            g.add_assign(s);
        }
        g
    };
    Ok((
        grad_fm,
        HsLayerGrad {
            gc: gc_grad,
            ste: ste_grad,
            orl: orl_grad,
        },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graphconv::gc_forward;

    fn random_cloud(n: usize, rng: &mut Rng) -> PointCloud {
        PointCloud::new((0..n).map(|_| [rng.normal(), rng.normal(), rng.normal()]).collect()).unwrap()
    }

    fn random_features(n: usize, d: usize, rng: &mut Rng) -> FeatureMap {
        FeatureMap::new(n, d, (0..n * d).map(|_| rng.normal()).collect()).unwrap()
    }

    #[test]
    fn ste_zero_weights_gives_bias() {
        let ste = LinearMap::new(3, 2, vec![0.0; 6], vec![0.5, -1.0]).unwrap();
        let mut rng = Rng::new(0);
        let out = ste_forward(&random_features(4, 3, &mut rng), &ste).unwrap();
        for i in 0..4 {
            assert_eq!(out.row(i), &[0.5, -1.0]);
        }
    }

    #[test]
    fn ste_identity() {
        let mut rng = Rng::new(1);
        let x = random_features(5, 4, &mut rng);
        assert_eq!(ste_forward(&x, &LinearMap::identity(4)).unwrap(), x);
    }

    #[test]
    fn ste_matches_matmul() {
        let mut rng = Rng::new(2);
        let pc = random_cloud(5, &mut rng);
        let w: Vec<f64> = (0..12).map(|_| rng.normal()).collect();
        let b: Vec<f64> = (0..4).map(|_| rng.normal()).collect();
        let ste = LinearMap::new(3, 4, w.clone(), b.clone()).unwrap();
        let out = ste_forward(&positions(&pc), &ste).unwrap();
        for n in 0..5 {
            let p = pc.point(n);
            for j in 0..4 {
                let expect = b[j] + p[0] * w[j] + p[1] * w[4 + j] + p[2] * w[8 + j];
                assert!((out.get(n, j) - expect).abs() < 1e-12);
            }
        }
        assert!(ste_forward(&random_features(5, 2, &mut rng), &ste).is_err());
    }

    #[test]
    fn orl_constant_features() {
        let mut rng = Rng::new(3);
        let pc = random_cloud(10, &mut rng);
        let fm = FeatureMap::filled(10, 2, 0.75);
        let orl = LinearMap::init(4, 2, &mut rng);
        let rfp = knn_points(&pc, 3).unwrap();
        let out = orl_forward(&pc, &fm, &rfp, &orl).unwrap();
        let mut adj = vec![0.0; 2];
        orl.apply(&[0.75; 4], &mut adj);
        for i in 0..10 {
            assert_eq!(out.get(i, 0), 0.75 + adj[0]);
            assert_eq!(out.get(i, 1), 0.75 + adj[1]);
        }
    }

    #[test]
    fn orl_zero_is_identity() {
        let mut rng = Rng::new(4);
        let pc = random_cloud(20, &mut rng);
        let fm = random_features(20, 5, &mut rng);
        let rfp = knn_points(&pc, 4).unwrap();
        let out = orl_forward(&pc, &fm, &rfp, &LinearMap::zeros(10, 5)).unwrap();
        assert_eq!(out, fm);
    }

    #[test]
    fn orl_hand_instance() {
        // six points on a line at x = 0, 1, 2, 4, 7, 11
        let xs = [0.0, 1.0, 2.0, 4.0, 7.0, 11.0];
        let pc = PointCloud::new(xs.iter().map(|&x| [x, 0.0, 0.0]).collect()).unwrap();
        let f = [
            [1.0, 0.0],
            [-2.0, 3.0],
            [0.5, 0.5],
            [4.0, -1.0],
            [0.0, 2.0],
            [-1.0, -1.0],
        ];
        let fm = FeatureMap::from_rows(&f.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap();
        let rfp = knn_points(&pc, 2).unwrap();
        // neighbor lists by hand
        let expect_nbrs: [[usize; 2]; 6] = [[1, 2], [0, 2], [1, 0], [2, 1], [3, 5], [4, 3]];
        for (i, e) in expect_nbrs.iter().enumerate() {
            assert_eq!(rfp.neighbors(i), e);
        }
        let g: Vec<[f64; 2]> = (0..6)
            .map(|i| {
                let mut m = f[i];
                for &j in &expect_nbrs[i] {
                    m = [m[0].max(f[j][0]), m[1].max(f[j][1])];
                }
                m
            })
            .collect();
        let global = [
            g.iter().map(|v| v[0]).sum::<f64>() / 6.0,
            g.iter().map(|v| v[1]).sum::<f64>() / 6.0,
        ];
        let w = vec![1.0, 0.0, 0.0, 2.0, -1.0, 0.5, 0.25, 1.0];
        let b = vec![0.1, -0.2];
        let orl = LinearMap::new(4, 2, w.clone(), b.clone()).unwrap();
        let out = orl_forward(&pc, &fm, &rfp, &orl).unwrap();
        for i in 0..6 {
            let z = [global[0], global[1], f[i][0], f[i][1]];
            for c in 0..2 {
                let lin: f64 = b[c] + (0..4).map(|k| z[k] * w[k * 2 + c]).sum::<f64>();
                assert!((out.get(i, c) - (f[i][c] + lin)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn geometric_path_only_when_ste_zero() {
        let mut rng = Rng::new(5);
        let pc = random_cloud(30, &mut rng);
        let fm = random_features(30, 4, &mut rng);
        let mut p = HsLayerParams::init(4, 3, 1, 5, false, &mut rng);
        p.ste = Some(LinearMap::zeros(4, 3));
        let out = hs_layer_forward(&pc, &fm, &p).unwrap();
        let nbrs = knn_features(&fm, 5).unwrap();
        let g = gc_forward(&pc, &fm, &nbrs, &p.gc).unwrap();
        let expect = orl_forward(&pc, &g, &knn_points(&pc, 5).unwrap(), p.orl.as_ref().unwrap()).unwrap();
        assert_eq!(out, expect);
    }

    #[test]
    fn ste_only_when_geometry_zero() {
        let mut rng = Rng::new(6);
        let pc = random_cloud(30, &mut rng);
        let mut p = HsLayerParams::init(3, 4, 2, 5, true, &mut rng);
        p.gc = GcLayer::zeros(1, 4, 2);
        p.gc.enforce_support_norms();
        p.orl = Some(LinearMap::zeros(8, 4));
        let out = hs_layer_forward(&pc, &positions(&pc), &p).unwrap();
        let expect = ste_forward(&positions(&pc), p.ste.as_ref().unwrap()).unwrap();
        assert_eq!(out, expect);
    }

    #[test]
    fn first_layer_uses_point_neighbors() {
        let mut rng = Rng::new(7);
        let pc = random_cloud(40, &mut rng);
        let p = HsLayerParams::init(3, 4, 1, 6, true, &mut rng);
        let tape = hs_layer_forward_tape(&pc, &positions(&pc), &p, None).unwrap();
        assert_eq!(tape.neighbors.gc, knn_points(&pc, 6).unwrap());
    }

    #[test]
    fn too_few_points() {
        let mut rng = Rng::new(8);
        let pc = random_cloud(5, &mut rng);
        let p = HsLayerParams::init(3, 4, 1, 5, true, &mut rng);
        assert!(matches!(
            hs_layer_forward(&pc, &positions(&pc), &p),
            Err(crate::Error::TooFewPoints { .. })
        ));
    }

    #[test]
    fn zero_grad_out_gives_zero_grads() {
        let mut rng = Rng::new(9);
        let pc = random_cloud(20, &mut rng);
        let fm = random_features(20, 3, &mut rng);
        let p = HsLayerParams::init(3, 4, 2, 4, false, &mut rng);
        let (g_fm, g) = hs_layer_backward(&pc, &fm, &p, &FeatureMap::zeros(20, 4)).unwrap();
        assert!(g_fm.data().iter().all(|&v| v == 0.0));
        assert_eq!(g, p.zero_grad());
    }
}
