//! 3D graph convolution over kNN receptive fields.
//!
//! A layer holds one deformable kernel per output channel. Kernel `c` has a
//! center weight `w_C` and `S` supports, each a learnable direction `k_s` with
//! a weight `w_s`. For point `i` with neighbors `N(i)`:
//!
//! ```text
//! out[i][c] = f_i · w_C + Σ_s max_{m ∈ N(i)} (f_m · w_s) cos∠(p_m - p_i, k_s)
//! ```
//!
//! The cosine only sees directions, which makes the output invariant to
//! translating or uniformly scaling the cloud.

mod feature_map;
mod pool;

pub use feature_map::FeatureMap;
pub use pool::{graph_max_pool, graph_max_pool_backward, graph_max_pool_with_sources, Pooled};

use crate::error::{check_len, invalid, Error, Result};
use crate::exec;
use crate::linalg::{self, Vec3};
use crate::neighbors::NeighborIndex;
use crate::pointcloud::PointCloud;
use crate::rng::Rng;

/// Smallest allowed support direction norm.
pub const MIN_SUPPORT_NORM: f64 = 1e-8;
/// Neighbor offsets shorter than this have no direction; their cosine is 0.
pub const DEGENERATE_DIRECTION: f64 = 1e-12;

/// Product of the feature response `f_m · w_s` and the cosine between the
/// neighbor offset `p_m - p_i` and the support direction `k_s`.
pub fn similarity(p_i: Vec3, p_m: Vec3, f_m: &[f64], k_s: Vec3, w_s: &[f64]) -> f64 {
    let response: f64 = f_m.iter().zip(w_s).map(|(a, b)| a * b).sum();
    response * direction_cosine(linalg::sub(p_m, p_i), k_s)
}

fn direction_cosine(offset: Vec3, k: Vec3) -> f64 {
    match unit_offset(offset) {
        Some(u) => linalg::dot(u, k) / linalg::norm(k),
        None => 0.0,
    }
}

#[cfg(not(feature = "fault-sim-norm"))]
#[inline]
fn unit_offset(offset: Vec3) -> Option<Vec3> {
    let len = linalg::norm(offset);
    (len >= DEGENERATE_DIRECTION).then(|| linalg::scale(offset, 1.0 / len))
}

// Fault injection: the offset keeps its length, so the cosine scales with the cloud.
#[cfg(feature = "fault-sim-norm")]
#[inline]
fn unit_offset(offset: Vec3) -> Option<Vec3> {
    let len = linalg::norm(offset);
    (len >= DEGENERATE_DIRECTION).then_some(offset)
}

/// One kernel `{(k_C, w_C), (k_1, w_1), ..., (k_S, w_S)}`; `k_C` is the origin.
#[derive(Clone, Debug, PartialEq)]
pub struct GcKernel {
    support_dirs: Vec<Vec3>,
    center_weights: Vec<f64>,
    support_weights: Vec<Vec<f64>>,
}

impl GcKernel {
    pub fn new(support_dirs: Vec<Vec3>, center_weights: Vec<f64>, support_weights: Vec<Vec<f64>>) -> Result<Self> {
        check_len("support weight rows", support_dirs.len(), support_weights.len())?;
        for w in &support_weights {
            check_len("support weight width", center_weights.len(), w.len())?;
        }
        let all = support_dirs
            .iter()
            .flatten()
            .chain(&center_weights)
            .chain(support_weights.iter().flatten());
        if all.into_iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("kernel parameter".into()));
        }
        if support_dirs.iter().any(|k| linalg::norm(*k) < MIN_SUPPORT_NORM) {
            return Err(invalid("support direction shorter than 1e-8"));
        }
        Ok(Self {
            support_dirs,
            center_weights,
            support_weights,
        })
    }

    pub fn support_count(&self) -> usize {
        self.support_dirs.len()
    }

    pub fn support_dirs(&self) -> &[Vec3] {
        &self.support_dirs
    }

    pub fn center_weights(&self) -> &[f64] {
        &self.center_weights
    }

    pub fn support_weights(&self) -> &[Vec<f64>] {
        &self.support_weights
    }
}

/// `d_out` kernels sharing `S` and `d_in`, stored flat:
/// `center` is `d_out x d_in`, `support_weights` is `d_out x S x d_in`,
/// `support_dirs` is `d_out x S x 3`.
#[derive(Clone, Debug, PartialEq)]
pub struct GcLayer {
    d_in: usize,
    d_out: usize,
    supports: usize,
    pub(crate) center: Vec<f64>,
    pub(crate) support_weights: Vec<f64>,
    pub(crate) support_dirs: Vec<f64>,
}

/// Gradients with the same layout as [`GcLayer`].
#[derive(Clone, Debug, PartialEq)]
pub struct GcGrad {
    pub center: Vec<f64>,
    pub support_weights: Vec<f64>,
    pub support_dirs: Vec<f64>,
}

impl GcLayer {
    pub fn from_kernels(kernels: &[GcKernel]) -> Result<Self> {
        let first = kernels
            .first()
            .ok_or_else(|| invalid("layer needs at least one kernel"))?;
        let (d_in, s) = (first.center_weights.len(), first.support_count());
        let mut layer = Self::zeros(d_in, kernels.len(), s);
        for (c, k) in kernels.iter().enumerate() {
            check_len("kernel input dimension", d_in, k.center_weights.len())?;
            check_len("kernel support count", s, k.support_count())?;
            layer.center[c * d_in..(c + 1) * d_in].copy_from_slice(&k.center_weights);
            for si in 0..s {
                let o = (c * s + si) * d_in;
                layer.support_weights[o..o + d_in].copy_from_slice(&k.support_weights[si]);
                let o = (c * s + si) * 3;
                layer.support_dirs[o..o + 3].copy_from_slice(&k.support_dirs[si]);
            }
        }
        Ok(layer)
    }

    /// All weights zero and every support direction `+x`.
    pub fn zeros(d_in: usize, d_out: usize, supports: usize) -> Self {
        let mut dirs = vec![0.0; d_out * supports * 3];
        dirs.chunks_mut(3).for_each(|k| k[0] = 1.0);
        Self {
            d_in,
            d_out,
            supports,
            center: vec![0.0; d_out * d_in],
            support_weights: vec![0.0; d_out * supports * d_in],
            support_dirs: dirs,
        }
    }

    /// Directions uniform on the unit sphere; weights uniform in
    /// `±1/sqrt(d_in)`.
    pub fn init(d_in: usize, d_out: usize, supports: usize, rng: &mut Rng) -> Self {
        let mut layer = Self::zeros(d_in, d_out, supports);
        let bound = 1.0 / (d_in.max(1) as f64).sqrt();
        for k in layer.support_dirs.chunks_mut(3) {
            k.copy_from_slice(&rng.unit_vector());
        }
        for w in layer.center.iter_mut().chain(layer.support_weights.iter_mut()) {
            *w = rng.range(-bound, bound);
        }
        layer
    }

    pub fn d_in(&self) -> usize {
        self.d_in
    }

    pub fn d_out(&self) -> usize {
        self.d_out
    }

    pub fn supports(&self) -> usize {
        self.supports
    }

    pub fn kernel(&self, c: usize) -> GcKernel {
        let (d, s) = (self.d_in, self.supports);
        GcKernel {
            support_dirs: (0..s).map(|si| self.dir(c, si)).collect(),
            center_weights: self.center[c * d..(c + 1) * d].to_vec(),
            support_weights: (0..s).map(|si| self.support_w(c, si).to_vec()).collect(),
        }
    }

    pub fn center_weights(&self) -> &[f64] {
        &self.center
    }

    pub fn support_weights(&self) -> &[f64] {
        &self.support_weights
    }

    pub fn support_dirs(&self) -> &[f64] {
        &self.support_dirs
    }

    #[inline]
    fn dir(&self, c: usize, s: usize) -> Vec3 {
        let o = (c * self.supports + s) * 3;
        [self.support_dirs[o], self.support_dirs[o + 1], self.support_dirs[o + 2]]
    }

    /// Normalized support directions, indexed `c * S + s`.
    fn unit_dirs(&self) -> Vec<Vec3> {
        self.support_dirs
            .chunks(3)
            .map(|k| {
                let k = [k[0], k[1], k[2]];
                linalg::scale(k, 1.0 / linalg::norm(k))
            })
            .collect()
    }

    #[inline]
    fn support_w(&self, c: usize, s: usize) -> &[f64] {
        let o = (c * self.supports + s) * self.d_in;
        &self.support_weights[o..o + self.d_in]
    }

    /// Replace parameters from flat buffers, validating shapes and
    /// re-enforcing the minimum support direction norm.
    pub fn set_flat(&mut self, center: &[f64], support_weights: &[f64], support_dirs: &[f64]) -> Result<()> {
        check_len("center weights", self.center.len(), center.len())?;
        check_len("support weights", self.support_weights.len(), support_weights.len())?;
        check_len("support directions", self.support_dirs.len(), support_dirs.len())?;
        if center
            .iter()
            .chain(support_weights)
            .chain(support_dirs)
            .any(|v| !v.is_finite())
        {
            return Err(Error::NonFinite("graph convolution parameter".into()));
        }
        self.center.copy_from_slice(center);
        self.support_weights.copy_from_slice(support_weights);
        self.support_dirs.copy_from_slice(support_dirs);
        self.enforce_support_norms();
        Ok(())
    }

    /// Rescale any support direction shorter than [`MIN_SUPPORT_NORM`] up to
    /// that length (a zero vector becomes `+x`).
    pub fn enforce_support_norms(&mut self) {
        for k in self.support_dirs.chunks_mut(3) {
            let n = (k[0] * k[0] + k[1] * k[1] + k[2] * k[2]).sqrt();
            if n < MIN_SUPPORT_NORM {
                if n == 0.0 {
                    k.copy_from_slice(&[MIN_SUPPORT_NORM, 0.0, 0.0]);
                } else {
                    let f = MIN_SUPPORT_NORM / n;
                    k.iter_mut().for_each(|v| *v *= f);
                }
            }
        }
    }

    pub fn zero_grad(&self) -> GcGrad {
        GcGrad {
            center: vec![0.0; self.center.len()],
            support_weights: vec![0.0; self.support_weights.len()],
            support_dirs: vec![0.0; self.support_dirs.len()],
        }
    }

    fn check_inputs(&self, pc: &PointCloud, fm: &FeatureMap, nbrs: &NeighborIndex) -> Result<()> {
        check_len("feature rows vs points", pc.len(), fm.rows())?;
        check_len("neighbor rows vs points", pc.len(), nbrs.len())?;
        check_len("input feature dimension", self.d_in, fm.cols())?;
        if self.supports > 0 && nbrs.m() == 0 {
            return Err(invalid("support kernels need at least one neighbor"));
        }
        Ok(())
    }
}

/// Per point and neighbor: unit offset, or `None` when degenerate.
fn unit_offsets(pc: &PointCloud, nbrs: &NeighborIndex, i: usize) -> Vec<Option<Vec3>> {
    let p_i = pc.point(i);
    nbrs.neighbors(i)
        .iter()
        .map(|&m| unit_offset(linalg::sub(pc.point(m), p_i)))
        .collect()
}

/// `responses[m][c * S + s] = f_m · w_s^{(c)}`.
fn support_responses(fm: &FeatureMap, layer: &GcLayer) -> Vec<f64> {
    let cs = layer.d_out * layer.supports;
    let rows = exec::map_range(fm.rows(), |m| {
        let f = fm.row(m);
        (0..cs)
            .map(|j| {
                let w = &layer.support_weights[j * layer.d_in..(j + 1) * layer.d_in];
                f.iter().zip(w).map(|(a, b)| a * b).sum::<f64>()
            })
            .collect::<Vec<f64>>()
    });
    rows.concat()
}

/// Forward result plus the winning neighbor slot of every `(i, c, s)` max.
#[derive(Clone, Debug)]
pub struct GcTape {
    pub output: FeatureMap,
    /// `winners[(i * d_out + c) * S + s]` = position within `nbrs.neighbors(i)`.
    pub winners: Vec<usize>,
    /// Gap between the best and runner-up candidate of each max
    /// (`f64::INFINITY` with a single candidate).
    pub margins: Vec<f64>,
}

pub fn gc_forward(pc: &PointCloud, fm: &FeatureMap, nbrs: &NeighborIndex, layer: &GcLayer) -> Result<FeatureMap> {
    Ok(gc_forward_tape(pc, fm, nbrs, layer)?.output)
}

pub fn gc_forward_tape(pc: &PointCloud, fm: &FeatureMap, nbrs: &NeighborIndex, layer: &GcLayer) -> Result<GcTape> {
    layer.check_inputs(pc, fm, nbrs)?;
    let (d_in, d_out, s_count) = (layer.d_in, layer.d_out, layer.supports);
    let cs = d_out * s_count;
    let responses = support_responses(fm, layer);
    let k_hat = layer.unit_dirs();

    let per_point = exec::map_range(pc.len(), |i| {
        let f_i = fm.row(i);
        let units = unit_offsets(pc, nbrs, i);
        let ids = nbrs.neighbors(i);
        let mut out = vec![0.0; d_out];
        let mut winners = vec![0usize; cs];
        let mut margins = vec![f64::INFINITY; cs];
        for (c, o) in out.iter_mut().enumerate() {
            let w_c = &layer.center[c * d_in..(c + 1) * d_in];
            let mut acc: f64 = f_i.iter().zip(w_c).map(|(a, b)| a * b).sum();
            for s in 0..s_count {
                let j = c * s_count + s;
                let mut best = f64::NEG_INFINITY;
                let mut second = f64::NEG_INFINITY;
                let mut arg = 0;
                for (slot, (&m, u)) in ids.iter().zip(&units).enumerate() {
                    let cos = u.map_or(0.0, |u| linalg::dot(u, k_hat[j]));
                    let v = responses[m * cs + j] * cos;
                    if v > best {
                        second = best;
                        best = v;
                        arg = slot;
                    } else if v > second {
                        second = v;
                    }
                }
                winners[j] = arg;
                margins[j] = best - second;
                acc += best;
            }
            *o = acc;
        }
        (out, winners, margins)
    });

    let mut data = Vec::with_capacity(pc.len() * d_out);
    let mut winners = Vec::with_capacity(pc.len() * cs);
    let mut margins = Vec::with_capacity(pc.len() * cs);
    for (o, w, g) in per_point {
        data.extend(o);
        winners.extend(w);
        margins.extend(g);
    }
    let output = FeatureMap::new(pc.len(), d_out, data)?;
    Ok(GcTape {
        output,
        winners,
        margins,
    })
}

/// Gradients of [`gc_forward`] w.r.t. the input features and every kernel
/// parameter. Each max routes its gradient to the first winning neighbor.
/// Point positions are data and receive no gradient.
pub fn gc_backward(
    pc: &PointCloud,
    fm: &FeatureMap,
    nbrs: &NeighborIndex,
    layer: &GcLayer,
    grad_out: &FeatureMap,
) -> Result<(FeatureMap, GcGrad)> {
    let tape = gc_forward_tape(pc, fm, nbrs, layer)?;
    gc_backward_tape(pc, fm, nbrs, layer, &tape, grad_out)
}

pub fn gc_backward_tape(
    pc: &PointCloud,
    fm: &FeatureMap,
    nbrs: &NeighborIndex,
    layer: &GcLayer,
    tape: &GcTape,
    grad_out: &FeatureMap,
) -> Result<(FeatureMap, GcGrad)> {
    layer.check_inputs(pc, fm, nbrs)?;
    check_len("gradient rows", pc.len(), grad_out.rows())?;
    check_len("gradient columns", layer.d_out, grad_out.cols())?;
    let (n, d_in, d_out, s_count) = (pc.len(), layer.d_in, layer.d_out, layer.supports);
    let cs = d_out * s_count;

    // winner geometry per (i, c, s): neighbor id and cosine, plus the unit offset
    let geometry = exec::map_range(n, |i| {
        let units = unit_offsets(pc, nbrs, i);
        let ids = nbrs.neighbors(i);
        (0..cs)
            .map(|j| {
                let slot = tape.winners[i * cs + j];
                (ids.get(slot).copied().unwrap_or(0), units.get(slot).copied().flatten())
            })
            .collect::<Vec<_>>()
    });

    // parameter gradients: each output channel owns its parameter rows
    let per_channel = exec::map_range(d_out, |c| {
        let mut g_center = vec![0.0; d_in];
        let mut g_w = vec![0.0; s_count * d_in];
        let mut g_k = vec![0.0; s_count * 3];
        for i in 0..n {
            let g = grad_out.get(i, c);
            if g == 0.0 {
                continue;
            }
            for (gc, f) in g_center.iter_mut().zip(fm.row(i)) {
                *gc += g * f;
            }
            for s in 0..s_count {
                let (m, unit) = geometry[i][c * s_count + s];
                let Some(u) = unit else { continue };
                let k = layer.dir(c, s);
                let k_norm = linalg::norm(k);
                let k_hat = linalg::scale(k, 1.0 / k_norm);
                let cos = linalg::dot(u, k_hat);
                let f_m = fm.row(m);
                let w = layer.support_w(c, s);
                let response: f64 = f_m.iter().zip(w).map(|(a, b)| a * b).sum();
                for (gw, f) in g_w[s * d_in..(s + 1) * d_in].iter_mut().zip(f_m) {
                    *gw += g * cos * f;
                }
                // d cos / d k = (u - cos k_hat) / |k|
                for a in 0..3 {
                    g_k[s * 3 + a] += g * response * (u[a] - cos * k_hat[a]) / k_norm;
                }
            }
        }
        (g_center, g_w, g_k)
    });
    let mut grad = layer.zero_grad();
    for (c, (gc, gw, gk)) in per_channel.into_iter().enumerate() {
        grad.center[c * d_in..(c + 1) * d_in].copy_from_slice(&gc);
        grad.support_weights[c * s_count * d_in..(c + 1) * s_count * d_in].copy_from_slice(&gw);
        grad.support_dirs[c * s_count * 3..(c + 1) * s_count * 3].copy_from_slice(&gk);
    }

    // feature gradients: the center term stays on row i, the support term
    // lands on the winning neighbor, scattered in a fixed order
    let center_part = exec::map_range(n, |i| {
        let mut g_f = vec![0.0; d_in];
        for c in 0..d_out {
            let g = grad_out.get(i, c);
            for (gf, w) in g_f.iter_mut().zip(&layer.center[c * d_in..(c + 1) * d_in]) {
                *gf += g * w;
            }
        }
        g_f
    });
    let mut grad_fm = FeatureMap::from_vec(n, d_in, center_part.concat());
    let k_hat = layer.unit_dirs();
    for i in 0..n {
        for c in 0..d_out {
            let g = grad_out.get(i, c);
            if g == 0.0 {
                continue;
            }
            for s in 0..s_count {
                let j = c * s_count + s;
                let (m, unit) = geometry[i][j];
                let Some(u) = unit else { continue };
                let scale = g * linalg::dot(u, k_hat[j]);
                for (gf, w) in grad_fm.row_mut(m).iter_mut().zip(layer.support_w(c, s)) {
                    *gf += scale * w;
                }
            }
        }
    }
    Ok((grad_fm, grad))
}
