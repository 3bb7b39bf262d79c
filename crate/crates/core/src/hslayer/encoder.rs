use std::collections::BTreeMap;

use super::{
    hs_layer_backward_tape, hs_layer_forward_tape, positions, HsLayerGrad, HsLayerParams, HsLayerTape, LayerNeighbors,
    LinearGrad, LinearMap,
};
use crate::error::{check_len, invalid, Result};
use crate::graphconv::{graph_max_pool_backward, graph_max_pool_with_sources, FeatureMap, GcGrad, Pooled};
use crate::neighbors::{knn_points, NeighborIndex};
use crate::params::{ParamReader, ParamVector};
use crate::pointcloud::PointCloud;
use crate::rng::derive_seed;

/// Graph max pooling after a layer: keep `keep` points, each taking the
/// channel max over itself and its `m` nearest points.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PoolStage {
    pub keep: usize,
    pub m: usize,
}

/// A stack of HS-layers with their parameters and pooling stages.
#[derive(Clone, Debug, PartialEq)]
pub struct EncoderConfig {
    pub layers: Vec<HsLayerParams>,
    /// Keyed by the index of the layer the pool follows.
    pub pool_after: BTreeMap<usize, PoolStage>,
    pub pool_seed: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EncoderGrad {
    pub layers: Vec<HsLayerGrad>,
}

#[derive(Clone, Debug)]
pub struct StageTape {
    pub cloud: PointCloud,
    pub input: FeatureMap,
    pub layer: HsLayerTape,
    pub pool: Option<Pooled>,
}

#[derive(Clone, Debug)]
pub struct EncoderTape {
    pub stages: Vec<StageTape>,
    pub cloud: PointCloud,
    pub features: FeatureMap,
}

impl EncoderTape {
    /// Per-layer neighbor selections, to replay the same graph.
    pub fn neighbors(&self) -> Vec<LayerNeighbors> {
        self.stages.iter().map(|s| s.layer.neighbors.clone()).collect()
    }

    /// Smallest gap between a max winner and its runner-up anywhere in the stack.
    pub fn min_margin(&self) -> f64 {
        self.stages
            .iter()
            .map(|s| {
                let pool = s.pool.iter().flat_map(|p| p.margins.iter()).copied();
                pool.fold(s.layer.min_margin(), f64::min)
            })
            .fold(f64::INFINITY, f64::min)
    }

    /// Every max winner in the stack, stage by stage.
    pub fn winners(&self) -> Vec<usize> {
        let mut w = Vec::new();
        for s in &self.stages {
            w.extend(s.layer.winners());
            w.extend(s.pool.iter().flat_map(|p| p.sources.iter()));
        }
        w
    }
}

impl EncoderConfig {
    pub fn d_out(&self) -> usize {
        self.layers.last().map_or(0, HsLayerParams::d_out)
    }

    pub fn validate(&self) -> Result<()> {
        if self.layers.is_empty() {
            return Err(invalid("encoder has no layers"));
        }
        for (l, layer) in self.layers.iter().enumerate() {
            if layer.is_first_layer != (l == 0) {
                return Err(invalid(format!("layer {l}: only the first layer may be marked first")));
            }
            layer.validate()?;
            if l > 0 {
                check_len(
                    "layer input vs previous output",
                    self.layers[l - 1].d_out(),
                    layer.d_in(),
                )?;
            }
        }
        if let Some((&l, _)) = self.pool_after.iter().find(|(&l, _)| l >= self.layers.len()) {
            return Err(invalid(format!("pool after missing layer {l}")));
        }
        Ok(())
    }

    pub fn pool_seed_for(&self, layer: usize) -> u64 {
        derive_seed(self.pool_seed, layer as u64)
    }

    /// Flatten all learnable parameters in layer order.
    pub fn to_params(&self) -> ParamVector {
        let mut pv = ParamVector::new();
        for (l, layer) in self.layers.iter().enumerate() {
            push_layer(&mut pv, &format!("hs{l}"), layer);
        }
        pv
    }

    /// Gradients laid out exactly like [`EncoderConfig::to_params`].
    pub fn grad_to_params(&self, grad: &EncoderGrad) -> Result<ParamVector> {
        check_len("gradient layers", self.layers.len(), grad.layers.len())?;
        let mut pv = ParamVector::new();
        for (l, (layer, g)) in self.layers.iter().zip(&grad.layers).enumerate() {
            push_layer_grad(&mut pv, &format!("hs{l}"), layer, g)?;
        }
        Ok(pv)
    }

    /// Overwrite parameters from a vector with the matching manifest.
    pub fn load_params(&mut self, pv: &ParamVector) -> Result<()> {
        let mut r = pv.reader();
        self.read_params(&mut r)?;
        r.finish()
    }

    /// Consume this encoder's tensors from the front of `r`.
    pub fn read_params(&mut self, r: &mut ParamReader<'_>) -> Result<()> {
        for (l, layer) in self.layers.iter_mut().enumerate() {
            read_layer(r, &format!("hs{l}"), layer)?;
        }
        Ok(())
    }
}

/// Append one layer's tensors under `prefix`.
pub fn push_layer(pv: &mut ParamVector, prefix: &str, layer: &HsLayerParams) {
    let g = &layer.gc;
    let (di, dout, s) = (g.d_in(), g.d_out(), g.supports());
    push(pv, format!("{prefix}.gc.center"), &[dout, di], g.center_weights());
    push(
        pv,
        format!("{prefix}.gc.support_weights"),
        &[dout, s, di],
        g.support_weights(),
    );
    push(pv, format!("{prefix}.gc.support_dirs"), &[dout, s, 3], g.support_dirs());
    for (tag, lin) in [("ste", &layer.ste), ("orl", &layer.orl)] {
        if let Some(m) = lin {
            push(
                pv,
                format!("{prefix}.{tag}.weights"),
                &[m.d_in(), m.d_out()],
                m.weights(),
            );
            push(pv, format!("{prefix}.{tag}.bias"), &[m.d_out()], m.bias());
        }
    }
}

pub fn read_layer(r: &mut ParamReader<'_>, prefix: &str, layer: &mut HsLayerParams) -> Result<()> {
    let (di, dout, s) = (layer.gc.d_in(), layer.gc.d_out(), layer.gc.supports());
    let c = r.take(&format!("{prefix}.gc.center"), &[dout, di])?;
    let w = r.take(&format!("{prefix}.gc.support_weights"), &[dout, s, di])?;
    let k = r.take(&format!("{prefix}.gc.support_dirs"), &[dout, s, 3])?;
    layer.gc.set_flat(c, w, k)?;
    for (tag, lin) in [("ste", &mut layer.ste), ("orl", &mut layer.orl)] {
        if let Some(m) = lin {
            let w = r.take(&format!("{prefix}.{tag}.weights"), &[m.d_in(), m.d_out()])?;
            let b = r.take(&format!("{prefix}.{tag}.bias"), &[m.d_out()])?;
            m.set_flat(w, b)?;
        }
    }
    Ok(())
}

/// Layer gradients laid out like [`push_layer`].
pub fn push_layer_grad(pv: &mut ParamVector, prefix: &str, layer: &HsLayerParams, grad: &HsLayerGrad) -> Result<()> {
    let mut filled = layer.clone();
    fill_grad(&mut filled, grad)?;
    push_layer(pv, prefix, &filled);
    Ok(())
}

fn fill_grad(layer: &mut HsLayerParams, g: &HsLayerGrad) -> Result<()> {
    let GcGrad {
        center,
        support_weights,
        support_dirs,
    } = &g.gc;
    check_len("center gradient", layer.gc.center.len(), center.len())?;
    check_len(
        "support weight gradient",
        layer.gc.support_weights.len(),
        support_weights.len(),
    )?;
    check_len(
        "support direction gradient",
        layer.gc.support_dirs.len(),
        support_dirs.len(),
    )?;
    layer.gc.center.clone_from(center);
    layer.gc.support_weights.clone_from(support_weights);
    layer.gc.support_dirs.clone_from(support_dirs);
    copy_linear(&mut layer.ste, &g.ste)?;
    copy_linear(&mut layer.orl, &g.orl)
}

fn push(pv: &mut ParamVector, name: String, shape: &[usize], data: &[f64]) {
    pv.push(name, shape, data)
        .expect("encoder tensor names are unique and shapes match");
}

fn copy_linear(dst: &mut Option<LinearMap>, src: &Option<LinearGrad>) -> Result<()> {
    match (dst, src) {
        (Some(m), Some(g)) => {
            check_len("linear weight gradient", m.weights.len(), g.weights.len())?;
            check_len("linear bias gradient", m.bias.len(), g.bias.len())?;
            m.weights.clone_from(&g.weights);
            m.bias.clone_from(&g.bias);
            Ok(())
        }
        (None, None) => Ok(()),
        _ => Err(invalid("gradient does not match the layer's optional blocks")),
    }
}

pub fn hs_encoder_forward(pc: &PointCloud, cfg: &EncoderConfig) -> Result<(PointCloud, FeatureMap)> {
    let tape = hs_encoder_forward_tape(pc, cfg, None)?;
    Ok((tape.cloud, tape.features))
}

/// Forward pass keeping every intermediate. `frozen` replays the neighbor
/// selections of an earlier tape, one entry per layer.
pub fn hs_encoder_forward_tape(
    pc: &PointCloud,
    cfg: &EncoderConfig,
    frozen: Option<&[LayerNeighbors]>,
) -> Result<EncoderTape> {
    cfg.validate()?;
    if let Some(f) = frozen {
        check_len("frozen neighbor layers", cfg.layers.len(), f.len())?;
    }
    let mut cloud = pc.clone();
    let mut features = positions(pc);
    let mut stages = Vec::with_capacity(cfg.layers.len());
    for (l, layer) in cfg.layers.iter().enumerate() {
        let tape = hs_layer_forward_tape(&cloud, &features, layer, frozen.map(|f| &f[l]))?;
        let out = tape.output.clone();
        let pool = match cfg.pool_after.get(&l) {
            Some(stage) => {
                let nbrs: NeighborIndex = knn_points(&cloud, stage.m)?;
                Some(graph_max_pool_with_sources(
                    &cloud,
                    &out,
                    &nbrs,
                    stage.keep,
                    cfg.pool_seed_for(l),
                )?)
            }
            None => None,
        };
        let (next_cloud, next_features) = match &pool {
            Some(p) => (p.cloud.clone(), p.features.clone()),
            None => (cloud.clone(), out),
        };
        stages.push(StageTape {
            cloud: std::mem::replace(&mut cloud, next_cloud),
            input: std::mem::replace(&mut features, next_features),
            layer: tape,
            pool,
        });
    }
    Ok(EncoderTape {
        stages,
        cloud,
        features,
    })
}

/// Parameter gradients of the final features, neighbor selections held fixed.
pub fn hs_encoder_backward(cfg: &EncoderConfig, tape: &EncoderTape, grad_out: &FeatureMap) -> Result<EncoderGrad> {
    check_len("encoder stages", cfg.layers.len(), tape.stages.len())?;
    check_len("encoder gradient rows", tape.features.rows(), grad_out.rows())?;
    check_len("encoder gradient columns", tape.features.cols(), grad_out.cols())?;
    let mut grads = Vec::with_capacity(cfg.layers.len());
    let mut grad = grad_out.clone();
    for (layer, stage) in cfg.layers.iter().zip(&tape.stages).rev() {
        if let Some(pool) = &stage.pool {
            grad = graph_max_pool_backward(pool, stage.cloud.len(), &grad)?;
        }
        let (g_in, g) = hs_layer_backward_tape(&stage.cloud, &stage.input, layer, &stage.layer, &grad)?;
        grads.push(g);
        grad = g_in;
    }
    grads.reverse();
    Ok(EncoderGrad { layers: grads })
}
