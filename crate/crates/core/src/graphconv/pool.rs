//! Graph max pooling: keep a seeded random subset of points, each carrying
//! the channel-wise max of its receptive field (itself plus its neighbors).

use super::FeatureMap;
use crate::error::{check_len, invalid, Result};
use crate::exec;
use crate::neighbors::NeighborIndex;
use crate::pointcloud::PointCloud;
use crate::rng::Rng;

#[derive(Clone, Debug)]
pub struct Pooled {
    pub cloud: PointCloud,
    pub features: FeatureMap,
    /// Surviving input indices, ascending.
    pub selected: Vec<usize>,
    /// `sources[k * D + c]` = input row that supplied pooled entry `(k, c)`.
    pub sources: Vec<usize>,
    /// Winner minus runner-up for every pooled entry.
    pub margins: Vec<f64>,
}

pub fn graph_max_pool(
    pc: &PointCloud,
    fm: &FeatureMap,
    nbrs: &NeighborIndex,
    keep: usize,
    seed: u64,
) -> Result<(PointCloud, FeatureMap)> {
    let p = graph_max_pool_with_sources(pc, fm, nbrs, keep, seed)?;
    Ok((p.cloud, p.features))
}

pub fn graph_max_pool_with_sources(
    pc: &PointCloud,
    fm: &FeatureMap,
    nbrs: &NeighborIndex,
    keep: usize,
    seed: u64,
) -> Result<Pooled> {
    let n = pc.len();
    check_len("feature rows vs points", n, fm.rows())?;
    check_len("neighbor rows vs points", n, nbrs.len())?;
    if keep > n || keep == 0 {
        return Err(invalid(format!("cannot keep {keep} of {n} points")));
    }
    let mut selected = Rng::new(seed).sample_indices(n, keep);
    selected.sort_unstable();
    let d = fm.cols();

    let rows = exec::map_slice(&selected, |&i| {
        // center first, then neighbors in list order; ties go to the earlier entry
        let field: Vec<usize> = std::iter::once(i).chain(nbrs.neighbors(i).iter().copied()).collect();
        let mut vals = vec![0.0; d];
        let mut srcs = vec![0usize; d];
        let mut gaps = vec![f64::INFINITY; d];
        for c in 0..d {
            let mut best = f64::NEG_INFINITY;
            let mut second = f64::NEG_INFINITY;
            for &j in &field {
                let v = fm.get(j, c);
                if v > best {
                    second = best;
                    best = v;
                    srcs[c] = j;
                } else if v > second {
                    second = v;
                }
            }
            vals[c] = best;
            gaps[c] = best - second;
        }
        (vals, srcs, gaps)
    });

    let mut data = Vec::with_capacity(keep * d);
    let mut sources = Vec::with_capacity(keep * d);
    let mut margins = Vec::with_capacity(keep * d);
    for (v, s, g) in rows {
        data.extend(v);
        sources.extend(s);
        margins.extend(g);
    }
    Ok(Pooled {
        cloud: pc.select(&selected)?,
        features: FeatureMap::from_vec(keep, d, data),
        selected,
        sources,
        margins,
    })
}

/// Route each pooled gradient entry back to the input row that won its max.
pub fn graph_max_pool_backward(pooled: &Pooled, n_in: usize, grad_out: &FeatureMap) -> Result<FeatureMap> {
    let d = pooled.features.cols();
    check_len("pooled gradient rows", pooled.features.rows(), grad_out.rows())?;
    check_len("pooled gradient columns", d, grad_out.cols())?;
    let mut grad = FeatureMap::zeros(n_in, d);
    for k in 0..grad_out.rows() {
        for c in 0..d {
            let src = pooled.sources[k * d + c];
            grad.data_mut()[src * d + c] += grad_out.get(k, c);
        }
    }
    Ok(grad)
}
