//! Encoder architecture files.
//!
//! Plain `key = value` lines; `#` starts a comment. Keys:
//!
//! ```text
//! seed = 0                  # parameter init and pooling selection
//! ste = true                # encoding path on/off
//! orl = true                # outlier-robust block on/off
//! receptive = feature       # feature | point, for layers after the first
//! layer = 16 1 10 10        # d_out supports m_rff m_orl, one line per layer
//! pool = 0 128 10           # after_layer keep m
//! ```

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use super::{EncoderConfig, HsLayerParams, PoolStage, Receptive};
use crate::error::{invalid, Error, Result};
use crate::rng::{derive_seed, Rng};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LayerArch {
    pub d_out: usize,
    pub supports: usize,
    pub m_rff: usize,
    pub m_orl: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PoolArch {
    pub after: usize,
    pub keep: usize,
    pub m: usize,
}

/// Shape of an encoder without its parameters.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EncoderArch {
    pub seed: u64,
    pub ste: bool,
    pub orl: bool,
    pub receptive: Receptive,
    pub layers: Vec<LayerArch>,
    pub pools: Vec<PoolArch>,
}

impl Default for EncoderArch {
    /// Two layers of width 16 with one support and 10 neighbors, pooling to
    /// 128 points between them.
    fn default() -> Self {
        let layer = LayerArch {
            d_out: 16,
            supports: 1,
            m_rff: 10,
            m_orl: 10,
        };
        Self {
            seed: 0,
            ste: true,
            orl: true,
            receptive: Receptive::Feature,
            layers: vec![layer; 2],
            pools: vec![PoolArch {
                after: 0,
                keep: 128,
                m: 10,
            }],
        }
    }
}

impl EncoderArch {
    /// The ablation used as the noise-sweep baseline: no encoding path, no
    /// outlier-robust block, point-distance neighbors everywhere.
    pub fn plain_gc(&self) -> Self {
        Self {
            ste: false,
            orl: false,
            receptive: Receptive::Point,
            ..self.clone()
        }
    }

    pub fn with_seed(&self, seed: u64) -> Self {
        Self { seed, ..self.clone() }
    }

    /// Override neighbor counts on every layer.
    pub fn with_neighbors(&self, m_rff: Option<usize>, m_orl: Option<usize>) -> Self {
        let mut a = self.clone();
        for l in &mut a.layers {
            l.m_rff = m_rff.unwrap_or(l.m_rff);
            l.m_orl = m_orl.unwrap_or(l.m_orl);
        }
        a
    }

    /// Smallest input cloud the encoder accepts. Only stages up to the first
    /// pool see the raw input size.
    pub fn min_points(&self) -> usize {
        let mut need = 1;
        for (l, layer) in self.layers.iter().enumerate() {
            need = need.max(layer.m_rff.max(if self.orl { layer.m_orl } else { 0 }) + 1);
            if let Some(p) = self.pools.iter().find(|p| p.after == l) {
                return need.max(p.keep).max(p.m + 1);
            }
        }
        need
    }

    /// Initialize parameters from the architecture seed.
    pub fn build(&self) -> Result<EncoderConfig> {
        if self.layers.is_empty() {
            return Err(invalid("architecture has no layers"));
        }
        let mut rng = Rng::new(derive_seed(self.seed, 1));
        let mut d_in = 3;
        let mut layers = Vec::with_capacity(self.layers.len());
        for (l, a) in self.layers.iter().enumerate() {
            if a.d_out == 0 {
                return Err(invalid(format!("layer {l}: d_out must be positive")));
            }
            let mut p = HsLayerParams::init(d_in, a.d_out, a.supports, a.m_rff, l == 0, &mut rng);
            p.m_orl = a.m_orl;
            p.receptive = self.receptive;
            if !self.ste {
                p.ste = None;
            }
            if !self.orl {
                p.orl = None;
            }
            layers.push(p);
            d_in = a.d_out;
        }
        let mut pool_after = BTreeMap::new();
        for p in &self.pools {
            if p.keep == 0 {
                return Err(invalid("pool keep must be positive"));
            }
            if pool_after.insert(p.after, PoolStage { keep: p.keep, m: p.m }).is_some() {
                return Err(invalid(format!("two pools after layer {}", p.after)));
            }
        }
        let cfg = EncoderConfig {
            layers,
            pool_after,
            pool_seed: derive_seed(self.seed, 2),
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut arch = Self {
            layers: Vec::new(),
            pools: Vec::new(),
            ..Self::default()
        };
        for (idx, raw) in text.lines().enumerate() {
            let line_no = idx + 1;
            let err = |msg: String| Error::Parse { line: line_no, msg };
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| err(format!("expected `key = value`, got `{line}`")))?;
            let (key, value) = (key.trim(), value.trim());
            let nums = || -> Result<Vec<usize>> {
                value
                    .split_whitespace()
                    .map(|t| t.parse::<usize>().map_err(|_| err(format!("`{t}` is not a count"))))
                    .collect()
            };
            match key {
                "seed" => arch.seed = value.parse().map_err(|_| err(format!("bad seed `{value}`")))?,
                "ste" => arch.ste = parse_bool(value).ok_or_else(|| err(format!("bad boolean `{value}`")))?,
                "orl" => arch.orl = parse_bool(value).ok_or_else(|| err(format!("bad boolean `{value}`")))?,
                "receptive" => {
                    arch.receptive = match value {
                        "feature" => Receptive::Feature,
                        "point" => Receptive::Point,
                        _ => return Err(err(format!("receptive must be `feature` or `point`, got `{value}`"))),
                    }
                }
                "layer" => match *nums()?.as_slice() {
                    [d_out, supports, m_rff, m_orl] => arch.layers.push(LayerArch {
                        d_out,
                        supports,
                        m_rff,
                        m_orl,
                    }),
                    [d_out, supports, m] => arch.layers.push(LayerArch {
                        d_out,
                        supports,
                        m_rff: m,
                        m_orl: m,
                    }),
                    _ => return Err(err("layer takes `d_out supports m_rff [m_orl]`".into())),
                },
                "pool" => match *nums()?.as_slice() {
                    [after, keep, m] => arch.pools.push(PoolArch { after, keep, m }),
                    _ => return Err(err("pool takes `after_layer keep m`".into())),
                },
                _ => return Err(err(format!("unknown key `{key}`"))),
            }
        }
        if arch.layers.is_empty() {
            return Err(Error::Parse {
                line: text.lines().count(),
                msg: "no `layer` lines".into(),
            });
        }
        Ok(arch)
    }

    pub fn to_text(&self) -> String {
        let mut s = String::from("# hscope encoder\n");
        let _ = writeln!(s, "seed = {}", self.seed);
        let _ = writeln!(s, "ste = {}", self.ste);
        let _ = writeln!(s, "orl = {}", self.orl);
        let r = match self.receptive {
            Receptive::Feature => "feature",
            Receptive::Point => "point",
        };
        let _ = writeln!(s, "receptive = {r}");
        for l in &self.layers {
            let _ = writeln!(s, "layer = {} {} {} {}", l.d_out, l.supports, l.m_rff, l.m_orl);
        }
        for p in &self.pools {
            let _ = writeln!(s, "pool = {} {} {}", p.after, p.keep, p.m);
        }
        s
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text())?;
        Ok(())
    }
}

fn parse_bool(v: &str) -> Option<bool> {
    match v {
        "true" | "on" | "yes" | "1" => Some(true),
        "false" | "off" | "no" | "0" => Some(false),
        _ => None,
    }
}
