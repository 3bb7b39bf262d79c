use crate::error::{check_len, Error, Result};
use crate::exec;
use crate::graphconv::FeatureMap;
use crate::rng::Rng;

/// Per-point affine map `out_n = in_n · W + b` with `W` stored row-major
/// as `d_in x d_out`.
#[derive(Clone, Debug, PartialEq)]
pub struct LinearMap {
    d_in: usize,
    d_out: usize,
    pub(crate) weights: Vec<f64>,
    pub(crate) bias: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LinearGrad {
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

impl LinearMap {
    pub fn new(d_in: usize, d_out: usize, weights: Vec<f64>, bias: Vec<f64>) -> Result<Self> {
        check_len("linear weights", d_in * d_out, weights.len())?;
        check_len("linear bias", d_out, bias.len())?;
        if weights.iter().chain(&bias).any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("linear map parameter".into()));
        }
        Ok(Self {
            d_in,
            d_out,
            weights,
            bias,
        })
    }

    pub fn zeros(d_in: usize, d_out: usize) -> Self {
        Self {
            d_in,
            d_out,
            weights: vec![0.0; d_in * d_out],
            bias: vec![0.0; d_out],
        }
    }

    pub fn identity(d: usize) -> Self {
        let mut m = Self::zeros(d, d);
        for i in 0..d {
            m.weights[i * d + i] = 1.0;
        }
        m
    }

    /// Weights uniform in `±1/sqrt(d_in)`, zero bias.
    pub fn init(d_in: usize, d_out: usize, rng: &mut Rng) -> Self {
        let bound = 1.0 / (d_in.max(1) as f64).sqrt();
        let mut m = Self::zeros(d_in, d_out);
        m.weights.iter_mut().for_each(|w| *w = rng.range(-bound, bound));
        m
    }

    pub fn d_in(&self) -> usize {
        self.d_in
    }

    pub fn d_out(&self) -> usize {
        self.d_out
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn bias(&self) -> &[f64] {
        &self.bias
    }

    pub fn set_flat(&mut self, weights: &[f64], bias: &[f64]) -> Result<()> {
        *self = Self::new(self.d_in, self.d_out, weights.to_vec(), bias.to_vec())?;
        Ok(())
    }

    pub fn is_zero(&self) -> bool {
        self.weights.iter().chain(&self.bias).all(|&v| v == 0.0)
    }

    pub fn zero_grad(&self) -> LinearGrad {
        LinearGrad {
            weights: vec![0.0; self.weights.len()],
            bias: vec![0.0; self.bias.len()],
        }
    }

    /// Apply to a single row.
    pub fn apply(&self, x: &[f64], out: &mut [f64]) {
        out.copy_from_slice(&self.bias);
        for (i, &xi) in x.iter().enumerate() {
            if xi == 0.0 {
                continue;
            }
            let row = &self.weights[i * self.d_out..(i + 1) * self.d_out];
            for (o, w) in out.iter_mut().zip(row) {
                *o += xi * w;
            }
        }
    }

    pub fn forward(&self, input: &FeatureMap) -> Result<FeatureMap> {
        check_len("linear input dimension", self.d_in, input.cols())?;
        let rows = exec::map_range(input.rows(), |n| {
            let mut out = vec![0.0; self.d_out];
            self.apply(input.row(n), &mut out);
            out
        });
        FeatureMap::new(input.rows(), self.d_out, rows.concat())
    }

    /// `(grad_input, grad_params)` for the forward pass on `input`.
    pub fn backward(&self, input: &FeatureMap, grad_out: &FeatureMap) -> Result<(FeatureMap, LinearGrad)> {
        check_len("linear input dimension", self.d_in, input.cols())?;
        check_len("linear gradient rows", input.rows(), grad_out.rows())?;
        check_len("linear gradient columns", self.d_out, grad_out.cols())?;
        let grad_in = exec::map_range(input.rows(), |n| {
            let g = grad_out.row(n);
            (0..self.d_in)
                .map(|i| {
                    let row = &self.weights[i * self.d_out..(i + 1) * self.d_out];
                    row.iter().zip(g).map(|(w, gv)| w * gv).sum::<f64>()
                })
                .collect::<Vec<f64>>()
        });
        // one task per input row of W; summation over points in index order
        let w_rows = exec::map_range(self.d_in, |i| {
            let mut acc = vec![0.0; self.d_out];
            for n in 0..input.rows() {
                let x = input.get(n, i);
                if x == 0.0 {
                    continue;
                }
                for (a, gv) in acc.iter_mut().zip(grad_out.row(n)) {
                    *a += x * gv;
                }
            }
            acc
        });
        let mut bias = vec![0.0; self.d_out];
        for n in 0..grad_out.rows() {
            for (b, gv) in bias.iter_mut().zip(grad_out.row(n)) {
                *b += gv;
            }
        }
        Ok((
            FeatureMap::from_vec(input.rows(), self.d_in, grad_in.concat()),
            LinearGrad {
                weights: w_rows.concat(),
                bias,
            },
        ))
    }
}
