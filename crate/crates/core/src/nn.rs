//! Parameterized building blocks shared by alignment, fusion and the head.

use rand::Rng;

use crate::autodiff::{Graph, NodeId, ParamId, ParamStore};
use crate::error::Result;
use crate::tensor::Tensor;

pub(crate) fn uniform(rng: &mut impl Rng, shape: &[usize], bound: f64) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.gen_range(-bound..=bound)).collect();
    Tensor::from_parts(shape.to_vec(), data)
}

/// Affine map `x·W + b` over the rows of `x`. `W: [in, out]`, `b: [out]`.
#[derive(Clone, Copy, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub d_in: usize,
    pub d_out: usize,
}

impl Linear {
    /// Fan-in uniform init, bound `1/√d_in`.
    pub fn new(store: &mut ParamStore, rng: &mut impl Rng, name: &str, d_in: usize, d_out: usize) -> Result<Self> {
        let bound = 1.0 / (d_in as f64).sqrt();
        let weight = store.insert(format!("{name}.weight"), uniform(rng, &[d_in, d_out], bound))?;
        let bias = store.insert(format!("{name}.bias"), uniform(rng, &[d_out], bound))?;
        Ok(Self {
            weight,
            bias,
            d_in,
            d_out,
        })
    }

    pub fn forward(&self, g: &mut Graph<'_>, x: NodeId) -> Result<NodeId> {
        let w = g.param(self.weight);
        let b = g.param(self.bias);
        let h = g.matmul(x, w)?;
        g.add(h, b)
    }
}

/// Learnable affine parameters of a layer norm over the feature axis.
#[derive(Clone, Copy, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

pub const LAYER_NORM_EPS: f64 = 1e-9;

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize) -> Result<Self> {
        Ok(Self {
            gamma: store.insert(format!("{name}.gamma"), Tensor::full(&[dim], 1.0))?,
            beta: store.insert(format!("{name}.beta"), Tensor::zeros(&[dim]))?,
        })
    }

    pub fn forward(&self, g: &mut Graph<'_>, x: NodeId) -> Result<NodeId> {
        let gamma = g.param(self.gamma);
        let beta = g.param(self.beta);
        g.layer_norm(x, gamma, beta, LAYER_NORM_EPS)
    }
}

/// Multiplies rows by a 0/1 column so masked positions become exact zeros.
/// Returns `x` untouched when every position is valid.
pub fn apply_row_mask(g: &mut Graph<'_>, x: NodeId, mask: &[bool]) -> Result<NodeId> {
    if mask.iter().all(|&m| m) {
        return Ok(x);
    }
    let col = Tensor::from_parts(
        vec![mask.len(), 1],
        mask.iter().map(|&m| if m { 1.0 } else { 0.0 }).collect(),
    );
    let c = g.constant(col);
    g.mul(x, c)
}

/// `[1, len]` row of weights `mask / count(mask)`; multiplying it with a
/// `[len, d]` matrix yields the mean over valid rows.
pub fn masked_mean_weights(mask: &[bool]) -> Option<Tensor> {
    let count = mask.iter().filter(|&&m| m).count();
    if count == 0 {
        return None;
    }
    let w = 1.0 / count as f64;
    Some(Tensor::from_parts(
        vec![1, mask.len()],
        mask.iter().map(|&m| if m { w } else { 0.0 }).collect(),
    ))
}
