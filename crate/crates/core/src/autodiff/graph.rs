//! Tape of tensor operations with reverse-mode gradients.
//!
//! A [`Graph`] records every operation in execution order, which is already a
//! topological order: a node can only reference nodes created before it.
//! [`Graph::backward`] walks the tape once in reverse.
//!
//! Parameters live in a [`ParamStore`] borrowed by the graph; parameter leaves
//! reference the store instead of copying it.

use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::kernels::{self, ConvGeom};
use super::params::{ParamId, ParamStore};
use crate::error::{Error, Result};
use crate::seed::splitmix;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Axis of a 2-D reduction or concatenation. `Rows` runs over axis 0 (time),
/// `Cols` over axis 1 (features).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Axis {
    Rows,
    Cols,
}

#[derive(Clone, Debug, Default)]
pub struct SoftmaxOpts {
    /// Logits are divided by this scalar node before exponentiation.
    pub temperature: Option<NodeId>,
    /// Element mask with the input's layout; `false` entries get probability 0.
    pub mask: Option<Vec<bool>>,
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Param,
    MatMul(NodeId, NodeId),
    Transpose(NodeId),
    Add(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, f64),
    Concat {
        parts: Vec<NodeId>,
        axis: Axis,
    },
    Tanh(NodeId),
    Sigmoid(NodeId),
    Relu(NodeId),
    Log(NodeId),
    XLogX(NodeId),
    Softmax {
        x: NodeId,
        axis: Axis,
        temperature: Option<NodeId>,
    },
    Sum {
        x: NodeId,
        axis: Option<Axis>,
    },
    Mean {
        x: NodeId,
        axis: Option<Axis>,
    },
    Conv1d {
        x: NodeId,
        w: NodeId,
        b: Option<NodeId>,
        geom: ConvGeom,
    },
    ConvTranspose1d {
        x: NodeId,
        w: NodeId,
        b: Option<NodeId>,
        geom: ConvGeom,
    },
    AvgPool1d {
        x: NodeId,
        kernel: usize,
        stride: usize,
    },
    GlobalMaxPool {
        x: NodeId,
        argmax: Vec<usize>,
    },
    LayerNorm {
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Dropout {
        x: NodeId,
        scale: Vec<f64>,
    },
    Slice {
        x: NodeId,
        axis: Axis,
        start: usize,
    },
}

enum Value {
    Owned(Tensor),
    Param(ParamId),
}

struct Node {
    value: Value,
    op: Op,
    requires_grad: bool,
    grad: Option<Tensor>,
}

/// Recording tape for one forward/backward computation.
pub struct Graph<'p> {
    params: Option<&'p ParamStore>,
    nodes: Vec<Node>,
    param_nodes: HashMap<ParamId, NodeId>,
    mode: Mode,
    dropout_seed: u64,
    dropout_calls: u64,
}

fn bcast_dims(op: &'static str, a: &Tensor, b: &Tensor) -> Result<((usize, usize), (usize, usize))> {
    let (m, n) = a.dims2();
    let (bm, bn) = b.dims2();
    let rank_ok = b.shape().len() <= a.shape().len().max(2);
    if rank_ok && (bm == m || bm == 1) && (bn == n || bn == 1) {
        Ok(((m, n), (bm, bn)))
    } else {
        Err(Error::ShapeMismatch {
            op,
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        })
    }
}

fn reduce_to(g: &Tensor, (m, n): (usize, usize), shape: &[usize], (bm, bn): (usize, usize)) -> Tensor {
    if bm == m && bn == n {
        return Tensor::from_parts(shape.to_vec(), g.data().to_vec());
    }
    let mut out = vec![0.0; bm * bn];
    for i in 0..m {
        for j in 0..n {
            out[(i % bm) * bn + (j % bn)] += g.data()[i * n + j];
        }
    }
    Tensor::from_parts(shape.to_vec(), out)
}

impl<'p> Graph<'p> {
    /// A graph without parameters.
    pub fn new(mode: Mode, dropout_seed: u64) -> Self {
        Self {
            params: None,
            nodes: Vec::new(),
            param_nodes: HashMap::new(),
            mode,
            dropout_seed,
            dropout_calls: 0,
        }
    }

    pub fn with_params(params: &'p ParamStore, mode: Mode, dropout_seed: u64) -> Self {
        Self {
            params: Some(params),
            ..Self::new(mode, dropout_seed)
        }
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        match &self.nodes[id.0].value {
            Value::Owned(t) => t,
            Value::Param(p) => self.params.expect("param node without store").value(*p),
        }
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        self.value(id).shape()
    }

    pub fn requires_grad(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    /// Accumulated gradient of a node after [`Graph::backward`].
    pub fn grad(&self, id: NodeId) -> Option<&Tensor> {
        self.nodes[id.0].grad.as_ref()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool, name: &'static str) -> Result<NodeId> {
        if !value.all_finite() {
            return Err(Error::NonFinite { op: name });
        }
        self.nodes.push(Node {
            value: Value::Owned(value),
            op,
            requires_grad,
            grad: None,
        });
        Ok(NodeId(self.nodes.len() - 1))
    }

    fn rg(&self, ids: &[NodeId]) -> bool {
        ids.iter().any(|&i| self.nodes[i.0].requires_grad)
    }

    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.nodes.push(Node {
            value: Value::Owned(value),
            op: Op::Leaf,
            requires_grad: false,
            grad: None,
        });
        NodeId(self.nodes.len() - 1)
    }

    /// A free leaf that receives a gradient.
    pub fn variable(&mut self, value: Tensor) -> NodeId {
        self.nodes.push(Node {
            value: Value::Owned(value),
            op: Op::Leaf,
            requires_grad: true,
            grad: None,
        });
        NodeId(self.nodes.len() - 1)
    }

    /// Leaf for a stored parameter. Repeated calls return the same node.
    pub fn param(&mut self, id: ParamId) -> NodeId {
        if let Some(&n) = self.param_nodes.get(&id) {
            return n;
        }
        assert!(self.params.is_some(), "graph has no parameter store");
        self.nodes.push(Node {
            value: Value::Param(id),
            op: Op::Param,
            requires_grad: true,
            grad: None,
        });
        let n = NodeId(self.nodes.len() - 1);
        self.param_nodes.insert(id, n);
        n
    }

    // ---------------------------------------------------------------------
    // Forward primitives
    // ---------------------------------------------------------------------

    /// `[m,k] × [k,n] → [m,n]`
    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (av, bv) = (self.value(a), self.value(b));
        let ((m, k), (k2, n)) = (av.dims2(), bv.dims2());
        if av.shape().len() != 2 || bv.shape().len() != 2 || k != k2 {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                lhs: av.shape().to_vec(),
                rhs: bv.shape().to_vec(),
            });
        }
        let mut out = vec![0.0; m * n];
        kernels::matmul_acc(av.data(), bv.data(), &mut out, m, k, n);
        let rg = self.rg(&[a, b]);
        self.push(Tensor::from_parts(vec![m, n], out), Op::MatMul(a, b), rg, "matmul")
    }

    pub fn transpose(&mut self, x: NodeId) -> Result<NodeId> {
        let xv = self.value(x);
        let (m, n) = xv.dims2();
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = xv.data()[i * n + j];
            }
        }
        let rg = self.rg(&[x]);
        self.push(Tensor::from_parts(vec![n, m], out), Op::Transpose(x), rg, "transpose")
    }

    /// Elementwise sum; `b` may broadcast along rows and/or columns of `a`.
    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (av, bv) = (self.value(a), self.value(b));
        let ((m, n), (bm, bn)) = bcast_dims("add", av, bv)?;
        let mut out = av.data().to_vec();
        for i in 0..m {
            for j in 0..n {
                out[i * n + j] += bv.data()[(i % bm) * bn + (j % bn)];
            }
        }
        let shape = av.shape().to_vec();
        let rg = self.rg(&[a, b]);
        self.push(Tensor::from_parts(shape, out), Op::Add(a, b), rg, "add")
    }

    /// `a - b`, built from `add` and `scale`.
    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let nb = self.scale(b, -1.0)?;
        self.add(a, nb)
    }

    /// Elementwise product; `b` may broadcast along rows and/or columns of `a`.
    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (av, bv) = (self.value(a), self.value(b));
        let ((m, n), (bm, bn)) = bcast_dims("mul", av, bv)?;
        let mut out = av.data().to_vec();
        for i in 0..m {
            for j in 0..n {
                out[i * n + j] *= bv.data()[(i % bm) * bn + (j % bn)];
            }
        }
        let shape = av.shape().to_vec();
        let rg = self.rg(&[a, b]);
        self.push(Tensor::from_parts(shape, out), Op::Mul(a, b), rg, "mul")
    }

    pub fn scale(&mut self, x: NodeId, factor: f64) -> Result<NodeId> {
        let out = self.value(x).map(|v| v * factor);
        let rg = self.rg(&[x]);
        self.push(out, Op::Scale(x, factor), rg, "scale")
    }

    /// Concatenation along the feature axis (axis 1).
    pub fn concat_feature(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        self.concat(parts, Axis::Cols)
    }

    /// Concatenation along the time axis (axis 0).
    pub fn concat_time(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        self.concat(parts, Axis::Rows)
    }

    fn concat(&mut self, parts: &[NodeId], axis: Axis) -> Result<NodeId> {
        let name = match axis {
            Axis::Rows => "concat_time",
            Axis::Cols => "concat_feature",
        };
        let first = *parts
            .first()
            .ok_or_else(|| Error::InvalidArgument(format!("{name}: no inputs")))?;
        let (m0, n0) = self.value(first).dims2();
        let mut total = 0;
        for &p in parts {
            let v = self.value(p);
            let (m, n) = v.dims2();
            let ok = match axis {
                Axis::Rows => n == n0,
                Axis::Cols => m == m0,
            };
            if !ok {
                return Err(Error::ShapeMismatch {
                    op: name,
                    lhs: self.value(first).shape().to_vec(),
                    rhs: v.shape().to_vec(),
                });
            }
            total += match axis {
                Axis::Rows => m,
                Axis::Cols => n,
            };
        }
        let (shape, data) = match axis {
            Axis::Rows => {
                let mut data = Vec::with_capacity(total * n0);
                for &p in parts {
                    data.extend_from_slice(self.value(p).data());
                }
                (vec![total, n0], data)
            }
            Axis::Cols => {
                let mut data = Vec::with_capacity(m0 * total);
                for i in 0..m0 {
                    for &p in parts {
                        data.extend_from_slice(self.value(p).row(i));
                    }
                }
                (vec![m0, total], data)
            }
        };
        let rg = self.rg(parts);
        self.push(
            Tensor::from_parts(shape, data),
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
            rg,
            name,
        )
    }

    pub fn tanh(&mut self, x: NodeId) -> Result<NodeId> {
        let out = self.value(x).map(f64::tanh);
        let rg = self.rg(&[x]);
        self.push(out, Op::Tanh(x), rg, "tanh")
    }

    pub fn sigmoid(&mut self, x: NodeId) -> Result<NodeId> {
        let out = self.value(x).map(|v| 1.0 / (1.0 + (-v).exp()));
        let rg = self.rg(&[x]);
        self.push(out, Op::Sigmoid(x), rg, "sigmoid")
    }

    pub fn relu(&mut self, x: NodeId) -> Result<NodeId> {
        let out = self.value(x).map(|v| v.max(0.0));
        let rg = self.rg(&[x]);
        self.push(out, Op::Relu(x), rg, "relu")
    }

    pub fn log(&mut self, x: NodeId) -> Result<NodeId> {
        let out = self.value(x).map(f64::ln);
        let rg = self.rg(&[x]);
        self.push(out, Op::Log(x), rg, "log")
    }

    /// `x·ln x` with `0·ln 0 = 0`; defined for `x ≥ 0`.
    pub fn xlogx(&mut self, x: NodeId) -> Result<NodeId> {
        let out = self.value(x).map(|v| if v == 0.0 { 0.0 } else { v * v.ln() });
        let rg = self.rg(&[x]);
        self.push(out, Op::XLogX(x), rg, "xlogx")
    }

    pub fn softmax(&mut self, x: NodeId, axis: Axis) -> Result<NodeId> {
        self.softmax_with(x, axis, SoftmaxOpts::default())
    }

    pub fn softmax_with(&mut self, x: NodeId, axis: Axis, opts: SoftmaxOpts) -> Result<NodeId> {
        let xv = self.value(x);
        let (m, n) = xv.dims2();
        if let Some(mask) = &opts.mask {
            if mask.len() != xv.numel() {
                return Err(Error::ShapeMismatch {
                    op: "softmax",
                    lhs: xv.shape().to_vec(),
                    rhs: vec![mask.len()],
                });
            }
        }
        let tau = match opts.temperature {
            Some(t) => {
                let tv = self.value(t);
                if !tv.is_scalar() || tv.item() <= 0.0 {
                    return Err(Error::InvalidArgument(format!(
                        "softmax temperature must be a positive scalar, got {tv:?}"
                    )));
                }
                tv.item()
            }
            None => 1.0,
        };
        let mut out: Vec<f64> = xv.data().iter().map(|v| v / tau).collect();
        let valid = |idx: usize| opts.mask.as_ref().is_none_or(|mk| mk[idx]);
        let (lanes, lane_len) = match axis {
            Axis::Cols => (m, n),
            Axis::Rows => (n, m),
        };
        if lane_len == 0 {
            return Err(Error::EmptyAxis { op: "softmax" });
        }
        let index = |lane: usize, k: usize| match axis {
            Axis::Cols => lane * n + k,
            Axis::Rows => k * n + lane,
        };
        let mut buf = vec![0.0; lane_len];
        for lane in 0..lanes {
            for k in 0..lane_len {
                buf[k] = out[index(lane, k)];
            }
            if !kernels::softmax_lane(&mut buf, |k| valid(index(lane, k))) {
                return Err(Error::EmptyAxis { op: "softmax" });
            }
            for k in 0..lane_len {
                out[index(lane, k)] = buf[k];
            }
        }
        let shape = xv.shape().to_vec();
        let mut deps = vec![x];
        deps.extend(opts.temperature);
        let rg = self.rg(&deps);
        self.push(
            Tensor::from_parts(shape, out),
            Op::Softmax {
                x,
                axis,
                temperature: opts.temperature,
            },
            rg,
            "softmax",
        )
    }

    /// Sum over one axis (kept as extent 1) or over everything (`None` → scalar).
    pub fn sum(&mut self, x: NodeId, axis: Option<Axis>) -> Result<NodeId> {
        let out = reduce(self.value(x), axis, false);
        let rg = self.rg(&[x]);
        self.push(out, Op::Sum { x, axis }, rg, "sum")
    }

    pub fn mean(&mut self, x: NodeId, axis: Option<Axis>) -> Result<NodeId> {
        let out = reduce(self.value(x), axis, true);
        let rg = self.rg(&[x]);
        self.push(out, Op::Mean { x, axis }, rg, "mean")
    }

    /// 1-D convolution over time. `x: [len, c_in]`, `w: [c_out, c_in, kernel]`, `b: [c_out]`.
    pub fn conv1d(&mut self, x: NodeId, w: NodeId, b: Option<NodeId>, stride: usize, padding: usize) -> Result<NodeId> {
        let (xv, wv) = (self.value(x), self.value(w));
        let mismatch = || Error::ShapeMismatch {
            op: "conv1d",
            lhs: xv.shape().to_vec(),
            rhs: wv.shape().to_vec(),
        };
        let &[c_out, c_in, kernel] = wv.shape() else {
            return Err(mismatch());
        };
        let (len, xc) = xv.dims2();
        if xv.shape().len() != 2 || xc != c_in {
            return Err(mismatch());
        }
        let out_len = kernels::conv1d_out_len(len, kernel, stride, padding).ok_or_else(mismatch)?;
        let geom = ConvGeom {
            kernel,
            stride,
            padding,
        };
        let mut out = vec![0.0; out_len * c_out];
        if let Some(b) = b {
            let bv = self.value(b);
            if bv.numel() != c_out {
                return Err(Error::ShapeMismatch {
                    op: "conv1d",
                    lhs: wv.shape().to_vec(),
                    rhs: bv.shape().to_vec(),
                });
            }
            for row in out.chunks_mut(c_out) {
                row.copy_from_slice(bv.data());
            }
        }
        kernels::conv1d_forward(xv.data(), wv.data(), &mut out, len, c_in, c_out, geom);
        let mut deps = vec![x, w];
        deps.extend(b);
        let rg = self.rg(&deps);
        self.push(
            Tensor::from_parts(vec![out_len, c_out], out),
            Op::Conv1d { x, w, b, geom },
            rg,
            "conv1d",
        )
    }

    /// Transposed 1-D convolution. `x: [len, c_in]`, `w: [c_in, c_out, kernel]`,
    /// output length `(len - 1)·stride − 2·padding + kernel`.
    ///
    /// With the same weight tensor this is the adjoint of [`Graph::conv1d`].
    pub fn conv_transpose1d(
        &mut self,
        x: NodeId,
        w: NodeId,
        b: Option<NodeId>,
        stride: usize,
        padding: usize,
    ) -> Result<NodeId> {
        let (xv, wv) = (self.value(x), self.value(w));
        let mismatch = || Error::ShapeMismatch {
            op: "conv_transpose1d",
            lhs: xv.shape().to_vec(),
            rhs: wv.shape().to_vec(),
        };
        let &[c_in, c_out, kernel] = wv.shape() else {
            return Err(mismatch());
        };
        let (len, xc) = xv.dims2();
        if xv.shape().len() != 2 || xc != c_in {
            return Err(mismatch());
        }
        let out_len = kernels::conv_transpose1d_out_len(len, kernel, stride, padding).ok_or_else(mismatch)?;
        let geom = ConvGeom {
            kernel,
            stride,
            padding,
        };
        let mut out = vec![0.0; out_len * c_out];
        if let Some(b) = b {
            let bv = self.value(b);
            if bv.numel() != c_out {
                return Err(Error::ShapeMismatch {
                    op: "conv_transpose1d",
                    lhs: wv.shape().to_vec(),
                    rhs: bv.shape().to_vec(),
                });
            }
            for row in out.chunks_mut(c_out) {
                row.copy_from_slice(bv.data());
            }
        }
        kernels::conv_scatter(xv.data(), wv.data(), &mut out, len, c_in, c_out, geom);
        let mut deps = vec![x, w];
        deps.extend(b);
        let rg = self.rg(&deps);
        self.push(
            Tensor::from_parts(vec![out_len, c_out], out),
            Op::ConvTranspose1d { x, w, b, geom },
            rg,
            "conv_transpose1d",
        )
    }

    /// Mean pooling over time windows. `[len, c] → [(len − kernel)/stride + 1, c]`.
    pub fn avg_pool1d(&mut self, x: NodeId, kernel: usize, stride: usize) -> Result<NodeId> {
        let xv = self.value(x);
        let (len, c) = xv.dims2();
        let out_len = kernels::conv1d_out_len(len, kernel, stride, 0)
            .ok_or_else(|| Error::InvalidShape(format!("avg_pool1d: length {len} shorter than kernel {kernel}")))?;
        let mut out = vec![0.0; out_len * c];
        for t in 0..out_len {
            for k in 0..kernel {
                let src = xv.row(t * stride + k);
                for (o, v) in out[t * c..(t + 1) * c].iter_mut().zip(src) {
                    *o += v;
                }
            }
        }
        let inv = 1.0 / kernel as f64;
        out.iter_mut().for_each(|v| *v *= inv);
        let rg = self.rg(&[x]);
        self.push(
            Tensor::from_parts(vec![out_len, c], out),
            Op::AvgPool1d { x, kernel, stride },
            rg,
            "avg_pool1d",
        )
    }

    /// Max over the time axis per channel: `[len, c] → [1, c]`. Ties go to the earliest position.
    pub fn global_max_pool(&mut self, x: NodeId) -> Result<NodeId> {
        let xv = self.value(x);
        let (len, c) = xv.dims2();
        let mut argmax = vec![0usize; c];
        let mut out = xv.row(0).to_vec();
        for t in 1..len {
            for (j, &v) in xv.row(t).iter().enumerate() {
                if v > out[j] {
                    out[j] = v;
                    argmax[j] = t;
                }
            }
        }
        let rg = self.rg(&[x]);
        self.push(
            Tensor::from_parts(vec![1, c], out),
            Op::GlobalMaxPool { x, argmax },
            rg,
            "global_max_pool",
        )
    }

    /// Normalizes each row to zero mean / unit variance, then applies `gamma·x̂ + beta`.
    pub fn layer_norm(&mut self, x: NodeId, gamma: NodeId, beta: NodeId, eps: f64) -> Result<NodeId> {
        let (xv, gv, bv) = (self.value(x), self.value(gamma), self.value(beta));
        let (m, n) = xv.dims2();
        if gv.numel() != n || bv.numel() != n {
            return Err(Error::ShapeMismatch {
                op: "layer_norm",
                lhs: xv.shape().to_vec(),
                rhs: gv.shape().to_vec(),
            });
        }
        let mut xhat = vec![0.0; m * n];
        let mut inv_std = vec![0.0; m];
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let row = xv.row(i);
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std[i] = is;
            for j in 0..n {
                let h = (row[j] - mean) * is;
                xhat[i * n + j] = h;
                out[i * n + j] = h * gv.data()[j] + bv.data()[j];
            }
        }
        let shape = xv.shape().to_vec();
        let rg = self.rg(&[x, gamma, beta]);
        self.push(
            Tensor::from_parts(shape, out),
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            rg,
            "layer_norm",
        )
    }

    /// Inverted dropout: in train mode each element is kept with probability
    /// `keep` and scaled by `1/keep`. In eval mode this is the identity.
    ///
    /// Masks come from the graph's dropout seed and the call index, so
    /// rebuilding a graph with the same seed reproduces them.
    pub fn dropout(&mut self, x: NodeId, keep: f64) -> Result<NodeId> {
        if !(keep > 0.0 && keep <= 1.0) {
            return Err(Error::InvalidArgument(format!("dropout keep probability {keep}")));
        }
        let call = self.dropout_calls;
        self.dropout_calls += 1;
        if self.mode == Mode::Eval || keep == 1.0 {
            return Ok(x);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(splitmix(self.dropout_seed ^ splitmix(call)));
        let xv = self.value(x);
        let inv = 1.0 / keep;
        let scale: Vec<f64> = (0..xv.numel())
            .map(|_| if rng.gen::<f64>() < keep { inv } else { 0.0 })
            .collect();
        let out = Tensor::from_parts(
            xv.shape().to_vec(),
            xv.data().iter().zip(&scale).map(|(v, s)| v * s).collect(),
        );
        let rg = self.rg(&[x]);
        self.push(out, Op::Dropout { x, scale }, rg, "dropout")
    }

    /// Contiguous slice `[start, start + len)` along one axis of a 2-D tensor.
    pub fn slice(&mut self, x: NodeId, axis: Axis, start: usize, len: usize) -> Result<NodeId> {
        let xv = self.value(x);
        let (m, n) = xv.dims2();
        let extent = match axis {
            Axis::Rows => m,
            Axis::Cols => n,
        };
        if len == 0 || start + len > extent {
            return Err(Error::InvalidShape(format!(
                "slice [{start}, {}) out of range for {:?}",
                start + len,
                xv.shape()
            )));
        }
        let (shape, data) = match axis {
            Axis::Rows => (vec![len, n], xv.data()[start * n..(start + len) * n].to_vec()),
            Axis::Cols => {
                let mut d = Vec::with_capacity(m * len);
                for i in 0..m {
                    d.extend_from_slice(&xv.row(i)[start..start + len]);
                }
                (vec![m, len], d)
            }
        };
        let rg = self.rg(&[x]);
        self.push(
            Tensor::from_parts(shape, data),
            Op::Slice { x, axis, start },
            rg,
            "embedding_slice",
        )
    }

    // ---------------------------------------------------------------------
    // Backward
    // ---------------------------------------------------------------------

    /// Propagates d(loss)/d(node) to every ancestor that requires a gradient.
    ///
    /// Gradients are added to whatever each node already holds, so calling
    /// this twice doubles them.
    pub fn backward(&mut self, loss: NodeId) -> Result<()> {
        let lv = self.value(loss);
        if !lv.is_scalar() {
            return Err(Error::NotScalar(lv.shape().to_vec()));
        }
        let mut adj: Vec<Option<Tensor>> = vec![None; loss.0 + 1];
        adj[loss.0] = Some(Tensor::full(lv.shape(), 1.0));
        for i in (0..=loss.0).rev() {
            let Some(g) = adj[i].take() else { continue };
            if !self.nodes[i].requires_grad {
                continue;
            }
            self.backprop_node(i, &g, &mut adj);
            let node = &mut self.nodes[i];
            match &mut node.grad {
                Some(acc) => acc.add_assign(&g),
                None => node.grad = Some(g),
            }
        }
        Ok(())
    }

    /// Gradients of every parameter leaf touched by this graph.
    pub fn param_grads(&self) -> Vec<(ParamId, &Tensor)> {
        let mut out: Vec<_> = self
            .param_nodes
            .iter()
            .filter_map(|(&p, &n)| self.nodes[n.0].grad.as_ref().map(|g| (p, g)))
            .collect();
        out.sort_by_key(|(p, _)| *p);
        out
    }

    fn backprop_node(&self, i: usize, g: &Tensor, adj: &mut [Option<Tensor>]) {
        let send = |adj: &mut [Option<Tensor>], to: NodeId, t: Tensor| {
            if !self.nodes[to.0].requires_grad {
                return;
            }
            match &mut adj[to.0] {
                Some(acc) => acc.add_assign(&t),
                slot @ None => *slot = Some(t),
            }
        };
        let want = |n: NodeId| self.nodes[n.0].requires_grad;
        let out = self.value(NodeId(i));
        match &self.nodes[i].op {
            Op::Leaf | Op::Param => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let ((m, k), (_, n)) = (av.dims2(), bv.dims2());
                if want(*a) {
                    let mut da = vec![0.0; m * k];
                    kernels::matmul_bt_acc(g.data(), bv.data(), &mut da, m, k, n);
                    send(adj, *a, Tensor::from_parts(av.shape().to_vec(), da));
                }
                if want(*b) {
                    let mut db = vec![0.0; k * n];
                    kernels::matmul_at_acc(av.data(), g.data(), &mut db, m, k, n);
                    send(adj, *b, Tensor::from_parts(bv.shape().to_vec(), db));
                }
            }
            Op::Transpose(x) => {
                let xv = self.value(*x);
                let (m, n) = xv.dims2();
                let mut dx = vec![0.0; m * n];
                for i in 0..m {
                    for j in 0..n {
                        dx[i * n + j] = g.data()[j * m + i];
                    }
                }
                send(adj, *x, Tensor::from_parts(xv.shape().to_vec(), dx));
            }
            Op::Add(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                if want(*a) {
                    send(adj, *a, g.clone());
                }
                if want(*b) {
                    let (ad, bd) = (av.dims2(), bv.dims2());
                    send(adj, *b, reduce_to(g, ad, bv.shape(), bd));
                }
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (m, n) = av.dims2();
                let (bm, bn) = bv.dims2();
                if want(*a) {
                    let mut da = g.data().to_vec();
                    for i in 0..m {
                        for j in 0..n {
                            da[i * n + j] *= bv.data()[(i % bm) * bn + (j % bn)];
                        }
                    }
                    send(adj, *a, Tensor::from_parts(av.shape().to_vec(), da));
                }
                if want(*b) {
                    let prod = Tensor::from_parts(
                        av.shape().to_vec(),
                        g.data().iter().zip(av.data()).map(|(x, y)| x * y).collect(),
                    );
                    send(adj, *b, reduce_to(&prod, (m, n), bv.shape(), (bm, bn)));
                }
            }
            Op::Scale(x, f) => send(adj, *x, g.map(|v| v * f)),
            Op::Concat { parts, axis } => {
                let mut offset = 0;
                let (_, total_cols) = out.dims2();
                for &p in parts {
                    let pv = self.value(p);
                    let (m, n) = pv.dims2();
                    if want(p) {
                        let d = match axis {
                            Axis::Rows => g.data()[offset * total_cols..(offset + m) * total_cols].to_vec(),
                            Axis::Cols => {
                                let mut d = Vec::with_capacity(m * n);
                                for i in 0..m {
                                    d.extend_from_slice(&g.row(i)[offset..offset + n]);
                                }
                                d
                            }
                        };
                        send(adj, p, Tensor::from_parts(pv.shape().to_vec(), d));
                    }
                    offset += match axis {
                        Axis::Rows => m,
                        Axis::Cols => n,
                    };
                }
            }
            Op::Tanh(x) => send(adj, *x, zip_map(g, out, |gv, y| gv * (1.0 - y * y))),
            Op::Sigmoid(x) => send(adj, *x, zip_map(g, out, |gv, y| gv * y * (1.0 - y))),
            Op::Relu(x) => send(
                adj,
                *x,
                zip_map(g, self.value(*x), |gv, v| if v > 0.0 { gv } else { 0.0 }),
            ),
            Op::Log(x) => send(adj, *x, zip_map(g, self.value(*x), |gv, v| gv / v)),
            Op::XLogX(x) => send(
                adj,
                *x,
                zip_map(
                    g,
                    self.value(*x),
                    |gv, v| if v > 0.0 { gv * (v.ln() + 1.0) } else { 0.0 },
                ),
            ),
            Op::Softmax { x, axis, temperature } => {
                let (m, n) = out.dims2();
                let tau = temperature.map_or(1.0, |t| self.value(t).item());
                let y = out.data();
                let mut dz = vec![0.0; m * n];
                let (lanes, lane_len) = match axis {
                    Axis::Cols => (m, n),
                    Axis::Rows => (n, m),
                };
                let index = |lane: usize, k: usize| match axis {
                    Axis::Cols => lane * n + k,
                    Axis::Rows => k * n + lane,
                };
                for lane in 0..lanes {
                    let dot: f64 = (0..lane_len)
                        .map(|k| g.data()[index(lane, k)] * y[index(lane, k)])
                        .sum();
                    for k in 0..lane_len {
                        let idx = index(lane, k);
                        dz[idx] = y[idx] * (g.data()[idx] - dot);
                    }
                }
                let xv = self.value(*x);
                if let Some(t) = temperature {
                    if want(*t) {
                        let dtau: f64 = -dz.iter().zip(xv.data()).map(|(d, xval)| d * xval).sum::<f64>() / (tau * tau);
                        send(adj, *t, Tensor::full(self.value(*t).shape(), dtau));
                    }
                }
                if want(*x) {
                    send(
                        adj,
                        *x,
                        Tensor::from_parts(xv.shape().to_vec(), dz.iter().map(|d| d / tau).collect()),
                    );
                }
            }
            Op::Sum { x, axis } | Op::Mean { x, axis } => {
                let xv = self.value(*x);
                let (m, n) = xv.dims2();
                let count = match axis {
                    None => m * n,
                    Some(Axis::Rows) => m,
                    Some(Axis::Cols) => n,
                };
                let f = if matches!(self.nodes[i].op, Op::Mean { .. }) {
                    1.0 / count as f64
                } else {
                    1.0
                };
                let mut dx = vec![0.0; m * n];
                for r in 0..m {
                    for c in 0..n {
                        let gi = match axis {
                            None => 0,
                            Some(Axis::Rows) => c,
                            Some(Axis::Cols) => r,
                        };
                        dx[r * n + c] = g.data()[gi] * f;
                    }
                }
                send(adj, *x, Tensor::from_parts(xv.shape().to_vec(), dx));
            }
            Op::Conv1d { x, w, b, geom } => {
                let (xv, wv) = (self.value(*x), self.value(*w));
                let (len, c_in) = xv.dims2();
                let (g_len, c_out) = g.dims2();
                if want(*x) {
                    let mut dx = vec![0.0; len * c_in];
                    kernels::conv_scatter(g.data(), wv.data(), &mut dx, g_len, c_out, c_in, *geom);
                    send(adj, *x, Tensor::from_parts(xv.shape().to_vec(), dx));
                }
                if want(*w) {
                    let mut dw = vec![0.0; wv.numel()];
                    kernels::conv_weight_grad(g.data(), xv.data(), &mut dw, g_len, len, c_out, c_in, *geom);
                    send(adj, *w, Tensor::from_parts(wv.shape().to_vec(), dw));
                }
                if let Some(b) = b.filter(|&b| want(b)) {
                    send(adj, b, column_sums(g, self.value(b).shape()));
                }
            }
            Op::ConvTranspose1d { x, w, b, geom } => {
                let (xv, wv) = (self.value(*x), self.value(*w));
                let (len, c_in) = xv.dims2();
                let (g_len, c_out) = g.dims2();
                // The forward scatter is conv1d's input gradient, so the
                // adjoint here is an ordinary conv1d of the output gradient.
                if want(*x) {
                    let mut dx = vec![0.0; len * c_in];
                    kernels::conv1d_forward(g.data(), wv.data(), &mut dx, g_len, c_out, c_in, *geom);
                    send(adj, *x, Tensor::from_parts(xv.shape().to_vec(), dx));
                }
                if want(*w) {
                    let mut dw = vec![0.0; wv.numel()];
                    kernels::conv_weight_grad(xv.data(), g.data(), &mut dw, len, g_len, c_in, c_out, *geom);
                    send(adj, *w, Tensor::from_parts(wv.shape().to_vec(), dw));
                }
                if let Some(b) = b.filter(|&b| want(b)) {
                    send(adj, b, column_sums(g, self.value(b).shape()));
                }
            }
            Op::AvgPool1d { x, kernel, stride } => {
                let xv = self.value(*x);
                let (len, c) = xv.dims2();
                let out_len = g.rows();
                let inv = 1.0 / *kernel as f64;
                let mut dx = vec![0.0; len * c];
                for t in 0..out_len {
                    for k in 0..*kernel {
                        let src = t * stride + k;
                        for j in 0..c {
                            dx[src * c + j] += g.data()[t * c + j] * inv;
                        }
                    }
                }
                send(adj, *x, Tensor::from_parts(xv.shape().to_vec(), dx));
            }
            Op::GlobalMaxPool { x, argmax } => {
                let xv = self.value(*x);
                let (len, c) = xv.dims2();
                let mut dx = vec![0.0; len * c];
                for (j, &t) in argmax.iter().enumerate() {
                    dx[t * c + j] = g.data()[j];
                }
                send(adj, *x, Tensor::from_parts(xv.shape().to_vec(), dx));
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let (m, n) = out.dims2();
                let gam = self.value(*gamma).data();
                if want(*x) {
                    let mut dx = vec![0.0; m * n];
                    for r in 0..m {
                        let gr = g.row(r);
                        let xh = &xhat[r * n..(r + 1) * n];
                        let dxh: Vec<f64> = gr.iter().zip(gam).map(|(a, b)| a * b).collect();
                        let mean_d = dxh.iter().sum::<f64>() / n as f64;
                        let mean_dx = dxh.iter().zip(xh).map(|(a, b)| a * b).sum::<f64>() / n as f64;
                        for j in 0..n {
                            dx[r * n + j] = inv_std[r] * (dxh[j] - mean_d - xh[j] * mean_dx);
                        }
                    }
                    send(adj, *x, Tensor::from_parts(self.value(*x).shape().to_vec(), dx));
                }
                if want(*gamma) {
                    let mut dg = vec![0.0; n];
                    for r in 0..m {
                        for j in 0..n {
                            dg[j] += g.data()[r * n + j] * xhat[r * n + j];
                        }
                    }
                    send(adj, *gamma, Tensor::from_parts(self.value(*gamma).shape().to_vec(), dg));
                }
                if want(*beta) {
                    send(adj, *beta, column_sums(g, self.value(*beta).shape()));
                }
            }
            Op::Dropout { x, scale } => send(
                adj,
                *x,
                Tensor::from_parts(
                    g.shape().to_vec(),
                    g.data().iter().zip(scale).map(|(a, s)| a * s).collect(),
                ),
            ),
            Op::Slice { x, axis, start } => {
                let xv = self.value(*x);
                let (m, n) = xv.dims2();
                let mut dx = vec![0.0; m * n];
                match axis {
                    Axis::Rows => {
                        dx[start * n..start * n + g.numel()].copy_from_slice(g.data());
                    }
                    Axis::Cols => {
                        let len = g.cols();
                        for r in 0..m {
                            dx[r * n + start..r * n + start + len].copy_from_slice(g.row(r));
                        }
                    }
                }
                send(adj, *x, Tensor::from_parts(xv.shape().to_vec(), dx));
            }
        }
    }
}

fn zip_map(g: &Tensor, other: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    Tensor::from_parts(
        other.shape().to_vec(),
        g.data().iter().zip(other.data()).map(|(&a, &b)| f(a, b)).collect(),
    )
}

fn column_sums(g: &Tensor, shape: &[usize]) -> Tensor {
    let (m, n) = g.dims2();
    let mut out = vec![0.0; n];
    for r in 0..m {
        for (o, v) in out.iter_mut().zip(g.row(r)) {
            *o += v;
        }
    }
    Tensor::from_parts(shape.to_vec(), out)
}

fn reduce(x: &Tensor, axis: Option<Axis>, mean: bool) -> Tensor {
    let (m, n) = x.dims2();
    match axis {
        None => {
            let s: f64 = x.data().iter().sum();
            Tensor::scalar(if mean { s / (m * n) as f64 } else { s })
        }
        Some(Axis::Rows) => {
            let mut out = vec![0.0; n];
            for r in 0..m {
                for (o, v) in out.iter_mut().zip(x.row(r)) {
                    *o += v;
                }
            }
            if mean {
                out.iter_mut().for_each(|v| *v /= m as f64);
            }
            Tensor::from_parts(vec![1, n], out)
        }
        Some(Axis::Cols) => {
            let out = (0..m)
                .map(|r| {
                    let s: f64 = x.row(r).iter().sum();
                    if mean {
                        s / n as f64
                    } else {
                        s
                    }
                })
                .collect();
            Tensor::from_parts(vec![m, 1], out)
        }
    }
}
