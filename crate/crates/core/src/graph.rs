//! Reverse-mode automatic differentiation over a linear tape.
//!
//! A [`Graph`] is built fresh for every forward pass: leaves hold inputs and
//! named parameters, interior nodes cache the output tensor of one operation.
//! Tape order is topological by construction, so [`Graph::backward`] walks the
//! nodes once in reverse and accumulates gradients into the parameter leaves.
//!
//! Operations validate shapes up front and reject non-finite outputs instead
//! of letting NaN propagate silently. Dropout is inverted dropout with a mask
//! drawn from the graph's own seeded rng, so a training step replays exactly
//! given the same seed. The only broadcast form is a single row (`[n]` or
//! `[1,n]`) added across the leading axis of an `[m,n]` operand.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::rng::SeededRng;
use crate::tensor::{self, Tensor};

#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub struct NodeId(usize);

/// Escape hatch for operations with hand-derived backward passes (CTC).
pub trait CustomOp: std::fmt::Debug {
    fn name(&self) -> &'static str;
    fn forward(&self, inputs: &[&Tensor]) -> Result<Tensor>;
    /// Gradients w.r.t. each input, given upstream `grad` of the output.
    fn backward(&self, inputs: &[&Tensor], output: &Tensor, grad: &Tensor) -> Result<Vec<Tensor>>;
}

#[derive(Debug)]
enum Op {
    Leaf,
    Param(String),
    MatMul,
    Transpose,
    Add,
    Mul,
    Scale(f64),
    Gelu,
    LayerNorm,
    LogSoftmax,
    Softmax,
    Embed(Vec<usize>),
    Dropout(Vec<f64>),
    Sum,
    Pick(Vec<(usize, usize)>),
    Stack,
    SliceCols { start: usize, len: usize },
    ConcatCols,
    Custom(Box<dyn CustomOp>),
}

#[derive(Debug)]
struct Node {
    op: Op,
    parents: Vec<usize>,
    value: Tensor,
}

/// Named parameter tensors, iterated in sorted-name order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamSet {
    map: BTreeMap<String, Tensor>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) {
        self.map.insert(name.into(), value);
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.map
            .get(name)
            .ok_or_else(|| Error::InvalidArg(format!("unknown parameter {name:?}")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        self.map
            .get_mut(name)
            .ok_or_else(|| Error::InvalidArg(format!("unknown parameter {name:?}")))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.map.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.map.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor)> {
        self.map.iter_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.map.keys()
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    pub fn total_elements(&self) -> usize {
        self.map.values().map(Tensor::numel).sum()
    }
}

/// Gradient of a scalar loss w.r.t. every named parameter on the tape.
#[derive(Clone, Debug, Default)]
pub struct Gradients {
    map: BTreeMap<String, Tensor>,
}

impl Gradients {
    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.map.get(name)
    }

    pub fn accumulate(&mut self, name: &str, delta: &Tensor) {
        match self.map.get_mut(name) {
            Some(t) => {
                for (a, b) in t.data_mut().iter_mut().zip(delta.data()) {
                    *a += b;
                }
            }
            None => {
                self.map.insert(name.to_string(), delta.clone());
            }
        }
    }

    /// Element-wise sum with another gradient set (batch accumulation).
    pub fn merge(&mut self, other: &Gradients) {
        for (name, t) in &other.map {
            self.accumulate(name, t);
        }
    }

    pub fn scale(&mut self, factor: f64) {
        for t in self.map.values_mut() {
            for v in t.data_mut() {
                *v *= factor;
            }
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.map.iter()
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }
}

const LAYER_NORM_EPS: f64 = 1e-5;

pub struct Graph {
    nodes: Vec<Node>,
    training: bool,
    rng: Option<SeededRng>,
}

impl Graph {
    /// Evaluation graph: dropout is the identity.
    pub fn eval() -> Self {
        Self {
            nodes: Vec::new(),
            training: false,
            rng: None,
        }
    }

    /// Training graph; `rng` feeds the dropout masks.
    pub fn training(rng: SeededRng) -> Self {
        Self {
            nodes: Vec::new(),
            training: true,
            rng: Some(rng),
        }
    }

    pub fn is_training(&self) -> bool {
        self.training
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, op: Op, parents: Vec<usize>, value: Tensor) -> Result<NodeId> {
        if !value.is_finite() {
            return Err(Error::NonFinite {
                op: op_name(&op).to_string(),
            });
        }
        self.nodes.push(Node { op, parents, value });
        Ok(NodeId(self.nodes.len() - 1))
    }

    pub fn constant(&mut self, value: Tensor) -> Result<NodeId> {
        self.push(Op::Leaf, vec![], value)
    }

    /// Named parameter leaf; gradients accumulate under `name`.
    pub fn param(&mut self, name: &str, value: &Tensor) -> Result<NodeId> {
        self.push(Op::Param(name.to_string()), vec![], value.clone())
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let out = tensor::matmul(self.value(a), self.value(b))?;
        self.push(Op::MatMul, vec![a.0, b.0], out)
    }

    pub fn transpose(&mut self, a: NodeId) -> Result<NodeId> {
        let out = tensor::transpose(self.value(a))?;
        self.push(Op::Transpose, vec![a.0], out)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (av, bv) = (self.value(a), self.value(b));
        let out = if av.shape() == bv.shape() {
            let data = av
                .data()
                .iter()
                .zip(bv.data())
                .map(|(x, y)| x + y)
                .collect();
            Tensor::new(av.shape().to_vec(), data)?
        } else if broadcastable_row(av, bv) {
            let (m, n) = av.dims2();
            let mut data = Vec::with_capacity(m * n);
            for i in 0..m {
                for j in 0..n {
                    data.push(av.data()[i * n + j] + bv.data()[j]);
                }
            }
            Tensor::new(av.shape().to_vec(), data)?
        } else {
            return Err(Error::ShapeMismatch {
                op: "add",
                lhs: av.shape().to_vec(),
                rhs: bv.shape().to_vec(),
            });
        };
        self.push(Op::Add, vec![a.0, b.0], out)
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() != bv.shape() {
            return Err(Error::ShapeMismatch {
                op: "mul",
                lhs: av.shape().to_vec(),
                rhs: bv.shape().to_vec(),
            });
        }
        let data = av
            .data()
            .iter()
            .zip(bv.data())
            .map(|(x, y)| x * y)
            .collect();
        let out = Tensor::new(av.shape().to_vec(), data)?;
        self.push(Op::Mul, vec![a.0, b.0], out)
    }

    pub fn scale(&mut self, a: NodeId, factor: f64) -> Result<NodeId> {
        let av = self.value(a);
        let data = av.data().iter().map(|x| x * factor).collect();
        let out = Tensor::new(av.shape().to_vec(), data)?;
        self.push(Op::Scale(factor), vec![a.0], out)
    }

    pub fn gelu(&mut self, a: NodeId) -> Result<NodeId> {
        let av = self.value(a);
        let data = av.data().iter().map(|&x| gelu(x)).collect();
        let out = Tensor::new(av.shape().to_vec(), data)?;
        self.push(Op::Gelu, vec![a.0], out)
    }

    /// Layer normalization over the last axis with learned gain and bias.
    /// A zero-variance row normalizes to zeros (the epsilon clamps the
    /// denominator), so constant inputs map to `bias`.
    pub fn layer_norm(&mut self, x: NodeId, gain: NodeId, bias: NodeId) -> Result<NodeId> {
        let xv = self.value(x);
        let (m, n) = xv.dims2();
        for (other, which) in [(gain, "gain"), (bias, "bias")] {
            let ov = self.value(other);
            if ov.numel() != n || ov.rank() != 1 {
                return Err(Error::InvalidArg(format!(
                    "layer_norm {which} shape {:?} does not match width {n}",
                    ov.shape()
                )));
            }
        }
        let gv = self.value(gain).data().to_vec();
        let bv = self.value(bias).data().to_vec();
        let mut data = Vec::with_capacity(m * n);
        for i in 0..m {
            let row = &self.value(x).data()[i * n..(i + 1) * n];
            let (x_hat, _) = normalize_row(row);
            for j in 0..n {
                data.push(gv[j] * x_hat[j] + bv[j]);
            }
        }
        let out = Tensor::new(self.value(x).shape().to_vec(), data)?;
        self.push(Op::LayerNorm, vec![x.0, gain.0, bias.0], out)
    }

    /// Row-wise log-softmax via max-shifted logsumexp.
    pub fn log_softmax(&mut self, a: NodeId) -> Result<NodeId> {
        let av = self.value(a);
        let (m, n) = av.dims2();
        let mut data = Vec::with_capacity(m * n);
        for i in 0..m {
            let row = &av.data()[i * n..(i + 1) * n];
            let lse = log_sum_exp(row);
            data.extend(row.iter().map(|x| x - lse));
        }
        let out = Tensor::new(av.shape().to_vec(), data)?;
        self.push(Op::LogSoftmax, vec![a.0], out)
    }

    /// Row-wise softmax (attention weights, N-best normalization).
    pub fn softmax(&mut self, a: NodeId) -> Result<NodeId> {
        let av = self.value(a);
        let (m, n) = av.dims2();
        let mut data = Vec::with_capacity(m * n);
        for i in 0..m {
            let row = &av.data()[i * n..(i + 1) * n];
            data.extend(softmax_row(row));
        }
        let out = Tensor::new(av.shape().to_vec(), data)?;
        self.push(Op::Softmax, vec![a.0], out)
    }

    /// Row lookup: `table [v, d]` gathered at `ids` into `[len(ids), d]`.
    pub fn embed(&mut self, table: NodeId, ids: &[usize]) -> Result<NodeId> {
        let tv = self.value(table);
        if tv.rank() != 2 {
            return Err(Error::InvalidArg(format!(
                "embed table must be rank 2, got {:?}",
                tv.shape()
            )));
        }
        let (v, d) = tv.dims2();
        let mut data = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= v {
                return Err(Error::UnknownToken {
                    id,
                    valid: format!("0..{v}"),
                });
            }
            data.extend_from_slice(tv.row(id));
        }
        let out = Tensor::new(vec![ids.len(), d], data)?;
        self.push(Op::Embed(ids.to_vec()), vec![table.0], out)
    }

    /// Inverted dropout. In eval mode (or at rate 0) this is the identity and
    /// adds no node; in training the kept mask is drawn from the graph rng.
    pub fn dropout(&mut self, a: NodeId, rate: f64) -> Result<NodeId> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::InvalidArg(format!("dropout rate {rate} not in [0,1)")));
        }
        if !self.training || rate == 0.0 {
            return Ok(a);
        }
        let numel = self.value(a).numel();
        let rng = self.rng.as_mut().expect("training graph holds an rng");
        let keep_scale = 1.0 / (1.0 - rate);
        let mask: Vec<f64> = (0..numel)
            .map(|_| if rng.uniform_f64() < rate { 0.0 } else { keep_scale })
            .collect();
        let av = self.value(a);
        let data = av.data().iter().zip(&mask).map(|(x, m)| x * m).collect();
        let out = Tensor::new(av.shape().to_vec(), data)?;
        self.push(Op::Dropout(mask), vec![a.0], out)
    }

    /// Sum of all elements, as a scalar node.
    pub fn sum(&mut self, a: NodeId) -> Result<NodeId> {
        let total: f64 = self.value(a).data().iter().sum();
        self.push(Op::Sum, vec![a.0], Tensor::scalar(total))
    }

    /// Gather `x[r, c]` for each coordinate into a vector node.
    pub fn pick(&mut self, a: NodeId, coords: &[(usize, usize)]) -> Result<NodeId> {
        let av = self.value(a);
        let (m, n) = av.dims2();
        let mut data = Vec::with_capacity(coords.len());
        for &(r, c) in coords {
            if r >= m || c >= n {
                return Err(Error::InvalidArg(format!(
                    "pick ({r},{c}) out of bounds for [{m},{n}]"
                )));
            }
            data.push(av.data()[r * n + c]);
        }
        let out = Tensor::new(vec![coords.len()], data)?;
        self.push(Op::Pick(coords.to_vec()), vec![a.0], out)
    }

    /// Concatenate scalar nodes into a vector node.
    pub fn stack(&mut self, scalars: &[NodeId]) -> Result<NodeId> {
        if scalars.is_empty() {
            return Err(Error::InvalidArg("stack of zero nodes".into()));
        }
        let mut data = Vec::with_capacity(scalars.len());
        for &s in scalars {
            data.push(self.value(s).item()?);
        }
        let out = Tensor::new(vec![scalars.len()], data)?;
        self.push(Op::Stack, scalars.iter().map(|s| s.0).collect(), out)
    }

    pub fn slice_cols(&mut self, a: NodeId, start: usize, len: usize) -> Result<NodeId> {
        let av = self.value(a);
        let (m, n) = av.dims2();
        if av.rank() != 2 || start + len > n || len == 0 {
            return Err(Error::InvalidArg(format!(
                "slice_cols [{start}..{}) of shape {:?}",
                start + len,
                av.shape()
            )));
        }
        let mut data = Vec::with_capacity(m * len);
        for i in 0..m {
            data.extend_from_slice(&av.data()[i * n + start..i * n + start + len]);
        }
        let out = Tensor::new(vec![m, len], data)?;
        self.push(Op::SliceCols { start, len }, vec![a.0], out)
    }

    pub fn concat_cols(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        if parts.is_empty() {
            return Err(Error::InvalidArg("concat_cols of zero nodes".into()));
        }
        let m = self.value(parts[0]).dims2().0;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let pv = self.value(p);
            if pv.rank() != 2 || pv.dims2().0 != m {
                return Err(Error::ShapeMismatch {
                    op: "concat_cols",
                    lhs: self.value(parts[0]).shape().to_vec(),
                    rhs: pv.shape().to_vec(),
                });
            }
            widths.push(pv.dims2().1);
        }
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(m * total);
        for i in 0..m {
            for &p in parts {
                data.extend_from_slice(self.value(p).row(i));
            }
        }
        let out = Tensor::new(vec![m, total], data)?;
        self.push(Op::ConcatCols, parts.iter().map(|p| p.0).collect(), out)
    }

    /// Apply a [`CustomOp`] node.
    pub fn custom(&mut self, op: Box<dyn CustomOp>, parents: &[NodeId]) -> Result<NodeId> {
        let inputs: Vec<&Tensor> = parents.iter().map(|&p| self.value(p)).collect();
        let out = op.forward(&inputs)?;
        self.push(Op::Custom(op), parents.iter().map(|p| p.0).collect(), out)
    }

    /// Reverse sweep from a scalar loss. Each node is visited exactly once,
    /// in reverse tape (= reverse topological) order.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients> {
        let loss_value = self.value(loss);
        if loss_value.numel() != 1 {
            return Err(Error::InvalidArg(format!(
                "backward needs a scalar loss, got shape {:?}",
                loss_value.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(Tensor::full(loss_value.shape(), 1.0));
        let mut out = Gradients::default();

        for i in (0..=loss.0).rev() {
            let Some(grad) = grads[i].take() else {
                continue;
            };
            let node = &self.nodes[i];
            match &node.op {
                Op::Leaf => {}
                Op::Param(name) => out.accumulate(name, &grad),
                Op::MatMul => {
                    let a = &self.nodes[node.parents[0]].value;
                    let b = &self.nodes[node.parents[1]].value;
                    let da = tensor::matmul(&grad, &tensor::transpose(b)?)?;
                    let db = tensor::matmul(&tensor::transpose(a)?, &grad)?;
                    accum(&mut grads, node.parents[0], da);
                    accum(&mut grads, node.parents[1], db);
                }
                Op::Transpose => {
                    accum(&mut grads, node.parents[0], tensor::transpose(&grad)?);
                }
                Op::Add => {
                    let b = &self.nodes[node.parents[1]].value;
                    accum(&mut grads, node.parents[0], grad.clone());
                    if b.shape() == grad.shape() {
                        accum(&mut grads, node.parents[1], grad);
                    } else {
                        // Row-broadcast add: fold the grad over rows.
                        let (_, n) = grad.dims2();
                        let mut db = vec![0.0; n];
                        for row in grad.data().chunks_exact(n) {
                            for (acc, g) in db.iter_mut().zip(row) {
                                *acc += g;
                            }
                        }
                        accum(
                            &mut grads,
                            node.parents[1],
                            Tensor::new(b.shape().to_vec(), db)?,
                        );
                    }
                }
                Op::Mul => {
                    let a = &self.nodes[node.parents[0]].value;
                    let b = &self.nodes[node.parents[1]].value;
                    let da = elementwise(&grad, b, |g, y| g * y)?;
                    let db = elementwise(&grad, a, |g, x| g * x)?;
                    accum(&mut grads, node.parents[0], da);
                    accum(&mut grads, node.parents[1], db);
                }
                Op::Scale(c) => {
                    let da = map_tensor(&grad, |g| g * c);
                    accum(&mut grads, node.parents[0], da);
                }
                Op::Gelu => {
                    let x = &self.nodes[node.parents[0]].value;
                    let da = elementwise(&grad, x, |g, x| g * gelu_grad(x))?;
                    accum(&mut grads, node.parents[0], da);
                }
                Op::LayerNorm => {
                    let x = &self.nodes[node.parents[0]].value;
                    let gain = &self.nodes[node.parents[1]].value;
                    let (m, n) = x.dims2();
                    let mut dx = vec![0.0; m * n];
                    let mut dgain = vec![0.0; n];
                    let mut dbias = vec![0.0; n];
                    for r in 0..m {
                        let row = &x.data()[r * n..(r + 1) * n];
                        let g_row = &grad.data()[r * n..(r + 1) * n];
                        let (x_hat, sigma) = normalize_row(row);
                        let mut d_hat = vec![0.0; n];
                        for j in 0..n {
                            dgain[j] += g_row[j] * x_hat[j];
                            dbias[j] += g_row[j];
                            d_hat[j] = g_row[j] * gain.data()[j];
                        }
                        let mean_d: f64 = d_hat.iter().sum::<f64>() / n as f64;
                        let mean_dx: f64 = d_hat
                            .iter()
                            .zip(&x_hat)
                            .map(|(d, h)| d * h)
                            .sum::<f64>()
                            / n as f64;
                        for j in 0..n {
                            dx[r * n + j] = (d_hat[j] - mean_d - x_hat[j] * mean_dx) / sigma;
                        }
                    }
                    accum(&mut grads, node.parents[0], Tensor::new(x.shape().to_vec(), dx)?);
                    accum(&mut grads, node.parents[1], Tensor::new(vec![n], dgain)?);
                    accum(&mut grads, node.parents[2], Tensor::new(vec![n], dbias)?);
                }
                Op::LogSoftmax => {
                    let x = &self.nodes[node.parents[0]].value;
                    let (m, n) = x.dims2();
                    let mut dx = vec![0.0; m * n];
                    for r in 0..m {
                        let row = &x.data()[r * n..(r + 1) * n];
                        let g_row = &grad.data()[r * n..(r + 1) * n];
                        let probs = softmax_row(row);
                        let g_sum: f64 = g_row.iter().sum();
                        for j in 0..n {
                            dx[r * n + j] = g_row[j] - probs[j] * g_sum;
                        }
                    }
                    accum(&mut grads, node.parents[0], Tensor::new(x.shape().to_vec(), dx)?);
                }
                Op::Softmax => {
                    let y = &node.value;
                    let (m, n) = y.dims2();
                    let mut dx = vec![0.0; m * n];
                    for r in 0..m {
                        let y_row = &y.data()[r * n..(r + 1) * n];
                        let g_row = &grad.data()[r * n..(r + 1) * n];
                        let dot: f64 = y_row.iter().zip(g_row).map(|(y, g)| y * g).sum();
                        for j in 0..n {
                            dx[r * n + j] = y_row[j] * (g_row[j] - dot);
                        }
                    }
                    accum(&mut grads, node.parents[0], Tensor::new(y.shape().to_vec(), dx)?);
                }
                Op::Embed(ids) => {
                    let table = &self.nodes[node.parents[0]].value;
                    let (v, d) = table.dims2();
                    let mut dt = vec![0.0; v * d];
                    for (i, &id) in ids.iter().enumerate() {
                        for j in 0..d {
                            dt[id * d + j] += grad.data()[i * d + j];
                        }
                    }
                    accum(
                        &mut grads,
                        node.parents[0],
                        Tensor::new(table.shape().to_vec(), dt)?,
                    );
                }
                Op::Dropout(mask) => {
                    let data = grad.data().iter().zip(mask).map(|(g, m)| g * m).collect();
                    accum(
                        &mut grads,
                        node.parents[0],
                        Tensor::new(grad.shape().to_vec(), data)?,
                    );
                }
                Op::Sum => {
                    let x = &self.nodes[node.parents[0]].value;
                    let g = grad.item()?;
                    accum(&mut grads, node.parents[0], Tensor::full(x.shape(), g));
                }
                Op::Pick(coords) => {
                    let x = &self.nodes[node.parents[0]].value;
                    let (_, n) = x.dims2();
                    let mut dx = Tensor::zeros(x.shape());
                    for (i, &(r, c)) in coords.iter().enumerate() {
                        dx.data_mut()[r * n + c] += grad.data()[i];
                    }
                    accum(&mut grads, node.parents[0], dx);
                }
                Op::Stack => {
                    for (i, &p) in node.parents.iter().enumerate() {
                        let shape = self.nodes[p].value.shape().to_vec();
                        accum(
                            &mut grads,
                            p,
                            Tensor::new(shape, vec![grad.data()[i]])?,
                        );
                    }
                }
                Op::SliceCols { start, len } => {
                    let x = &self.nodes[node.parents[0]].value;
                    let (m, n) = x.dims2();
                    let mut dx = Tensor::zeros(x.shape());
                    for i in 0..m {
                        for j in 0..*len {
                            dx.data_mut()[i * n + start + j] = grad.data()[i * len + j];
                        }
                    }
                    accum(&mut grads, node.parents[0], dx);
                }
                Op::ConcatCols => {
                    let (m, _) = node.value.dims2();
                    let total = node.value.dims2().1;
                    let mut offset = 0;
                    for &p in &node.parents {
                        let pv = &self.nodes[p].value;
                        let w = pv.dims2().1;
                        let mut dp = Tensor::zeros(pv.shape());
                        for i in 0..m {
                            for j in 0..w {
                                dp.data_mut()[i * w + j] = grad.data()[i * total + offset + j];
                            }
                        }
                        accum(&mut grads, p, dp);
                        offset += w;
                    }
                }
                Op::Custom(op) => {
                    let inputs: Vec<&Tensor> = node
                        .parents
                        .iter()
                        .map(|&p| &self.nodes[p].value)
                        .collect();
                    let parent_grads = op.backward(&inputs, &node.value, &grad)?;
                    if parent_grads.len() != node.parents.len() {
                        return Err(Error::InvalidArg(format!(
                            "custom op {} returned {} gradients for {} inputs",
                            op.name(),
                            parent_grads.len(),
                            node.parents.len()
                        )));
                    }
                    for (p, g) in node.parents.iter().zip(parent_grads) {
                        accum(&mut grads, *p, g);
                    }
                }
            }
        }
        Ok(out)
    }
}

fn op_name(op: &Op) -> &str {
    match op {
        Op::Leaf => "leaf",
        Op::Param(_) => "param",
        Op::MatMul => "matmul",
        Op::Transpose => "transpose",
        Op::Add => "add",
        Op::Mul => "mul",
        Op::Scale(_) => "scale",
        Op::Gelu => "gelu",
        Op::LayerNorm => "layer_norm",
        Op::LogSoftmax => "log_softmax",
        Op::Softmax => "softmax",
        Op::Embed(_) => "embed",
        Op::Dropout(_) => "dropout",
        Op::Sum => "sum",
        Op::Pick(_) => "pick",
        Op::Stack => "stack",
        Op::SliceCols { .. } => "slice_cols",
        Op::ConcatCols => "concat_cols",
        Op::Custom(op) => op.name(),
    }
}

fn broadcastable_row(a: &Tensor, b: &Tensor) -> bool {
    if a.rank() != 2 {
        return false;
    }
    let n = a.dims2().1;
    b.shape() == [n] || b.shape() == [1, n]
}

fn accum(grads: &mut [Option<Tensor>], idx: usize, delta: Tensor) {
    match &mut grads[idx] {
        Some(t) => {
            for (a, b) in t.data_mut().iter_mut().zip(delta.data()) {
                *a += b;
            }
        }
        slot @ None => *slot = Some(delta),
    }
}

fn elementwise(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
    let data = a.data().iter().zip(b.data()).map(|(x, y)| f(*x, *y)).collect();
    Tensor::new(a.shape().to_vec(), data)
}

fn map_tensor(a: &Tensor, f: impl Fn(f64) -> f64) -> Tensor {
    Tensor::new(a.shape().to_vec(), a.data().iter().map(|x| f(*x)).collect()).unwrap()
}

const GELU_SCALE: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_CUBIC: f64 = 0.044715;

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_SCALE * (x + GELU_CUBIC * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let u = GELU_SCALE * (x + GELU_CUBIC * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_SCALE * (1.0 + 3.0 * GELU_CUBIC * x * x)
}

/// Row normalization shared by forward and backward: returns (x_hat, sigma).
fn normalize_row(row: &[f64]) -> (Vec<f64>, f64) {
    let n = row.len() as f64;
    let mean = row.iter().sum::<f64>() / n;
    let var = row.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    let sigma = (var + LAYER_NORM_EPS).sqrt();
    (row.iter().map(|x| (x - mean) / sigma).collect(), sigma)
}

/// Max-shifted log-sum-exp; tolerates -inf entries (they contribute zero).
pub fn log_sum_exp(row: &[f64]) -> f64 {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    let sum: f64 = row.iter().map(|x| (x - max).exp()).sum();
    max + sum.ln()
}

pub fn softmax_row(row: &[f64]) -> Vec<f64> {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = row.iter().map(|x| (x - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.iter().map(|e| e / sum).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn square_gradient() {
        // loss = x^2 at x = 3 -> d loss / dx = 6
        let mut g = Graph::eval();
        let x = g.param("x", &Tensor::scalar(3.0)).unwrap();
        let sq = g.mul(x, x).unwrap();
        let loss = g.sum(sq).unwrap();
        let grads = g.backward(loss).unwrap();
        assert_abs_diff_eq!(grads.get("x").unwrap().data()[0], 6.0);
    }

    #[test]
    fn linear_map_gradient_structure() {
        // loss = sum(W v): dW[i][j] = v[j]
        let mut g = Graph::eval();
        let w = g
            .param("w", &Tensor::new(vec![2, 3], vec![1., 2., 3., 4., 5., 6.]).unwrap())
            .unwrap();
        let v = g
            .constant(Tensor::new(vec![3, 1], vec![10., 20., 30.]).unwrap())
            .unwrap();
        let prod = g.matmul(w, v).unwrap();
        let loss = g.sum(prod).unwrap();
        let grads = g.backward(loss).unwrap();
        let dw = grads.get("w").unwrap();
        assert_eq!(dw.data(), &[10., 20., 30., 10., 20., 30.]);
    }

    #[test]
    fn log_softmax_uniform() {
        let mut g = Graph::eval();
        let x = g.constant(Tensor::new(vec![4], vec![0.0; 4]).unwrap()).unwrap();
        let y = g.log_softmax(x).unwrap();
        for &v in g.value(y).data() {
            assert_abs_diff_eq!(v, -(4.0f64.ln()), epsilon = 1e-15);
        }
    }

    #[test]
    fn log_softmax_rows_normalize() {
        let mut g = Graph::eval();
        let x = g
            .constant(Tensor::new(vec![2, 3], vec![1., -2., 0.5, 40., 39., -1.]).unwrap())
            .unwrap();
        let y = g.log_softmax(x).unwrap();
        for r in 0..2 {
            let total: f64 = g.value(y).row(r).iter().map(|v| v.exp()).sum();
            assert_abs_diff_eq!(total, 1.0, epsilon = 1e-12);
        }
    }

    #[test]
    fn layer_norm_constant_row_is_bias() {
        let mut g = Graph::eval();
        let x = g.constant(Tensor::new(vec![1, 4], vec![7.0; 4]).unwrap()).unwrap();
        let gain = g.constant(Tensor::new(vec![4], vec![2.0; 4]).unwrap()).unwrap();
        let bias = g.constant(Tensor::new(vec![4], vec![0.5; 4]).unwrap()).unwrap();
        let y = g.layer_norm(x, gain, bias).unwrap();
        for &v in g.value(y).data() {
            assert_abs_diff_eq!(v, 0.5, epsilon = 1e-12);
        }
    }

    #[test]
    fn backward_rejects_non_scalar_loss() {
        let mut g = Graph::eval();
        let x = g.param("x", &Tensor::new(vec![2], vec![1., 2.]).unwrap()).unwrap();
        assert!(g.backward(x).is_err());
    }

    #[test]
    fn non_finite_output_is_rejected() {
        let mut g = Graph::eval();
        let x = g.constant(Tensor::scalar(1e308)).unwrap();
        let y = g.scale(x, 10.0);
        assert!(matches!(y, Err(Error::NonFinite { .. })));
    }

    #[test]
    fn dropout_identity_in_eval() {
        let mut g = Graph::eval();
        let x = g.constant(Tensor::new(vec![3], vec![1., 2., 3.]).unwrap()).unwrap();
        let y = g.dropout(x, 0.5).unwrap();
        assert_eq!(x, y);
    }

    #[test]
    fn dropout_replays_for_same_seed() {
        let run = || {
            let mut g = Graph::training(SeededRng::new(5));
            let x = g.constant(Tensor::new(vec![8], vec![1.0; 8]).unwrap()).unwrap();
            let y = g.dropout(x, 0.4).unwrap();
            g.value(y).data().to_vec()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn pick_accumulates_repeated_coords() {
        let mut g = Graph::eval();
        let x = g
            .param("x", &Tensor::new(vec![2, 2], vec![1., 2., 3., 4.]).unwrap())
            .unwrap();
        let picked = g.pick(x, &[(0, 1), (0, 1)]).unwrap();
        let loss = g.sum(picked).unwrap();
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.get("x").unwrap().data(), &[0., 2., 0., 0.]);
    }

    #[test]
    fn slice_concat_roundtrip() {
        let mut g = Graph::eval();
        let x = g
            .constant(Tensor::new(vec![2, 4], vec![1., 2., 3., 4., 5., 6., 7., 8.]).unwrap())
            .unwrap();
        let a = g.slice_cols(x, 0, 2).unwrap();
        let b = g.slice_cols(x, 2, 2).unwrap();
        let back = g.concat_cols(&[a, b]).unwrap();
        assert_eq!(g.value(back), g.value(x));
    }
}
