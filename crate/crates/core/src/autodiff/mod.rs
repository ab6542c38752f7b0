//! Reverse-mode automatic differentiation over a define-by-run tape.
//!
//! Every primitive evaluates eagerly when it is recorded, so the tape is
//! topologically ordered by construction. [`Graph::gradients`] sweeps it in
//! exact reverse recording order.

mod fd;
pub mod kernels;

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::tensor::{Float, Tensor};

pub use fd::finite_difference_check;
use kernels::{Conv, Pool};

/// Variance floor of batch standardization.
pub const NORM_EPS: Float = 1e-5;

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Which parameter partition a trainable leaf belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Theta,
    Alpha,
    Beta,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Constant,
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, Float),
    MatMul(Var, Var),
    Conv2d { x: Var, w: Var, geom: Conv },
    Depthwise { x: Var, w: Var, geom: Conv },
    Relu(Var),
    MaxPool { x: Var, argmax: Vec<usize> },
    AvgPool { x: Var, geom: Pool },
    GlobalAvgPool(Var),
    Concat { parts: Vec<Var>, axis: usize },
    BatchNorm { x: Var, xhat: Vec<Float>, inv_std: Vec<Float> },
    FixedNorm { x: Var, inv_std: Vec<Float> },
    Softmax { x: Var, axis: usize },
    Log { x: Var, floor: Float },
    Sum(Var),
    Square(Var),
    Abs(Var),
    Pick { x: Var, index: usize },
    SoftmaxCrossEntropy { logits: Var, labels: Vec<usize>, probs: Vec<Float> },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Constant => "constant",
            Op::Add(..) => "add",
            Op::Mul(..) => "multiply",
            Op::Scale(..) => "scale",
            Op::MatMul(..) => "matmul",
            Op::Conv2d { .. } => "conv2d",
            Op::Depthwise { .. } => "depthwise_conv2d",
            Op::Relu(_) => "relu",
            Op::MaxPool { .. } => "max_pool3x3",
            Op::AvgPool { .. } => "avg_pool3x3",
            Op::GlobalAvgPool(_) => "global_avg_pool",
            Op::Concat { .. } => "concat",
            Op::BatchNorm { .. } => "batch_norm",
            Op::FixedNorm { .. } => "fixed_norm",
            Op::Softmax { .. } => "softmax",
            Op::Log { .. } => "log",
            Op::Sum(_) => "sum",
            Op::Square(_) => "square",
            Op::Abs(_) => "abs",
            Op::Pick { .. } => "pick",
            Op::SoftmaxCrossEntropy { .. } => "softmax_cross_entropy",
        }
    }
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Gradients of a scalar loss with respect to every trainable leaf.
#[derive(Debug, Default)]
pub struct Gradients {
    by_leaf: BTreeMap<Var, Tensor>,
}

impl Gradients {
    pub fn get(&self, leaf: Var) -> Option<&Tensor> {
        self.by_leaf.get(&leaf)
    }

    /// Gradient of `leaf`; panics if `leaf` is not a trainable leaf.
    pub fn of(&self, leaf: Var) -> &Tensor {
        self.by_leaf.get(&leaf).expect("gradient requested for a non-leaf")
    }

    pub fn take(&mut self, leaf: Var) -> Option<Tensor> {
        self.by_leaf.remove(&leaf)
    }

    pub fn len(&self) -> usize {
        self.by_leaf.len()
    }

    pub fn is_empty(&self) -> bool {
        self.by_leaf.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (Var, &Tensor)> {
        self.by_leaf.iter().map(|(&v, t)| (v, t))
    }
}

/// Recorded computation: values of every intermediate plus how to
/// differentiate it.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    leaves: Vec<(Var, Role)>,
}

fn shape_err(primitive: &'static str, detail: impl Into<String>) -> Error {
    Error::Shape { primitive, detail: detail.into() }
}

/// `small` can be tiled onto `big` if it is a single value or a trailing
/// suffix of `big`'s shape.
fn tiles_onto(big: &[usize], small: &[usize]) -> bool {
    small.iter().product::<usize>() == 1 || (small.len() <= big.len() && big.ends_with(small))
}

fn reduce_to(grad: &[Float], len: usize) -> Vec<Float> {
    let mut out = vec![0.0; len];
    for chunk in grad.chunks(len) {
        for (o, &g) in out.iter_mut().zip(chunk) {
            *o += g;
        }
    }
    out
}

fn rank4(primitive: &'static str, t: &Tensor) -> Result<[usize; 4]> {
    match *t.shape() {
        [n, c, h, w] => Ok([n, c, h, w]),
        ref s => Err(shape_err(primitive, format!("expected rank-4 (N, C, H, W) input, got {s:?}"))),
    }
}

fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Trainable leaves in registration order.
    pub fn leaves(&self) -> &[(Var, Role)] {
        &self.leaves
    }

    /// Name of the primitive that produced `v`.
    pub fn primitive(&self, v: Var) -> &'static str {
        self.nodes[v.0].op.name()
    }

    fn push(&mut self, op: Op, value: Tensor) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::Numeric(format!("non-finite output from {}", op.name())));
        }
        let requires_grad = match &op {
            Op::Leaf => true,
            Op::Constant => false,
            _ => self.inputs_of(&op).iter().any(|v| self.nodes[v.0].requires_grad),
        };
        self.nodes.push(Node { value, op, requires_grad });
        Ok(Var(self.nodes.len() - 1))
    }

    fn inputs_of(&self, op: &Op) -> Vec<Var> {
        match op {
            Op::Leaf | Op::Constant => vec![],
            Op::Add(a, b) | Op::Mul(a, b) | Op::MatMul(a, b) => vec![*a, *b],
            Op::Conv2d { x, w, .. } | Op::Depthwise { x, w, .. } => vec![*x, *w],
            Op::Concat { parts, .. } => parts.clone(),
            Op::Scale(x, _)
            | Op::Relu(x)
            | Op::MaxPool { x, .. }
            | Op::AvgPool { x, .. }
            | Op::GlobalAvgPool(x)
            | Op::BatchNorm { x, .. }
            | Op::FixedNorm { x, .. }
            | Op::Softmax { x, .. }
            | Op::Log { x, .. }
            | Op::Sum(x)
            | Op::Square(x)
            | Op::Abs(x)
            | Op::Pick { x, .. }
            | Op::SoftmaxCrossEntropy { logits: x, .. } => vec![*x],
        }
    }

    /// Registers a trainable leaf tagged with its parameter role.
    pub fn leaf(&mut self, value: Tensor, role: Role) -> Result<Var> {
        let v = self.push(Op::Leaf, value)?;
        self.leaves.push((v, role));
        Ok(v)
    }

    /// Records a value that is not differentiated (data, frozen parameters).
    pub fn constant(&mut self, value: Tensor) -> Result<Var> {
        self.push(Op::Constant, value)
    }

    // ---- elementwise -----------------------------------------------------

    fn binary_broadcast(
        &self,
        primitive: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(Float, Float) -> Float,
    ) -> Result<Tensor> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() == tb.shape() {
            let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
            return Tensor::new(ta.shape().to_vec(), data);
        }
        if tiles_onto(ta.shape(), tb.shape()) {
            let small = tb.data();
            let data = ta.data().iter().enumerate().map(|(i, &x)| f(x, small[i % small.len()])).collect();
            return Tensor::new(ta.shape().to_vec(), data);
        }
        if tiles_onto(tb.shape(), ta.shape()) {
            let small = ta.data();
            let data = tb.data().iter().enumerate().map(|(i, &y)| f(small[i % small.len()], y)).collect();
            return Tensor::new(tb.shape().to_vec(), data);
        }
        Err(shape_err(primitive, format!("cannot broadcast {:?} with {:?}", ta.shape(), tb.shape())))
    }

    /// Elementwise sum; a single-value or trailing-suffix operand is tiled.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.binary_broadcast("add", a, b, |x, y| x + y)?;
        self.push(Op::Add(a, b), out)
    }

    /// Elementwise product with the same broadcasting rule as [`Graph::add`].
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.binary_broadcast("multiply", a, b, |x, y| x * y)?;
        self.push(Op::Mul(a, b), out)
    }

    pub fn scale(&mut self, x: Var, factor: Float) -> Result<Var> {
        let out = self.value(x).map(|v| v * factor);
        self.push(Op::Scale(x, factor), out)
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).map(|v| v.max(0.0));
        self.push(Op::Relu(x), out)
    }

    pub fn square(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).map(|v| v * v);
        self.push(Op::Square(x), out)
    }

    pub fn abs(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).map(Float::abs);
        self.push(Op::Abs(x), out)
    }

    /// Natural log of `max(x, floor)`. With `floor == 0` this is the plain
    /// logarithm and non-positive inputs are a numeric failure.
    pub fn log(&mut self, x: Var, floor: Float) -> Result<Var> {
        let out = self.value(x).map(|v| v.max(floor).ln());
        self.push(Op::Log { x, floor }, out)
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let out = Tensor::scalar(self.value(x).sum());
        self.push(Op::Sum(x), out)
    }

    /// Single element `x[index]` of the flattened tensor, as a scalar.
    pub fn pick(&mut self, x: Var, index: usize) -> Result<Var> {
        let t = self.value(x);
        let value = *t
            .data()
            .get(index)
            .ok_or_else(|| shape_err("pick", format!("index {index} out of range for {:?}", t.shape())))?;
        self.push(Op::Pick { x, index }, Tensor::scalar(value))
    }

    // ---- linear algebra ----------------------------------------------------

    /// `[m, k] x [k, n] -> [m, n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let (m, k, n) = match (ta.shape(), tb.shape()) {
            (&[m, k], &[k2, n]) if k == k2 => (m, k, n),
            (sa, sb) => return Err(shape_err("matmul", format!("incompatible {sa:?} x {sb:?}"))),
        };
        let (da, db) = (ta.data(), tb.data());
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let row = &mut out[i * n..(i + 1) * n];
            for p in 0..k {
                let av = da[i * k + p];
                for (o, &bv) in row.iter_mut().zip(&db[p * n..(p + 1) * n]) {
                    *o += av * bv;
                }
            }
        }
        self.push(Op::MatMul(a, b), Tensor::new(vec![m, n], out)?)
    }

    fn conv_geometry(
        &self,
        primitive: &'static str,
        x: Var,
        w: Var,
        stride: usize,
        dilation: usize,
        depthwise: bool,
    ) -> Result<Conv> {
        let [n, c, h, wd] = rank4(primitive, self.value(x))?;
        let ws = self.value(w).shape();
        let (out_channels, kernel) = match *ws {
            [co, ci, k, k2] if k == k2 && k % 2 == 1 && (if depthwise { ci == 1 && co == c } else { ci == c }) => {
                (co, k)
            }
            _ => {
                return Err(shape_err(
                    primitive,
                    format!("weight {ws:?} does not fit input {:?} (odd square kernel required)", self.shape(x)),
                ))
            }
        };
        if stride == 0 || dilation == 0 {
            return Err(shape_err(primitive, "stride and dilation must be positive"));
        }
        if h % stride != 0 || wd % stride != 0 {
            return Err(shape_err(primitive, format!("spatial extent {h}x{wd} not divisible by stride {stride}")));
        }
        Ok(Conv { batch: n, in_channels: c, out_channels, height: h, width: wd, kernel, stride, dilation })
    }

    /// Same-padded 2-D convolution. `w` has shape `[C_out, C_in, k, k]`.
    pub fn conv2d(&mut self, x: Var, w: Var, stride: usize, dilation: usize) -> Result<Var> {
        let geom = self.conv_geometry("conv2d", x, w, stride, dilation, false)?;
        let out = kernels::conv2d_forward(self.value(x).data(), self.value(w).data(), &geom);
        let shape = vec![geom.batch, geom.out_channels, geom.out_height(), geom.out_width()];
        self.push(Op::Conv2d { x, w, geom }, Tensor::new(shape, out)?)
    }

    /// Same-padded depthwise convolution. `w` has shape `[C, 1, k, k]`.
    pub fn depthwise_conv2d(&mut self, x: Var, w: Var, stride: usize, dilation: usize) -> Result<Var> {
        let geom = self.conv_geometry("depthwise_conv2d", x, w, stride, dilation, true)?;
        let out = kernels::depthwise_forward(self.value(x).data(), self.value(w).data(), &geom);
        let shape = vec![geom.batch, geom.out_channels, geom.out_height(), geom.out_width()];
        self.push(Op::Depthwise { x, w, geom }, Tensor::new(shape, out)?)
    }

    // ---- pooling -----------------------------------------------------------

    fn pool_geometry(&self, primitive: &'static str, x: Var, stride: usize) -> Result<(Pool, Vec<usize>)> {
        let [n, c, h, w] = rank4(primitive, self.value(x))?;
        if stride == 0 || h % stride != 0 || w % stride != 0 {
            return Err(shape_err(primitive, format!("spatial extent {h}x{w} not divisible by stride {stride}")));
        }
        Ok((Pool { planes: n * c, height: h, width: w, stride }, vec![n, c, h / stride, w / stride]))
    }

    pub fn max_pool3x3(&mut self, x: Var, stride: usize) -> Result<Var> {
        let (geom, shape) = self.pool_geometry("max_pool3x3", x, stride)?;
        let (out, argmax) = kernels::max_pool_forward(self.value(x).data(), &geom);
        self.push(Op::MaxPool { x, argmax }, Tensor::new(shape, out)?)
    }

    pub fn avg_pool3x3(&mut self, x: Var, stride: usize) -> Result<Var> {
        let (geom, shape) = self.pool_geometry("avg_pool3x3", x, stride)?;
        let out = kernels::avg_pool_forward(self.value(x).data(), &geom);
        self.push(Op::AvgPool { x, geom }, Tensor::new(shape, out)?)
    }

    /// `[N, C, H, W] -> [N, C]`.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let [n, c, h, w] = rank4("global_avg_pool", self.value(x))?;
        let plane = h * w;
        let out = self.value(x).data().chunks(plane).map(|p| p.iter().sum::<Float>() / plane as Float).collect();
        self.push(Op::GlobalAvgPool(x), Tensor::new(vec![n, c], out)?)
    }

    // ---- structure ---------------------------------------------------------

    /// Concatenates along `axis`; all other extents must agree.
    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = parts.first().ok_or_else(|| shape_err("concat", "no operands"))?;
        let base = self.shape(*first).to_vec();
        if axis >= base.len() {
            return Err(shape_err("concat", format!("axis {axis} out of range for {base:?}")));
        }
        let mut total = 0;
        for &p in parts {
            let s = self.shape(p);
            let agrees = s.len() == base.len() && s.iter().zip(&base).enumerate().all(|(d, (a, b))| d == axis || a == b);
            if !agrees {
                return Err(shape_err("concat", format!("operand {s:?} incompatible with {base:?} on axis {axis}")));
            }
            total += s[axis];
        }
        let (outer, _, inner) = split_axis(&base, axis);
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &p in parts {
                let t = self.value(p);
                let chunk = t.shape()[axis] * inner;
                data.extend_from_slice(&t.data()[o * chunk..(o + 1) * chunk]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        self.push(Op::Concat { parts: parts.to_vec(), axis }, Tensor::new(shape, data)?)
    }

    // ---- normalization -----------------------------------------------------

    /// Per-channel standardization with the statistics of this batch; no
    /// affine parameters.
    pub fn batch_norm(&mut self, x: Var) -> Result<Var> {
        let [n, c, h, w] = rank4("batch_norm", self.value(x))?;
        let plane = h * w;
        let data = self.value(x).data();
        let (mean, var) = kernels::channel_moments(data, n, c, plane);
        let inv_std: Vec<Float> = var.iter().map(|v| 1.0 / (v + NORM_EPS).sqrt()).collect();
        let mut xhat = Vec::with_capacity(data.len());
        for (idx, chunk) in data.chunks(plane).enumerate() {
            let ch = idx % c;
            xhat.extend(chunk.iter().map(|&v| (v - mean[ch]) * inv_std[ch]));
        }
        let out = Tensor::new(vec![n, c, h, w], xhat.clone())?;
        self.push(Op::BatchNorm { x, xhat, inv_std }, out)
    }

    /// Per-channel standardization with externally supplied statistics.
    pub fn fixed_norm(&mut self, x: Var, mean: &[Float], var: &[Float]) -> Result<Var> {
        let [n, c, h, w] = rank4("fixed_norm", self.value(x))?;
        if mean.len() != c || var.len() != c {
            return Err(shape_err("fixed_norm", format!("{} channels but {} statistics", c, mean.len())));
        }
        let plane = h * w;
        let inv_std: Vec<Float> = var.iter().map(|v| 1.0 / (v + NORM_EPS).sqrt()).collect();
        let mut out = Vec::with_capacity(n * c * plane);
        for (idx, chunk) in self.value(x).data().chunks(plane).enumerate() {
            let ch = idx % c;
            out.extend(chunk.iter().map(|&v| (v - mean[ch]) * inv_std[ch]));
        }
        let out = Tensor::new(vec![n, c, h, w], out)?;
        self.push(Op::FixedNorm { x, inv_std }, out)
    }

    // ---- probabilistic -----------------------------------------------------

    /// Max-shifted softmax along `axis`.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let t = self.value(x);
        if axis >= t.rank() {
            return Err(shape_err("softmax", format!("axis {axis} out of range for {:?}", t.shape())));
        }
        let (outer, dim, inner) = split_axis(t.shape(), axis);
        let src = t.data();
        let mut out = vec![0.0; src.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |d: usize| (o * dim + d) * inner + i;
                let max = (0..dim).map(|d| src[at(d)]).fold(Float::NEG_INFINITY, Float::max);
                let mut total = 0.0;
                for d in 0..dim {
                    let e = (src[at(d)] - max).exp();
                    out[at(d)] = e;
                    total += e;
                }
                for d in 0..dim {
                    out[at(d)] /= total;
                }
            }
        }
        let out = Tensor::new(t.shape().to_vec(), out)?;
        self.push(Op::Softmax { x, axis }, out)
    }

    /// Mean negative log-likelihood of `labels` under `softmax(logits)` for
    /// `[N, K]` logits.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let t = self.value(logits);
        let (n, k) = match *t.shape() {
            [n, k] => (n, k),
            ref s => return Err(shape_err("softmax_cross_entropy", format!("expected [N, K] logits, got {s:?}"))),
        };
        if labels.len() != n {
            return Err(shape_err("softmax_cross_entropy", format!("{} labels for {n} rows", labels.len())));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
            return Err(shape_err("softmax_cross_entropy", format!("label {bad} outside {k} classes")));
        }
        let mut probs = Vec::with_capacity(n * k);
        let mut loss = 0.0;
        for (row, &label) in t.data().chunks(k).zip(labels) {
            let max = row.iter().copied().fold(Float::NEG_INFINITY, Float::max);
            let total: Float = row.iter().map(|&v| (v - max).exp()).sum();
            let log_z = max + total.ln();
            loss += log_z - row[label];
            probs.extend(row.iter().map(|&v| (v - log_z).exp()));
        }
        let out = Tensor::scalar(loss / n as Float);
        self.push(Op::SoftmaxCrossEntropy { logits, labels: labels.to_vec(), probs }, out)
    }

    // ---- backward ----------------------------------------------------------

    /// Reverse sweep from a scalar `loss`. Every trainable leaf receives a
    /// gradient of its own shape, zero if the loss does not depend on it.
    pub fn gradients(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).numel() != 1 {
            return Err(Error::contract(format!(
                "gradients() needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<Float>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad || matches!(node.op, Op::Leaf | Op::Constant) {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.backward_node(node, &g, &mut grads);
        }
        let mut by_leaf = BTreeMap::new();
        for &(leaf, _) in &self.leaves {
            let shape = self.shape(leaf).to_vec();
            let t = match grads[leaf.0].take() {
                Some(g) => Tensor::new(shape, g)?,
                None => Tensor::zeros(&shape),
            };
            by_leaf.insert(leaf, t);
        }
        Ok(Gradients { by_leaf })
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn accumulate(grads: &mut [Option<Vec<Float>>], v: Var, g: Vec<Float>) {
        match &mut grads[v.0] {
            Some(acc) => {
                for (a, b) in acc.iter_mut().zip(&g) {
                    *a += b;
                }
            }
            slot @ None => *slot = Some(g),
        }
    }

    fn backward_node(&self, node: &Node, g: &[Float], grads: &mut [Option<Vec<Float>>]) {
        let out = node.value.data();
        match &node.op {
            Op::Leaf | Op::Constant => {}
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    if self.wants(v) {
                        let len = self.value(v).numel();
                        let gv = if len == g.len() { g.to_vec() } else { reduce_to(g, len) };
                        Self::accumulate(grads, v, gv);
                    }
                }
            }
            Op::Mul(a, b) => {
                for (v, other) in [(*a, *b), (*b, *a)] {
                    if !self.wants(v) {
                        continue;
                    }
                    let (tv, to) = (self.value(v).data(), self.value(other).data());
                    let full: Vec<Float> =
                        g.iter().enumerate().map(|(i, &gi)| gi * to[i % to.len()]).collect();
                    let gv = if tv.len() == g.len() { full } else { reduce_to(&full, tv.len()) };
                    Self::accumulate(grads, v, gv);
                }
            }
            Op::Scale(x, f) => {
                if self.wants(*x) {
                    Self::accumulate(grads, *x, g.iter().map(|v| v * f).collect());
                }
            }
            Op::MatMul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (m, k, n) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
                if self.wants(*a) {
                    let mut ga = vec![0.0; m * k];
                    for i in 0..m {
                        for p in 0..k {
                            ga[i * k + p] =
                                (0..n).map(|j| g[i * n + j] * tb.data()[p * n + j]).sum();
                        }
                    }
                    Self::accumulate(grads, *a, ga);
                }
                if self.wants(*b) {
                    let mut gb = vec![0.0; k * n];
                    for i in 0..m {
                        for p in 0..k {
                            let av = ta.data()[i * k + p];
                            for j in 0..n {
                                gb[p * n + j] += av * g[i * n + j];
                            }
                        }
                    }
                    Self::accumulate(grads, *b, gb);
                }
            }
            Op::Conv2d { x, w, geom } | Op::Depthwise { x, w, geom } => {
                let (need_dx, need_dw) = (self.wants(*x), self.wants(*w));
                let (xd, wd) = (self.value(*x).data(), self.value(*w).data());
                let (dx, dw) = if matches!(node.op, Op::Conv2d { .. }) {
                    kernels::conv2d_backward(xd, wd, g, geom, need_dx, need_dw)
                } else {
                    kernels::depthwise_backward(xd, wd, g, geom, need_dx, need_dw)
                };
                if let Some(dx) = dx {
                    Self::accumulate(grads, *x, dx);
                }
                if let Some(dw) = dw {
                    Self::accumulate(grads, *w, dw);
                }
            }
            Op::Relu(x) => {
                if self.wants(*x) {
                    let xd = self.value(*x).data();
                    Self::accumulate(grads, *x, g.iter().zip(xd).map(|(&gi, &v)| if v > 0.0 { gi } else { 0.0 }).collect());
                }
            }
            Op::MaxPool { x, argmax } => {
                if self.wants(*x) {
                    Self::accumulate(grads, *x, kernels::max_pool_backward(g, argmax, self.value(*x).numel()));
                }
            }
            Op::AvgPool { x, geom } => {
                if self.wants(*x) {
                    Self::accumulate(grads, *x, kernels::avg_pool_backward(g, geom));
                }
            }
            Op::GlobalAvgPool(x) => {
                if self.wants(*x) {
                    let s = self.shape(*x);
                    let plane = s[2] * s[3];
                    let mut dx = Vec::with_capacity(self.value(*x).numel());
                    for &gi in g {
                        dx.extend(std::iter::repeat_n(gi / plane as Float, plane));
                    }
                    Self::accumulate(grads, *x, dx);
                }
            }
            Op::Concat { parts, axis } => {
                let (outer, total, inner) = split_axis(node.value.shape(), *axis);
                let mut offset = 0;
                for &p in parts {
                    let width = self.shape(p)[*axis];
                    if self.wants(p) {
                        let mut gp = Vec::with_capacity(outer * width * inner);
                        for o in 0..outer {
                            let start = (o * total + offset) * inner;
                            gp.extend_from_slice(&g[start..start + width * inner]);
                        }
                        Self::accumulate(grads, p, gp);
                    }
                    offset += width;
                }
            }
            Op::BatchNorm { x, xhat, inv_std } => {
                if self.wants(*x) {
                    let s = self.shape(*x);
                    let (n, c, plane) = (s[0], s[1], s[2] * s[3]);
                    let count = (n * plane) as Float;
                    let mut sum_g = vec![0.0; c];
                    let mut sum_gx = vec![0.0; c];
                    for (idx, (gc, xc)) in g.chunks(plane).zip(xhat.chunks(plane)).enumerate() {
                        let ch = idx % c;
                        for (&gi, &xi) in gc.iter().zip(xc) {
                            sum_g[ch] += gi;
                            sum_gx[ch] += gi * xi;
                        }
                    }
                    let mut dx = Vec::with_capacity(g.len());
                    for (idx, (gc, xc)) in g.chunks(plane).zip(xhat.chunks(plane)).enumerate() {
                        let ch = idx % c;
                        let (mg, mgx, is) = (sum_g[ch] / count, sum_gx[ch] / count, inv_std[ch]);
                        dx.extend(gc.iter().zip(xc).map(|(&gi, &xi)| is * (gi - mg - xi * mgx)));
                    }
                    Self::accumulate(grads, *x, dx);
                }
            }
            Op::FixedNorm { x, inv_std } => {
                if self.wants(*x) {
                    let s = self.shape(*x);
                    let (c, plane) = (s[1], s[2] * s[3]);
                    let mut dx = Vec::with_capacity(g.len());
                    for (idx, gc) in g.chunks(plane).enumerate() {
                        let is = inv_std[idx % c];
                        dx.extend(gc.iter().map(|&gi| gi * is));
                    }
                    Self::accumulate(grads, *x, dx);
                }
            }
            Op::Softmax { x, axis } => {
                if self.wants(*x) {
                    let (outer, dim, inner) = split_axis(node.value.shape(), *axis);
                    let mut dx = vec![0.0; g.len()];
                    for o in 0..outer {
                        for i in 0..inner {
                            let at = |d: usize| (o * dim + d) * inner + i;
                            let dot: Float = (0..dim).map(|d| g[at(d)] * out[at(d)]).sum();
                            for d in 0..dim {
                                dx[at(d)] = out[at(d)] * (g[at(d)] - dot);
                            }
                        }
                    }
                    Self::accumulate(grads, *x, dx);
                }
            }
            Op::Log { x, floor } => {
                if self.wants(*x) {
                    let xd = self.value(*x).data();
                    let dx = g.iter().zip(xd).map(|(&gi, &v)| if v > *floor { gi / v } else { 0.0 }).collect();
                    Self::accumulate(grads, *x, dx);
                }
            }
            Op::Sum(x) => {
                if self.wants(*x) {
                    Self::accumulate(grads, *x, vec![g[0]; self.value(*x).numel()]);
                }
            }
            Op::Square(x) => {
                if self.wants(*x) {
                    let xd = self.value(*x).data();
                    Self::accumulate(grads, *x, g.iter().zip(xd).map(|(&gi, &v)| 2.0 * v * gi).collect());
                }
            }
            Op::Abs(x) => {
                if self.wants(*x) {
                    let xd = self.value(*x).data();
                    let dx = g
                        .iter()
                        .zip(xd)
                        .map(|(&gi, &v)| if v > 0.0 { gi } else if v < 0.0 { -gi } else { 0.0 })
                        .collect();
                    Self::accumulate(grads, *x, dx);
                }
            }
            Op::Pick { x, index } => {
                if self.wants(*x) {
                    let mut dx = vec![0.0; self.value(*x).numel()];
                    dx[*index] = g[0];
                    Self::accumulate(grads, *x, dx);
                }
            }
            Op::SoftmaxCrossEntropy { logits, labels, probs } => {
                if self.wants(*logits) {
                    let k = self.shape(*logits)[1];
                    let scale = g[0] / labels.len() as Float;
                    let mut dx: Vec<Float> = probs.iter().map(|p| p * scale).collect();
                    for (row, &label) in labels.iter().enumerate() {
                        dx[row * k + label] -= scale;
                    }
                    Self::accumulate(grads, *logits, dx);
                }
            }
        }
    }
}
