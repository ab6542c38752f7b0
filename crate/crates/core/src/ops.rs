//! Candidate operations of the search space and the fixed scaffolding around
//! the cells (stem, cell-input preprocessing, classifier head).

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{kernels, Graph, Role, Var};
use crate::error::{Error, Result};
use crate::tensor::{Float, Tensor};

/// The seven candidate operations. There is deliberately no `zero` op.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OpKind {
    SepConv3x3,
    SepConv5x5,
    DilConv3x3,
    DilConv5x5,
    MaxPool3x3,
    AvgPool3x3,
    SkipConnect,
}

impl OpKind {
    pub const ALL: [OpKind; 7] = [
        OpKind::SepConv3x3,
        OpKind::SepConv5x5,
        OpKind::DilConv3x3,
        OpKind::DilConv5x5,
        OpKind::MaxPool3x3,
        OpKind::AvgPool3x3,
        OpKind::SkipConnect,
    ];
    pub const COUNT: usize = Self::ALL.len();

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(index: usize) -> Option<OpKind> {
        Self::ALL.get(index).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            OpKind::SepConv3x3 => "sep_conv_3x3",
            OpKind::SepConv5x5 => "sep_conv_5x5",
            OpKind::DilConv3x3 => "dil_conv_3x3",
            OpKind::DilConv5x5 => "dil_conv_5x5",
            OpKind::MaxPool3x3 => "max_pool_3x3",
            OpKind::AvgPool3x3 => "avg_pool_3x3",
            OpKind::SkipConnect => "skip_connect",
        }
    }

    /// `(kernel, dilation)` of the separable convolutions.
    fn conv_shape(self) -> Option<(usize, usize)> {
        match self {
            OpKind::SepConv3x3 => Some((3, 1)),
            OpKind::SepConv5x5 => Some((5, 1)),
            OpKind::DilConv3x3 => Some((3, 2)),
            OpKind::DilConv5x5 => Some((5, 2)),
            _ => None,
        }
    }
}

impl fmt::Display for OpKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for OpKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        OpKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::contract(format!("unknown operation `{s}`")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct ParamId(pub usize);

/// Named network weights (theta).
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        self.names.push(name.into());
        self.tensors.push(value);
        ParamId(self.tensors.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.tensors[id.0]
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    /// Total number of scalar weights.
    pub fn numel(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    /// Kaiming-normal weight with the given fan-in.
    pub fn kaiming(&mut self, name: String, shape: &[usize], fan_in: usize, rng: &mut impl Rng) -> ParamId {
        let std = (2.0 / fan_in as f64).sqrt();
        let normal = Normal::new(0.0, std).expect("positive std");
        let data = (0..shape.iter().product::<usize>()).map(|_| normal.sample(rng) as Float).collect();
        self.push(name, Tensor::new(shape.to_vec(), data).expect("consistent shape"))
    }
}

/// Accumulated per-channel moments of one standardization site.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SiteMoments {
    pub count: f64,
    pub sum: Vec<f64>,
    pub sum_sq: Vec<f64>,
}

impl SiteMoments {
    pub fn mean_var(&self) -> (Vec<Float>, Vec<Float>) {
        let mean: Vec<f64> = self.sum.iter().map(|s| s / self.count).collect();
        let var = self.sum_sq.iter().zip(&mean).map(|(sq, m)| (sq / self.count - m * m).max(0.0) as Float);
        (mean.iter().map(|&m| m as Float).collect(), var.collect())
    }
}

/// Population statistics of every standardization site, keyed by a
/// structural site name such as `cell0/e3/sep_conv_5x5`.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub sites: BTreeMap<String, SiteMoments>,
}

/// How standardization layers obtain their statistics.
#[derive(Debug)]
pub enum NormMode<'a> {
    /// Statistics of the current batch (search and training).
    Batch,
    /// Batch statistics, also accumulated into the given table.
    Capture(&'a mut NormStats),
    /// Previously captured population statistics (inference).
    Frozen(&'a NormStats),
}

/// A forward pass under construction: the tape, the bound weights and the
/// standardization mode.
pub struct Forward<'a> {
    pub graph: Graph,
    theta: Vec<Var>,
    norm: NormMode<'a>,
}

impl<'a> Forward<'a> {
    /// Binds every weight of `theta` onto a fresh tape, as trainable leaves
    /// when `train_theta` is set and as constants otherwise.
    pub fn new(theta: &ParamStore, train_theta: bool, norm: NormMode<'a>) -> Result<Self> {
        let mut graph = Graph::new();
        let theta = theta
            .tensors()
            .iter()
            .map(|t| if train_theta { graph.leaf(t.clone(), Role::Theta) } else { graph.constant(t.clone()) })
            .collect::<Result<_>>()?;
        Ok(Forward { graph, theta, norm })
    }

    pub fn param(&self, id: ParamId) -> Var {
        self.theta[id.0]
    }

    pub fn theta_vars(&self) -> &[Var] {
        &self.theta
    }

    pub fn norm(&mut self, x: Var, site: &str) -> Result<Var> {
        match &mut self.norm {
            NormMode::Batch => self.graph.batch_norm(x),
            NormMode::Capture(stats) => {
                let t = self.graph.value(x);
                let s = t.shape();
                let (n, c, plane) = (s[0], s[1], s[2] * s[3]);
                let entry = stats.sites.entry(site.to_string()).or_insert_with(|| SiteMoments {
                    count: 0.0,
                    sum: vec![0.0; c],
                    sum_sq: vec![0.0; c],
                });
                if entry.sum.len() != c {
                    return Err(Error::contract(format!("site {site} changed channel count")));
                }
                for (idx, chunk) in t.data().chunks(plane).enumerate() {
                    let ch = idx % c;
                    for &v in chunk {
                        entry.sum[ch] += v as f64;
                        entry.sum_sq[ch] += (v as f64) * (v as f64);
                    }
                }
                entry.count += (n * plane) as f64;
                self.graph.batch_norm(x)
            }
            NormMode::Frozen(stats) => {
                let moments = stats
                    .sites
                    .get(site)
                    .ok_or_else(|| Error::contract(format!("no captured statistics for site {site}")))?;
                let (mean, var) = moments.mean_var();
                self.graph.fixed_norm(x, &mean, &var)
            }
        }
    }
}

/// One candidate operation on one edge, with its weights.
#[derive(Clone, Debug, PartialEq)]
pub struct OpInstance {
    pub kind: OpKind,
    pub stride: usize,
    pub channels: usize,
    /// Depthwise then pointwise kernel for convolutions, empty otherwise.
    pub params: Vec<ParamId>,
}

impl OpInstance {
    pub fn build(
        kind: OpKind,
        stride: usize,
        channels: usize,
        name: &str,
        store: &mut ParamStore,
        rng: &mut impl Rng,
    ) -> Self {
        let params = match kind.conv_shape() {
            Some((k, _)) => vec![
                store.kaiming(format!("{name}/depthwise"), &[channels, 1, k, k], k * k, rng),
                store.kaiming(format!("{name}/pointwise"), &[channels, channels, 1, 1], channels, rng),
            ],
            None => vec![],
        };
        OpInstance { kind, stride, channels, params }
    }

    /// `o(z)`: output has the same channel count and `1/stride` the spatial
    /// extent of `z`.
    pub fn apply(&self, fwd: &mut Forward<'_>, z: Var, site: &str) -> Result<Var> {
        let shape = fwd.graph.shape(z).to_vec();
        let ok = matches!(shape[..], [_, c, h, w] if c == self.channels && h % self.stride == 0 && w % self.stride == 0);
        if !ok {
            return Err(Error::contract(format!(
                "{} (channels {}, stride {}) cannot consume input {shape:?}",
                self.kind, self.channels, self.stride
            )));
        }
        let g = &mut fwd.graph;
        match self.kind {
            OpKind::MaxPool3x3 => g.max_pool3x3(z, self.stride),
            OpKind::AvgPool3x3 => g.avg_pool3x3(z, self.stride),
            OpKind::SkipConnect if self.stride == 1 => Ok(z),
            OpKind::SkipConnect => {
                let kernel = g.constant(identity_kernel(self.channels))?;
                g.conv2d(z, kernel, self.stride, 1)
            }
            kind => {
                let (_, dilation) = kind.conv_shape().expect("convolution kind");
                let (dw, pw) = (fwd.param(self.params[0]), fwd.param(self.params[1]));
                let g = &mut fwd.graph;
                let h = g.relu(z)?;
                let h = g.depthwise_conv2d(h, dw, self.stride, dilation)?;
                let h = g.conv2d(h, pw, 1, 1)?;
                fwd.norm(h, site)
            }
        }
    }
}

/// `[C, C, 1, 1]` identity, used as a fixed strided subsampling kernel.
fn identity_kernel(channels: usize) -> Tensor {
    let mut t = Tensor::zeros(&[channels, channels, 1, 1]);
    for c in 0..channels {
        t.data_mut()[c * channels + c] = 1.0;
    }
    t
}

/// Convolution from raw images to the first cell width, followed by
/// standardization.
#[derive(Clone, Debug, PartialEq)]
pub struct Stem {
    pub in_channels: usize,
    pub channels: usize,
    pub kernel: ParamId,
}

impl Stem {
    pub fn build(in_channels: usize, channels: usize, store: &mut ParamStore, rng: &mut impl Rng) -> Self {
        let kernel = store.kaiming("stem/conv".into(), &[channels, in_channels, 3, 3], in_channels * 9, rng);
        Stem { in_channels, channels, kernel }
    }

    /// The convolution output before standardization.
    pub fn pre_activation(&self, fwd: &mut Forward<'_>, x: Var) -> Result<Var> {
        let w = fwd.param(self.kernel);
        fwd.graph.conv2d(x, w, 1, 1)
    }

    /// Returns the two cell inputs `(z0, z1)`; both are the stem output.
    pub fn apply(&self, fwd: &mut Forward<'_>, x: Var) -> Result<(Var, Var)> {
        let h = self.pre_activation(fwd, x)?;
        let s = fwd.norm(h, "stem")?;
        Ok((s, s))
    }
}

/// ReLU, 1x1 convolution (optionally strided), standardization. Adapts a
/// cell input to the width and resolution the cell expects.
#[derive(Clone, Debug, PartialEq)]
pub struct Preprocess {
    pub stride: usize,
    pub kernel: ParamId,
}

impl Preprocess {
    pub fn build(name: String, from: usize, to: usize, stride: usize, store: &mut ParamStore, rng: &mut impl Rng) -> Self {
        Preprocess { stride, kernel: store.kaiming(name, &[to, from, 1, 1], from, rng) }
    }

    pub fn apply(&self, fwd: &mut Forward<'_>, x: Var, site: &str) -> Result<Var> {
        let w = fwd.param(self.kernel);
        let h = fwd.graph.relu(x)?;
        let h = fwd.graph.conv2d(h, w, self.stride, 1)?;
        fwd.norm(h, site)
    }
}

/// Global average pooling followed by a linear layer.
#[derive(Clone, Debug, PartialEq)]
pub struct Classifier {
    pub features: usize,
    pub classes: usize,
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Classifier {
    pub fn build(features: usize, classes: usize, store: &mut ParamStore, rng: &mut impl Rng) -> Self {
        let std = (1.0 / features as f64).sqrt();
        let normal = Normal::new(0.0, std).expect("positive std");
        let data = (0..features * classes).map(|_| normal.sample(rng) as Float).collect();
        let weight = store.push("classifier/weight", Tensor::new(vec![features, classes], data).expect("shape"));
        let bias = store.push("classifier/bias", Tensor::zeros(&[classes]));
        Classifier { features, classes, weight, bias }
    }

    /// `[N, C, H, W]` features to `[N, classes]` logits.
    pub fn apply(&self, fwd: &mut Forward<'_>, features: Var) -> Result<Var> {
        let (w, b) = (fwd.param(self.weight), fwd.param(self.bias));
        let g = &mut fwd.graph;
        let pooled = g.global_avg_pool(features)?;
        let logits = g.matmul(pooled, w)?;
        g.add(logits, b)
    }
}

/// Mean and variance of raw tensor data per channel, exposed for callers
/// that need statistics outside a forward pass.
pub fn channel_moments(t: &Tensor) -> (Vec<Float>, Vec<Float>) {
    let s = t.shape();
    kernels::channel_moments(t.data(), s[0], s[1], s[2] * s[3])
}
