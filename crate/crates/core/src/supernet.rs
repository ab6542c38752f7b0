//! The weight-sharing super-network: mixed-operation edges weighted by
//! `softmax(alpha)`, node inputs weighted by `softmax(beta)`, cells stacked
//! between a stem and a classifier.

use std::collections::BTreeMap;
use std::fmt;
use std::ops::Range;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Role, Var};
use crate::discretize::Genotype;
use crate::error::{Error, Result};
use crate::ops::{Classifier, Forward, NormMode, NormStats, OpInstance, OpKind, ParamStore, Preprocess, Stem};
use crate::tensor::{Float, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CellType {
    Normal,
    Reduction,
}

impl fmt::Display for CellType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            CellType::Normal => "normal",
            CellType::Reduction => "reduction",
        })
    }
}

/// Directed edge `(i, j)` from node `i` into node `j`.
pub type Edge = (usize, usize);

/// Topology of one cell: nodes 0 and 1 are the cell inputs, every later node
/// `j` receives one edge from each `i < j`.
///
/// Edges are indexed grouped by destination, `(0,2), (1,2), (0,3), (1,3),
/// (2,3), ...`, so the incoming edges of a node are contiguous.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CellSpec {
    pub nodes: usize,
}

impl CellSpec {
    pub fn new(nodes: usize) -> Result<Self> {
        if nodes < 3 {
            return Err(Error::config("network.nodes", format!("need at least 3 nodes, got {nodes}")));
        }
        Ok(CellSpec { nodes })
    }

    pub fn num_edges(&self) -> usize {
        (2..self.nodes).sum()
    }

    pub fn intermediate_nodes(&self) -> Range<usize> {
        2..self.nodes
    }

    /// Edge indices of the incoming edges of node `j`, ordered by source.
    pub fn incoming(&self, j: usize) -> Range<usize> {
        let start = (2..j).sum::<usize>();
        start..start + j
    }

    pub fn edges(&self) -> Vec<Edge> {
        self.intermediate_nodes().flat_map(|j| (0..j).map(move |i| (i, j))).collect()
    }

    pub fn edge_index(&self, (i, j): Edge) -> Option<usize> {
        (j >= 2 && j < self.nodes && i < j).then(|| self.incoming(j).start + i)
    }

    pub fn edge_at(&self, index: usize) -> Edge {
        self.edges()[index]
    }
}

/// Architecture parameters: per cell type, `alpha` of shape `[E, |O|]` and
/// `beta` of shape `[E]`.
///
/// When `discrete` is set the parameters describe an already discretized
/// architecture: forward passes use weight exactly 1 on the kept operation of
/// each kept edge and drop everything else.
#[derive(Clone, Debug, PartialEq)]
pub struct ArchParams {
    pub cell: CellSpec,
    pub cell_types: Vec<CellType>,
    pub alpha: Vec<Tensor>,
    pub beta: Vec<Tensor>,
    pub discrete: Option<Genotype>,
}

/// Architecture parameters bound onto a tape.
#[derive(Clone, Debug)]
pub struct ArchVars {
    pub alpha: Vec<Var>,
    pub beta: Vec<Var>,
}

impl ArchParams {
    /// Zero logits everywhere, i.e. uniform mixing.
    pub fn uniform(cell: CellSpec, cell_types: &[CellType]) -> Self {
        let e = cell.num_edges();
        ArchParams {
            cell,
            cell_types: cell_types.to_vec(),
            alpha: cell_types.iter().map(|_| Tensor::zeros(&[e, OpKind::COUNT])).collect(),
            beta: cell_types.iter().map(|_| Tensor::zeros(&[e])).collect(),
            discrete: None,
        }
    }

    /// Logits drawn from `N(0, 1e-3^2)`, deterministic per seed.
    pub fn init(cell: CellSpec, cell_types: &[CellType], seed: u64) -> Self {
        let mut arch = Self::uniform(cell, cell_types);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, 1e-3).expect("positive std");
        for t in arch.alpha.iter_mut().chain(arch.beta.iter_mut()) {
            for v in t.data_mut() {
                *v = normal.sample(&mut rng) as Float;
            }
        }
        arch
    }

    pub fn type_index(&self, cell_type: CellType) -> Option<usize> {
        self.cell_types.iter().position(|&t| t == cell_type)
    }

    pub fn alpha_edge(&self, t: usize, edge: usize) -> &[Float] {
        &self.alpha[t].data()[edge * OpKind::COUNT..(edge + 1) * OpKind::COUNT]
    }

    /// `a^o_{i,j}` for one edge.
    pub fn alpha_softmax(&self, t: usize, edge: usize) -> Vec<Float> {
        softmax(self.alpha_edge(t, edge))
    }

    /// `b_{i,j}` for the incoming edges of node `j`, normalized per node.
    pub fn beta_softmax_node(&self, t: usize, j: usize) -> Vec<Float> {
        softmax(&self.beta[t].data()[self.cell.incoming(j)])
    }

    /// Per-node normalized `b` for every edge of cell type `t`.
    pub fn beta_softmax(&self, t: usize) -> Vec<Float> {
        self.cell.intermediate_nodes().flat_map(|j| self.beta_softmax_node(t, j)).collect()
    }

    pub fn max_beta(&self) -> Float {
        self.beta.iter().flat_map(|t| t.data().iter().copied()).fold(Float::NEG_INFINITY, Float::max)
    }

    pub fn bind(&self, g: &mut Graph, trainable: bool) -> Result<ArchVars> {
        let mut bind = |t: &Tensor, role| if trainable { g.leaf(t.clone(), role) } else { g.constant(t.clone()) };
        let alpha = self.alpha.iter().map(|t| bind(t, Role::Alpha)).collect::<Result<_>>()?;
        let beta = self.beta.iter().map(|t| bind(t, Role::Beta)).collect::<Result<_>>()?;
        Ok(ArchVars { alpha, beta })
    }
}

/// Max-shifted softmax of a plain slice.
pub fn softmax(logits: &[Float]) -> Vec<Float> {
    let max = logits.iter().copied().fold(Float::NEG_INFINITY, Float::max);
    let exps: Vec<Float> = logits.iter().map(|&v| (v - max).exp()).collect();
    let total: Float = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

/// Mixing weights for one forward pass.
enum Mixing {
    /// Per type: softmax over `alpha` (`[E, |O|]`) and, per intermediate
    /// node, softmax over its incoming `beta`.
    Soft { alpha: Vec<Var>, beta: Vec<Vec<Var>> },
    /// Per type and edge: the kept operation, if any, at weight 1.
    Hard { kept: Vec<Vec<Option<OpKind>>> },
}

/// Forward inputs of one node `j`: how every incoming edge is weighted.
enum NodeMix<'m> {
    Soft { alpha: Var, beta: Var },
    Hard(&'m [Option<OpKind>]),
}

fn soft_mixing(g: &mut Graph, vars: &ArchVars, cell: CellSpec) -> Result<Mixing> {
    let mut alpha = Vec::with_capacity(vars.alpha.len());
    let mut beta = Vec::with_capacity(vars.beta.len());
    for (&a, &b) in vars.alpha.iter().zip(&vars.beta) {
        alpha.push(g.softmax(a, 1)?);
        let mut per_node = Vec::new();
        for j in cell.intermediate_nodes() {
            let picks = cell.incoming(j).map(|e| g.pick(b, e)).collect::<Result<Vec<_>>>()?;
            let node_logits = g.concat(&picks, 0)?;
            per_node.push(g.softmax(node_logits, 0)?);
        }
        beta.push(per_node);
    }
    Ok(Mixing::Soft { alpha, beta })
}

fn hard_mixing(genotype: &Genotype, arch: &ArchParams) -> Result<Mixing> {
    let kept = arch
        .cell_types
        .iter()
        .map(|&t| genotype.kept_ops(t, arch.cell))
        .collect::<Result<Vec<_>>>()?;
    Ok(Mixing::Hard { kept })
}

/// Hyperparameters of the stacked network.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworkSpec {
    /// Number of stacked cells.
    pub cells: usize,
    /// Width of the first cell; doubled at every reduction cell.
    pub channels: usize,
    /// Nodes per cell including the two inputs.
    pub nodes: usize,
    #[serde(default = "default_in_channels")]
    pub in_channels: usize,
    #[serde(default = "default_classes")]
    pub classes: usize,
}

fn default_in_channels() -> usize {
    3
}

fn default_classes() -> usize {
    10
}

impl NetworkSpec {
    /// Reduction cells sit at 1/3 and 2/3 depth; networks of fewer than three
    /// cells are all-normal.
    pub fn reduction_positions(&self) -> Vec<usize> {
        if self.cells >= 3 {
            vec![self.cells / 3, 2 * self.cells / 3]
        } else {
            vec![]
        }
    }

    pub fn cell_type(&self, index: usize) -> CellType {
        if self.reduction_positions().contains(&index) {
            CellType::Reduction
        } else {
            CellType::Normal
        }
    }

    /// Cell types present in the network, normal first.
    pub fn cell_types(&self) -> Vec<CellType> {
        let mut types: Vec<CellType> = (0..self.cells).map(|c| self.cell_type(c)).collect();
        types.sort();
        types.dedup();
        types
    }

    pub fn cell_spec(&self) -> Result<CellSpec> {
        CellSpec::new(self.nodes)
    }

    /// Total spatial downsampling factor of the network.
    pub fn downsampling(&self) -> usize {
        1 << self.reduction_positions().len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.cells == 0 {
            return Err(Error::config("network.cells", "need at least one cell"));
        }
        if self.channels == 0 {
            return Err(Error::config("network.channels", "need a positive width"));
        }
        if self.in_channels == 0 {
            return Err(Error::config("network.in_channels", "need at least one input channel"));
        }
        if self.classes < 2 {
            return Err(Error::config("network.classes", "need at least two classes"));
        }
        self.cell_spec().map(|_| ())
    }
}

#[derive(Clone, Debug, PartialEq)]
struct Cell {
    kind: CellType,
    width: usize,
    pre0: Option<Preprocess>,
    pre1: Option<Preprocess>,
    /// Candidate operations per edge: all seven in a super-network, zero or
    /// one in a derived sub-network.
    edges: Vec<Vec<OpInstance>>,
}

/// A stack of cells between a stem and a classifier, with weights `theta`.
#[derive(Clone, Debug, PartialEq)]
pub struct SuperNetwork {
    pub spec: NetworkSpec,
    pub cell: CellSpec,
    pub theta: ParamStore,
    stem: Stem,
    cells: Vec<Cell>,
    classifier: Classifier,
}

impl SuperNetwork {
    /// Full super-network with every candidate operation on every edge.
    pub fn new(spec: NetworkSpec, seed: u64) -> Result<Self> {
        Self::build(spec, seed, |_, _| Ok(OpKind::ALL.to_vec()))
    }

    /// Network containing only the operations kept by `genotype`, freshly
    /// initialized.
    pub fn from_genotype(spec: NetworkSpec, genotype: &Genotype, seed: u64) -> Result<Self> {
        let cell = spec.cell_spec()?;
        if genotype.nodes != cell.nodes {
            return Err(Error::contract(format!(
                "genotype has {} nodes per cell but the network has {}",
                genotype.nodes, cell.nodes
            )));
        }
        let kept: BTreeMap<CellType, Vec<Option<OpKind>>> = spec
            .cell_types()
            .into_iter()
            .map(|t| genotype.kept_ops(t, cell).map(|k| (t, k)))
            .collect::<Result<_>>()?;
        Self::build(spec, seed, |t, e| Ok(kept[&t][e].into_iter().collect()))
    }

    fn build(
        spec: NetworkSpec,
        seed: u64,
        ops_for: impl Fn(CellType, usize) -> Result<Vec<OpKind>>,
    ) -> Result<Self> {
        spec.validate()?;
        let cell = spec.cell_spec()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut theta = ParamStore::new();
        let stem = Stem::build(spec.in_channels, spec.channels, &mut theta, &mut rng);
        let multiplier = cell.nodes - 2;

        let (mut c_pp, mut c_p, mut width) = (spec.channels, spec.channels, spec.channels);
        let mut reduction_prev = false;
        let mut cells = Vec::with_capacity(spec.cells);
        for index in 0..spec.cells {
            let kind = spec.cell_type(index);
            if kind == CellType::Reduction {
                width *= 2;
            }
            let pre0 = (c_pp != width || reduction_prev).then(|| {
                let stride = if reduction_prev { 2 } else { 1 };
                Preprocess::build(format!("cell{index}/pre0"), c_pp, width, stride, &mut theta, &mut rng)
            });
            let pre1 = (c_p != width)
                .then(|| Preprocess::build(format!("cell{index}/pre1"), c_p, width, 1, &mut theta, &mut rng));
            let mut edges = Vec::with_capacity(cell.num_edges());
            for (e, (i, j)) in cell.edges().into_iter().enumerate() {
                let stride = if kind == CellType::Reduction && i < 2 { 2 } else { 1 };
                let ops = ops_for(kind, e)?
                    .into_iter()
                    .map(|k| {
                        let name = format!("cell{index}/{i}-{j}/{}", k.name());
                        OpInstance::build(k, stride, width, &name, &mut theta, &mut rng)
                    })
                    .collect();
                edges.push(ops);
            }
            cells.push(Cell { kind, width, pre0, pre1, edges });
            c_pp = c_p;
            c_p = width * multiplier;
            reduction_prev = kind == CellType::Reduction;
        }
        let classifier = Classifier::build(c_p, spec.classes, &mut theta, &mut rng);
        Ok(SuperNetwork { spec, cell, theta, stem, cells, classifier })
    }

    pub fn num_params(&self) -> usize {
        self.theta.numel()
    }

    /// Weights that belong to operations inside cells.
    pub fn cell_op_params(&self) -> usize {
        self.cells
            .iter()
            .flat_map(|c| c.edges.iter().flatten())
            .flat_map(|op| op.params.iter())
            .map(|&id| self.theta.get(id).numel())
            .sum()
    }

    /// Records `F(x)` on `fwd` and returns `[N, classes]` logits plus the
    /// bound architecture leaves (when `train_arch`).
    pub fn forward(
        &self,
        fwd: &mut Forward<'_>,
        arch: &ArchParams,
        train_arch: bool,
        x: Var,
    ) -> Result<(Var, Option<ArchVars>)> {
        self.check_arch(arch)?;
        let (mixing, vars) = match &arch.discrete {
            Some(genotype) => (hard_mixing(genotype, arch)?, None),
            None => {
                let vars = arch.bind(&mut fwd.graph, train_arch)?;
                (soft_mixing(&mut fwd.graph, &vars, self.cell)?, train_arch.then_some(vars))
            }
        };
        let logits = self.forward_mixed(fwd, arch, &mixing, x)?;
        Ok((logits, vars))
    }

    fn check_arch(&self, arch: &ArchParams) -> Result<()> {
        if arch.cell != self.cell {
            return Err(Error::contract(format!(
                "architecture has {} nodes per cell, network has {}",
                arch.cell.nodes, self.cell.nodes
            )));
        }
        for t in self.spec.cell_types() {
            if arch.type_index(t).is_none() {
                return Err(Error::contract(format!("architecture lacks parameters for {t} cells")));
            }
        }
        Ok(())
    }

    fn forward_mixed(&self, fwd: &mut Forward<'_>, arch: &ArchParams, mixing: &Mixing, x: Var) -> Result<Var> {
        let shape = fwd.graph.shape(x).to_vec();
        let factor = self.spec.downsampling();
        let ok = matches!(shape[..], [_, c, h, w] if c == self.spec.in_channels && h % factor == 0 && w % factor == 0);
        if !ok {
            return Err(Error::contract(format!(
                "input {shape:?} must be (N, {}, H, W) with H and W divisible by {factor}",
                self.spec.in_channels
            )));
        }
        let (mut s0, mut s1) = self.stem.apply(fwd, x)?;
        for (index, cell) in self.cells.iter().enumerate() {
            let t = arch.type_index(cell.kind).expect("checked");
            let out = self.cell_forward(fwd, index, cell, s0, s1, mixing, t)?;
            s0 = s1;
            s1 = out;
        }
        self.classifier.apply(fwd, s1)
    }

    #[allow(clippy::too_many_arguments)]
    fn cell_forward(
        &self,
        fwd: &mut Forward<'_>,
        index: usize,
        cell: &Cell,
        s0: Var,
        s1: Var,
        mixing: &Mixing,
        t: usize,
    ) -> Result<Var> {
        let s0 = match &cell.pre0 {
            Some(p) => p.apply(fwd, s0, &format!("cell{index}/pre0"))?,
            None => s0,
        };
        let s1 = match &cell.pre1 {
            Some(p) => p.apply(fwd, s1, &format!("cell{index}/pre1"))?,
            None => s1,
        };
        let mut states = vec![s0, s1];
        for j in self.cell.intermediate_nodes() {
            let range = self.cell.incoming(j);
            let mix = match mixing {
                Mixing::Soft { alpha, beta } => NodeMix::Soft { alpha: alpha[t], beta: beta[t][j - 2] },
                Mixing::Hard { kept } => NodeMix::Hard(&kept[t][range.clone()]),
            };
            let ops = &cell.edges[range.clone()];
            let z = node_forward(fwd, &states, ops, &mix, range.start, index, cell, j)?;
            states.push(z);
        }
        fwd.graph.concat(&states[2..], 1)
    }

    /// Records the forward pass of cell `index` alone on inputs already
    /// matched to its width.
    pub fn cell_forward_standalone(
        &self,
        fwd: &mut Forward<'_>,
        index: usize,
        s0: Var,
        s1: Var,
        arch: &ArchParams,
    ) -> Result<Var> {
        let cell = self.cells.get(index).ok_or_else(|| Error::contract(format!("no cell {index}")))?;
        for s in [s0, s1] {
            let c = fwd.graph.shape(s)[1];
            if c != cell.width {
                return Err(Error::contract(format!("cell {index} has width {} but input has {c} channels", cell.width)));
            }
        }
        self.check_arch(arch)?;
        let mixing = match &arch.discrete {
            Some(genotype) => hard_mixing(genotype, arch)?,
            None => {
                let vars = arch.bind(&mut fwd.graph, false)?;
                soft_mixing(&mut fwd.graph, &vars, self.cell)?
            }
        };
        let t = arch.type_index(cell.kind).expect("checked");
        let stripped = Cell { pre0: None, pre1: None, ..cell.clone() };
        self.cell_forward(fwd, index, &stripped, s0, s1, &mixing, t)
    }
}

impl SuperNetwork {
    /// Logits for `images` with weights and architecture held constant.
    pub fn infer(&self, arch: &ArchParams, norm: NormMode<'_>, images: &Tensor) -> Result<Tensor> {
        let mut fwd = Forward::new(&self.theta, false, norm)?;
        let x = fwd.graph.constant(images.clone())?;
        let (logits, _) = self.forward(&mut fwd, arch, false, x)?;
        Ok(fwd.graph.value(logits).clone())
    }

    /// Population statistics of every standardization site over `images`.
    pub fn capture_stats(&self, arch: &ArchParams, images: &Tensor, batch_size: usize) -> Result<NormStats> {
        let mut stats = NormStats::default();
        for rows in batch_rows(images.shape()[0], batch_size)? {
            self.infer(arch, NormMode::Capture(&mut stats), &images.select_rows(&rows))?;
        }
        Ok(stats)
    }

    /// Percentage of `images` classified as `labels` under frozen statistics.
    pub fn accuracy(
        &self,
        arch: &ArchParams,
        stats: &NormStats,
        images: &Tensor,
        labels: &[usize],
        batch_size: usize,
    ) -> Result<Float> {
        if images.shape()[0] != labels.len() {
            return Err(Error::contract(format!("{} images but {} labels", images.shape()[0], labels.len())));
        }
        if labels.is_empty() {
            return Err(Error::config("eval_set", "evaluation set is empty"));
        }
        let mut correct = 0usize;
        for rows in batch_rows(labels.len(), batch_size)? {
            let logits = self.infer(arch, NormMode::Frozen(stats), &images.select_rows(&rows))?;
            correct += predictions(&logits).iter().zip(&rows).filter(|&(&p, &r)| p == labels[r]).count();
        }
        Ok(100.0 * correct as Float / labels.len() as Float)
    }
}

/// Row indices `0..n` in consecutive chunks of `batch_size`.
fn batch_rows(n: usize, batch_size: usize) -> Result<Vec<Vec<usize>>> {
    if batch_size == 0 {
        return Err(Error::config("search.batch_size", "must be positive"));
    }
    Ok((0..n).collect::<Vec<_>>().chunks(batch_size).map(<[usize]>::to_vec).collect())
}

/// Arg-max class of each row of `[N, classes]` logits; the first maximum wins.
pub fn predictions(logits: &Tensor) -> Vec<usize> {
    let classes = logits.shape()[1];
    logits
        .data()
        .chunks(classes)
        .map(|row| row.iter().enumerate().fold(0, |best, (i, &v)| if v > row[best] { i } else { best }))
        .collect()
}

/// `z_j = sum_i b_{i,j} * f_{i,j}(z_i)` with `f_{i,j}(z) = sum_o a^o o(z)`.
#[allow(clippy::too_many_arguments)]
fn node_forward(
    fwd: &mut Forward<'_>,
    states: &[Var],
    ops: &[Vec<OpInstance>],
    mix: &NodeMix<'_>,
    first_edge: usize,
    cell_index: usize,
    cell: &Cell,
    j: usize,
) -> Result<Var> {
    let mut acc: Option<Var> = None;
    for (i, edge_ops) in ops.iter().enumerate() {
        let edge = first_edge + i;
        let flow = match mix {
            NodeMix::Soft { alpha, beta } => {
                let f = mixed_edge(fwd, states[i], edge_ops, *alpha, edge, cell_index, (i, j))?;
                let b = fwd.graph.pick(*beta, i)?;
                Some(fwd.graph.mul(b, f)?)
            }
            NodeMix::Hard(kept) => match kept[i] {
                Some(kind) => {
                    let op = edge_ops.iter().find(|op| op.kind == kind).ok_or_else(|| {
                        Error::contract(format!("edge ({i},{j}) of cell {cell_index} has no {kind} operation"))
                    })?;
                    Some(op.apply(fwd, states[i], &site(cell_index, (i, j), kind))?)
                }
                None => None,
            },
        };
        if let Some(flow) = flow {
            acc = Some(match acc {
                Some(a) => fwd.graph.add(a, flow)?,
                None => flow,
            });
        }
    }
    match acc {
        Some(z) => Ok(z),
        None => {
            // every incoming edge was dropped: the node carries no flow
            let s = fwd.graph.shape(states[0]).to_vec();
            let stride = if cell.kind == CellType::Reduction { 2 } else { 1 };
            let shape = [s[0], cell.width, s[2] / stride, s[3] / stride];
            fwd.graph.constant(Tensor::zeros(&shape))
        }
    }
}

fn site(cell_index: usize, (i, j): Edge, kind: OpKind) -> String {
    format!("cell{cell_index}/{i}-{j}/{}", kind.name())
}

/// `sum_o softmax(alpha_edge)_o * o(z)`.
fn mixed_edge(
    fwd: &mut Forward<'_>,
    z: Var,
    ops: &[OpInstance],
    alpha_sm: Var,
    edge: usize,
    cell_index: usize,
    endpoints: Edge,
) -> Result<Var> {
    let mut acc: Option<Var> = None;
    for op in ops {
        let y = op.apply(fwd, z, &site(cell_index, endpoints, op.kind))?;
        let w = fwd.graph.pick(alpha_sm, edge * OpKind::COUNT + op.kind.index())?;
        let term = fwd.graph.mul(w, y)?;
        acc = Some(match acc {
            Some(a) => fwd.graph.add(a, term)?,
            None => term,
        });
    }
    acc.ok_or_else(|| Error::contract("mixed edge without candidate operations"))
}

/// Standalone mixed edge on a bare tape: `sum_o softmax(alpha)_o * o(z)`.
pub fn mixed_edge_forward(
    fwd: &mut Forward<'_>,
    alpha_edge: &[Float],
    z: Var,
    ops: &[OpInstance],
) -> Result<Var> {
    if alpha_edge.len() != ops.len() {
        return Err(Error::contract(format!("{} logits for {} operations", alpha_edge.len(), ops.len())));
    }
    let a = fwd.graph.constant(Tensor::new(vec![1, alpha_edge.len()], alpha_edge.to_vec())?)?;
    let a = fwd.graph.softmax(a, 1)?;
    let mut acc: Option<Var> = None;
    for (o, op) in ops.iter().enumerate() {
        let y = op.apply(fwd, z, &format!("edge/{}", op.kind.name()))?;
        let w = fwd.graph.pick(a, o)?;
        let term = fwd.graph.mul(w, y)?;
        acc = Some(match acc {
            Some(acc) => fwd.graph.add(acc, term)?,
            None => term,
        });
    }
    acc.ok_or_else(|| Error::contract("mixed edge without candidate operations"))
}

/// Standalone node sum `sum_i b_i * f_i` with `b = softmax(beta)`.
pub fn node_forward_weighted(g: &mut Graph, beta: &[Float], flows: &[Var]) -> Result<Var> {
    if beta.len() != flows.len() || flows.is_empty() {
        return Err(Error::contract(format!("{} weights for {} flows", beta.len(), flows.len())));
    }
    let b = g.constant(Tensor::from_vec(beta.to_vec()))?;
    let b = g.softmax(b, 0)?;
    let mut acc: Option<Var> = None;
    for (i, &f) in flows.iter().enumerate() {
        let w = g.pick(b, i)?;
        let term = g.mul(w, f)?;
        acc = Some(match acc {
            Some(a) => g.add(a, term)?,
            None => term,
        });
    }
    Ok(acc.expect("nonempty"))
}
