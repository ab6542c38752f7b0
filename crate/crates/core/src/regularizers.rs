//! Discretization-aware loss terms.
//!
//! * operation entropy: entropy of `softmax(alpha)` on every edge, summed;
//! * edge loss: per edge group, entropy of `softmax(beta)` over the group plus
//!   `(sum of positive beta - K)^2`;
//! * the total objective `L_C + lambda_c * (lambda_alpha * L_O + lambda_beta * L_E)`
//!   with epoch-dependent control functions.

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::supernet::{softmax, CellSpec, Edge};
use crate::tensor::{Float, Tensor};

/// Probabilities are floored here before taking logs.
pub const PROB_FLOOR: Float = 1e-12;

/// Default ratio `lambda_beta / lambda_2`.
pub const DEFAULT_BETA_MULTIPLIER: Float = 4.0;

/// Entropy `-sum p ln p` of `softmax(logits)`.
pub fn op_entropy_edge(logits: &[Float]) -> Float {
    entropy(&softmax(logits))
}

pub fn entropy(p: &[Float]) -> Float {
    -p.iter().map(|&v| v * v.max(PROB_FLOOR).ln()).sum::<Float>()
}

/// Sum of per-edge operation entropies over every edge of every cell type.
/// `alpha` holds one `[E, |O|]` tensor per cell type.
pub fn op_entropy_total(alpha: &[Tensor]) -> Float {
    alpha
        .iter()
        .map(|t| t.data().chunks(t.shape()[1]).map(op_entropy_edge).sum::<Float>())
        .sum()
}

/// Entropy and cardinality parts of one group's edge loss.
pub fn edge_group_loss(beta: &[Float], k: usize) -> (Float, Float) {
    let positive: Float = beta.iter().filter(|&&b| b > 0.0).sum();
    let dev = positive - k as Float;
    (entropy(&softmax(beta)), dev * dev)
}

/// A set of edges of which exactly `k` are to be kept.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EdgeGroup {
    pub edges: Vec<Edge>,
    pub k: usize,
}

impl EdgeGroup {
    pub fn node(cell: CellSpec, j: usize, k: usize) -> Self {
        EdgeGroup { edges: (0..j).map(|i| (i, j)).collect(), k }.normalized(cell)
    }

    /// Member edges sorted by edge index.
    fn normalized(mut self, cell: CellSpec) -> Self {
        self.edges.sort_by_key(|&e| cell.edge_index(e));
        self
    }

    /// Edge indices of the members, in edge-index order.
    pub fn indices(&self, cell: CellSpec) -> Vec<usize> {
        let mut idx: Vec<usize> = self.edges.iter().filter_map(|&e| cell.edge_index(e)).collect();
        idx.sort_unstable();
        idx
    }
}

/// Checks that `groups` partition the edges of `cell` with `1 <= K <= |group|`.
pub fn validate_groups(groups: &[EdgeGroup], cell: CellSpec) -> Result<()> {
    let mut seen = BTreeSet::new();
    for (g, group) in groups.iter().enumerate() {
        let field = format!("groups[{g}]");
        if group.edges.is_empty() {
            return Err(Error::config(field, "edge group is empty"));
        }
        if group.k == 0 || group.k > group.edges.len() {
            return Err(Error::config(
                format!("{field}.k"),
                format!("target {} must lie in 1..={}", group.k, group.edges.len()),
            ));
        }
        for &edge in &group.edges {
            if cell.edge_index(edge).is_none() {
                return Err(Error::config(format!("{field}.edges"), format!("{edge:?} is not an edge of the cell")));
            }
            if !seen.insert(edge) {
                return Err(Error::config(format!("{field}.edges"), format!("edge {edge:?} is in more than one group")));
            }
        }
    }
    if seen.len() != cell.num_edges() {
        let missing: Vec<Edge> = cell.edges().into_iter().filter(|e| !seen.contains(e)).collect();
        return Err(Error::config("groups", format!("edges {missing:?} belong to no group")));
    }
    Ok(())
}

/// Named edge-group layouts.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum GroupPreset {
    /// Two inputs per intermediate node.
    #[serde(rename = "balanced-8")]
    Balanced8,
    #[serde(rename = "imbalanced-3")]
    Imbalanced3,
    #[serde(rename = "imbalanced-4")]
    Imbalanced4,
    #[serde(rename = "imbalanced-5")]
    Imbalanced5,
    #[serde(rename = "imbalanced-6")]
    Imbalanced6,
}

impl GroupPreset {
    pub const ALL: [GroupPreset; 5] = [
        GroupPreset::Balanced8,
        GroupPreset::Imbalanced3,
        GroupPreset::Imbalanced4,
        GroupPreset::Imbalanced5,
        GroupPreset::Imbalanced6,
    ];

    pub fn name(self) -> &'static str {
        match self {
            GroupPreset::Balanced8 => "balanced-8",
            GroupPreset::Imbalanced3 => "imbalanced-3",
            GroupPreset::Imbalanced4 => "imbalanced-4",
            GroupPreset::Imbalanced5 => "imbalanced-5",
            GroupPreset::Imbalanced6 => "imbalanced-6",
        }
    }

    /// Number of edges kept per cell.
    pub fn kept_edges(self, cell: CellSpec) -> Result<usize> {
        Ok(self.groups(cell)?.iter().map(|g| g.k).sum())
    }

    pub fn groups(self, cell: CellSpec) -> Result<Vec<EdgeGroup>> {
        let node = |j, k| EdgeGroup::node(cell, j, k);
        if self == GroupPreset::Balanced8 {
            return Ok(cell.intermediate_nodes().map(|j| node(j, 2)).collect());
        }
        if cell.nodes != 6 {
            return Err(Error::config("groups.preset", format!("{} is defined for 6-node cells only", self.name())));
        }
        Ok(match self {
            GroupPreset::Balanced8 => unreachable!(),
            GroupPreset::Imbalanced3 => {
                let mut merged = node(2, 1);
                merged.edges.extend(node(3, 1).edges);
                vec![merged.normalized(cell), node(4, 1), node(5, 1)]
            }
            GroupPreset::Imbalanced4 => vec![node(2, 1), node(3, 1), node(4, 1), node(5, 1)],
            GroupPreset::Imbalanced5 => vec![node(2, 1), node(3, 1), node(4, 1), node(5, 2)],
            GroupPreset::Imbalanced6 => vec![node(2, 1), node(3, 1), node(4, 2), node(5, 2)],
        })
    }
}

impl FromStr for GroupPreset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        GroupPreset::ALL
            .into_iter()
            .find(|p| p.name() == s)
            .ok_or_else(|| Error::config("groups.preset", format!("unknown preset `{s}`")))
    }
}

impl fmt::Display for GroupPreset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

// ---- differentiable forms -------------------------------------------------

/// `-sum p ln max(p, floor)` summed over every entry of an already
/// normalized probability tensor.
fn entropy_of_probs(g: &mut Graph, p: Var) -> Result<Var> {
    let logp = g.log(p, PROB_FLOOR)?;
    let plogp = g.mul(p, logp)?;
    let s = g.sum(plogp)?;
    g.scale(s, -1.0)
}

/// Operation entropy of every edge of every cell type; `alpha` are `[E, |O|]`.
pub fn op_entropy_loss(g: &mut Graph, alpha: &[Var]) -> Result<Var> {
    let mut total: Option<Var> = None;
    for &a in alpha {
        let p = g.softmax(a, 1)?;
        let h = entropy_of_probs(g, p)?;
        total = Some(match total {
            Some(t) => g.add(t, h)?,
            None => h,
        });
    }
    total.ok_or_else(|| Error::contract("no architecture parameters"))
}

/// Group logits gathered from a `[E]` beta tensor.
fn gather(g: &mut Graph, beta: Var, indices: &[usize]) -> Result<Var> {
    let picks = indices.iter().map(|&e| g.pick(beta, e)).collect::<Result<Vec<_>>>()?;
    g.concat(&picks, 0)
}

/// Differentiable edge loss of one group given its logits vector.
pub fn edge_group_terms(g: &mut Graph, logits: Var, k: usize) -> Result<(Var, Var)> {
    let p = g.softmax(logits, 0)?;
    let h = entropy_of_probs(g, p)?;
    let positive = g.relu(logits)?;
    let s = g.sum(positive)?;
    let target = g.constant(Tensor::scalar(-(k as Float)))?;
    let dev = g.add(s, target)?;
    let card = g.square(dev)?;
    Ok((h, card))
}

/// Edge loss over every group of every cell type, split into its entropy and
/// cardinality parts.
#[derive(Clone, Copy, Debug)]
pub struct EdgeLossVars {
    pub entropy: Var,
    pub cardinality: Var,
    pub total: Var,
}

pub fn edge_loss(g: &mut Graph, beta: &[Var], cell: CellSpec, groups: &[EdgeGroup]) -> Result<EdgeLossVars> {
    validate_groups(groups, cell)?;
    let mut entropy: Option<Var> = None;
    let mut card: Option<Var> = None;
    for &b in beta {
        for group in groups {
            let logits = gather(g, b, &group.indices(cell))?;
            let (h, c) = edge_group_terms(g, logits, group.k)?;
            entropy = Some(match entropy {
                Some(t) => g.add(t, h)?,
                None => h,
            });
            card = Some(match card {
                Some(t) => g.add(t, c)?,
                None => c,
            });
        }
    }
    let (entropy, cardinality) = match (entropy, card) {
        (Some(e), Some(c)) => (e, c),
        _ => return Err(Error::contract("no architecture parameters")),
    };
    let total = g.add(entropy, cardinality)?;
    Ok(EdgeLossVars { entropy, cardinality, total })
}

/// Plain-number edge loss, `(entropy part, cardinality part)`.
pub fn edge_loss_total(beta: &[Tensor], cell: CellSpec, groups: &[EdgeGroup]) -> Result<(Float, Float)> {
    validate_groups(groups, cell)?;
    let mut parts = (0.0, 0.0);
    for t in beta {
        for group in groups {
            let logits: Vec<Float> = group.indices(cell).iter().map(|&e| t.data()[e]).collect();
            let (h, c) = edge_group_loss(&logits, group.k);
            parts.0 += h;
            parts.1 += c;
        }
    }
    Ok(parts)
}

// ---- control functions -----------------------------------------------------

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScheduleKind {
    Const,
    Linear,
    Exp,
    Step,
    Log,
}

impl ScheduleKind {
    pub const ALL: [ScheduleKind; 5] =
        [ScheduleKind::Const, ScheduleKind::Linear, ScheduleKind::Exp, ScheduleKind::Step, ScheduleKind::Log];
}

/// Monotone epoch-dependent multiplier in `[0, 1]`.
///
/// With `t = (epoch - activation) / (total - 1 - activation)`:
/// const `1`, linear `t`, exp `(e^{kt} - 1) / (e^k - 1)`,
/// log `ln(1 + kt) / ln(1 + k)`, step `[t >= t0]`; zero before `activation`.
/// The result is multiplied by `scale`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScheduleSpec {
    pub kind: ScheduleKind,
    #[serde(default)]
    pub activation: usize,
    #[serde(default = "default_shape")]
    pub k: Float,
    #[serde(default = "default_t0")]
    pub t0: Float,
    #[serde(default = "default_scale")]
    pub scale: Float,
}

fn default_shape() -> Float {
    5.0
}

fn default_t0() -> Float {
    0.5
}

fn default_scale() -> Float {
    1.0
}

impl ScheduleSpec {
    pub fn new(kind: ScheduleKind) -> Self {
        ScheduleSpec { kind, activation: 0, k: default_shape(), t0: default_t0(), scale: default_scale() }
    }

    pub fn activated_at(mut self, epoch: usize) -> Self {
        self.activation = epoch;
        self
    }

    pub fn scaled(mut self, scale: Float) -> Self {
        self.scale = scale;
        self
    }

    /// Identically zero.
    pub fn off() -> Self {
        Self::new(ScheduleKind::Const).scaled(0.0)
    }

    pub fn validate(&self, field: &str) -> Result<()> {
        if !(0.0..=1.0).contains(&self.scale) {
            return Err(Error::config(format!("{field}.scale"), "must lie in [0, 1]"));
        }
        if matches!(self.kind, ScheduleKind::Exp | ScheduleKind::Log) && !(self.k > 0.0 && self.k.is_finite()) {
            return Err(Error::config(format!("{field}.k"), "shape constant must be positive"));
        }
        if !self.t0.is_finite() {
            return Err(Error::config(format!("{field}.t0"), "must be finite"));
        }
        Ok(())
    }

    /// Normalized progress `t` in `[0, 1]`, `None` before activation.
    fn progress(&self, epoch: usize, total_epochs: usize) -> Option<Float> {
        if epoch < self.activation {
            return None;
        }
        let span = total_epochs.saturating_sub(1).saturating_sub(self.activation);
        if span == 0 {
            return Some(1.0);
        }
        Some(((epoch - self.activation) as Float / span as Float).min(1.0))
    }

    pub fn value(&self, epoch: usize, total_epochs: usize) -> Result<Float> {
        if epoch >= total_epochs {
            return Err(Error::contract(format!("epoch {epoch} outside 0..{total_epochs}")));
        }
        let Some(t) = self.progress(epoch, total_epochs) else {
            return Ok(0.0);
        };
        let k = self.k;
        let v = match self.kind {
            ScheduleKind::Const => 1.0,
            ScheduleKind::Linear => t,
            ScheduleKind::Exp => ((k * t).exp() - 1.0) / (k.exp() - 1.0),
            ScheduleKind::Log => (1.0 + k * t).ln() / (1.0 + k).ln(),
            ScheduleKind::Step => {
                if t < self.t0 {
                    0.0
                } else {
                    1.0
                }
            }
        };
        Ok(self.scale * v.clamp(0.0, 1.0))
    }
}

/// Control functions of the total objective.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RegularizerConfig {
    pub lambda_c: ScheduleSpec,
    pub lambda_1: ScheduleSpec,
    pub lambda_2: ScheduleSpec,
    #[serde(default = "default_beta_multiplier")]
    pub beta_multiplier: Float,
}

fn default_beta_multiplier() -> Float {
    DEFAULT_BETA_MULTIPLIER
}

impl Default for RegularizerConfig {
    /// linear `lambda_c`, log `lambda_1`, const `lambda_2`.
    fn default() -> Self {
        RegularizerConfig {
            lambda_c: ScheduleSpec::new(ScheduleKind::Linear),
            lambda_1: ScheduleSpec::new(ScheduleKind::Log),
            lambda_2: ScheduleSpec::new(ScheduleKind::Const),
            beta_multiplier: DEFAULT_BETA_MULTIPLIER,
        }
    }
}

impl RegularizerConfig {
    /// No regularization: the plain classification objective.
    pub fn disabled() -> Self {
        RegularizerConfig { lambda_c: ScheduleSpec::off(), ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        self.lambda_c.validate("regularizers.lambda_c")?;
        self.lambda_1.validate("regularizers.lambda_1")?;
        self.lambda_2.validate("regularizers.lambda_2")?;
        if !(self.beta_multiplier >= 0.0 && self.beta_multiplier.is_finite()) {
            return Err(Error::config("regularizers.beta_multiplier", "must be a non-negative number"));
        }
        Ok(())
    }

    pub fn lambdas(&self, epoch: usize, total_epochs: usize) -> Result<Lambdas> {
        Ok(Lambdas {
            lambda_c: self.lambda_c.value(epoch, total_epochs)?,
            lambda_alpha: self.lambda_1.value(epoch, total_epochs)?,
            lambda_beta: self.beta_multiplier * self.lambda_2.value(epoch, total_epochs)?,
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Lambdas {
    pub lambda_c: Float,
    pub lambda_alpha: Float,
    pub lambda_beta: Float,
}

/// Components of the objective at one optimization step.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub l_c: Float,
    pub l_o: Float,
    pub l_e: Float,
    /// Entropy and cardinality parts of `l_e`.
    pub l_e_entropy: Float,
    pub l_e_cardinality: Float,
    pub lambda_c: Float,
    pub lambda_alpha: Float,
    pub lambda_beta: Float,
    pub total: Float,
}

impl LossReport {
    /// Componentwise mean; `total` stays consistent because the weights are
    /// constant within an epoch.
    pub fn mean(reports: &[LossReport]) -> LossReport {
        let n = reports.len().max(1) as Float;
        let avg = |f: fn(&LossReport) -> Float| reports.iter().map(f).sum::<Float>() / n;
        let first = reports.first().copied().unwrap_or_default();
        let mut mean = LossReport {
            l_c: avg(|r| r.l_c),
            l_o: avg(|r| r.l_o),
            l_e_entropy: avg(|r| r.l_e_entropy),
            l_e_cardinality: avg(|r| r.l_e_cardinality),
            lambda_c: first.lambda_c,
            lambda_alpha: first.lambda_alpha,
            lambda_beta: first.lambda_beta,
            ..LossReport::default()
        };
        mean.l_e = mean.l_e_entropy + mean.l_e_cardinality;
        mean.total = combine(mean.l_c, mean.l_o, mean.l_e, &first.lambdas());
        mean
    }

    pub fn lambdas(&self) -> Lambdas {
        Lambdas { lambda_c: self.lambda_c, lambda_alpha: self.lambda_alpha, lambda_beta: self.lambda_beta }
    }
}

fn combine(l_c: Float, l_o: Float, l_e: Float, l: &Lambdas) -> Float {
    l_c + l.lambda_c * (l.lambda_alpha * l_o + l.lambda_beta * l_e)
}

/// `L_C + lambda_c * (lambda_alpha * L_O + lambda_beta * L_E)`.
pub fn total_loss(l_c: Float, l_o: Float, l_e: (Float, Float), lambdas: Lambdas) -> LossReport {
    let l_e_sum = l_e.0 + l_e.1;
    LossReport {
        l_c,
        l_o,
        l_e: l_e_sum,
        l_e_entropy: l_e.0,
        l_e_cardinality: l_e.1,
        lambda_c: lambdas.lambda_c,
        lambda_alpha: lambdas.lambda_alpha,
        lambda_beta: lambdas.lambda_beta,
        total: combine(l_c, l_o, l_e_sum, &lambdas),
    }
}

/// Records the weighted objective on the tape. Terms with a zero weight are
/// left out of the graph.
pub fn total_loss_var(g: &mut Graph, l_c: Var, l_o: Var, l_e: Var, lambdas: Lambdas) -> Result<Var> {
    let wo = lambdas.lambda_c * lambdas.lambda_alpha;
    let we = lambdas.lambda_c * lambdas.lambda_beta;
    let mut total = l_c;
    if wo != 0.0 {
        let t = g.scale(l_o, wo)?;
        total = g.add(total, t)?;
    }
    if we != 0.0 {
        let t = g.scale(l_e, we)?;
        total = g.add(total, t)?;
    }
    Ok(total)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Role;

    fn cell() -> CellSpec {
        CellSpec::new(6).unwrap()
    }

    #[test]
    fn uniform_entropy_is_ln_seven() {
        let h = op_entropy_edge(&[0.0; 7]);
        assert!((h - 1.945910149055313).abs() < 1e-12);
    }

    #[test]
    fn dominant_logit_has_small_entropy() {
        let mut a = [0.0; 7];
        a[0] = 10.0;
        // p0 = e^10 / (e^10 + 6), recomputed independently
        let p0 = 1.0 / (1.0 + 6.0 * (-10.0 as Float).exp());
        let q = (1.0 - p0) / 6.0;
        let expected = -(p0 * p0.ln() + 6.0 * q * q.ln());
        let h = op_entropy_edge(&a);
        assert!((h - expected).abs() < 1e-12);
        assert!(h < 0.003);
    }

    #[test]
    fn single_candidate_has_zero_entropy() {
        assert_eq!(op_entropy_edge(&[3.0]), 0.0);
    }

    #[test]
    fn total_entropy_counts_every_edge() {
        let ln7 = (7.0 as Float).ln();
        let both = [Tensor::zeros(&[14, 7]), Tensor::zeros(&[14, 7])];
        assert!((op_entropy_total(&both) - 28.0 * ln7).abs() < 1e-10);
        assert!((op_entropy_total(&both) - 54.485).abs() < 1e-3);
        assert!((op_entropy_total(&both[..1]) - 14.0 * ln7).abs() < 1e-10);
        let mut sharp = Tensor::full(&[14, 7], -1e4);
        for e in 0..14 {
            sharp.data_mut()[e * 7 + e % 7] = 0.0;
        }
        assert!(op_entropy_total(&[sharp]) < 1e-9);
    }

    #[test]
    fn cardinality_examples() {
        assert_eq!(edge_group_loss(&[1.0, 1.0, -5.0, -5.0], 2).1, 0.0);
        assert!((edge_group_loss(&[0.5, 0.7, -0.2], 2).1 - 0.64).abs() < 1e-12);
        assert_eq!(edge_group_loss(&[-0.1, 0.0, -3.0], 2).1, 4.0);
    }

    #[test]
    fn balanced_groups_are_per_node_pairs() {
        let groups = GroupPreset::Balanced8.groups(cell()).unwrap();
        assert_eq!(groups.len(), 4);
        for (g, j) in groups.iter().zip(2..6) {
            assert_eq!(g.k, 2);
            assert_eq!(g.edges, (0..j).map(|i| (i, j)).collect::<Vec<_>>());
        }
        validate_groups(&groups, cell()).unwrap();
    }

    #[test]
    fn imbalanced_presets_keep_requested_counts() {
        for (preset, kept) in [
            (GroupPreset::Balanced8, 8),
            (GroupPreset::Imbalanced3, 3),
            (GroupPreset::Imbalanced4, 4),
            (GroupPreset::Imbalanced5, 5),
            (GroupPreset::Imbalanced6, 6),
        ] {
            let groups = preset.groups(cell()).unwrap();
            validate_groups(&groups, cell()).unwrap();
            assert_eq!(preset.kept_edges(cell()).unwrap(), kept, "{preset}");
        }
        let three = GroupPreset::Imbalanced3.groups(cell()).unwrap();
        assert_eq!(three[0].edges, vec![(0, 2), (1, 2), (0, 3), (1, 3), (2, 3)]);
        assert_eq!((three[0].k, three[1].k, three[2].k), (1, 1, 1));
        let five = GroupPreset::Imbalanced5.groups(cell()).unwrap();
        assert_eq!(five.iter().map(|g| g.k).collect::<Vec<_>>(), vec![1, 1, 1, 2]);
        let six = GroupPreset::Imbalanced6.groups(cell()).unwrap();
        assert_eq!(six.iter().map(|g| g.k).collect::<Vec<_>>(), vec![1, 1, 2, 2]);
    }

    #[test]
    fn overlapping_or_incomplete_groups_are_rejected() {
        let mut groups = GroupPreset::Balanced8.groups(cell()).unwrap();
        groups.pop();
        assert!(matches!(validate_groups(&groups, cell()), Err(Error::Config { .. })));
        let mut overlap = GroupPreset::Balanced8.groups(cell()).unwrap();
        overlap[0].edges.push((0, 3));
        assert!(validate_groups(&overlap, cell()).is_err());
        let mut too_many = GroupPreset::Balanced8.groups(cell()).unwrap();
        too_many[0].k = 3;
        assert!(validate_groups(&too_many, cell()).is_err());
    }

    #[test]
    fn single_saturated_group_pulls_every_beta_to_one() {
        let all = vec![EdgeGroup { edges: cell().edges(), k: 14 }];
        validate_groups(&all, cell()).unwrap();
        let at_one = Tensor::ones(&[14]);
        assert_eq!(edge_loss_total(&[at_one], cell(), &all).unwrap().1, 0.0);
        let below = Tensor::full(&[14], 0.5);
        assert!((edge_loss_total(&[below], cell(), &all).unwrap().1 - 49.0).abs() < 1e-12);
    }

    #[test]
    fn tape_and_plain_losses_agree() {
        let alpha = Tensor::new(vec![14, 7], (0..98).map(|i| ((i * 37 % 11) as Float - 5.0) * 0.3).collect()).unwrap();
        let beta = Tensor::new(vec![14], (0..14).map(|i| ((i * 5 % 7) as Float - 3.0) * 0.4).collect()).unwrap();
        let groups = GroupPreset::Imbalanced3.groups(cell()).unwrap();
        let mut g = Graph::new();
        let a = g.leaf(alpha.clone(), Role::Alpha).unwrap();
        let b = g.leaf(beta.clone(), Role::Beta).unwrap();
        let lo = op_entropy_loss(&mut g, &[a]).unwrap();
        let le = edge_loss(&mut g, &[b], cell(), &groups).unwrap();
        let plain = edge_loss_total(&[beta], cell(), &groups).unwrap();
        assert!((g.value(lo).item() - op_entropy_total(&[alpha])).abs() < 1e-12);
        assert!((g.value(le.entropy).item() - plain.0).abs() < 1e-12);
        assert!((g.value(le.cardinality).item() - plain.1).abs() < 1e-12);
    }

    #[test]
    fn schedule_endpoints() {
        let lin = ScheduleSpec::new(ScheduleKind::Linear);
        assert_eq!(lin.value(0, 50).unwrap(), 0.0);
        assert_eq!(lin.value(49, 50).unwrap(), 1.0);
        let step = ScheduleSpec::new(ScheduleKind::Step);
        assert_eq!(step.value(24, 50).unwrap(), 0.0);
        assert_eq!(step.value(25, 50).unwrap(), 1.0);
        for kind in ScheduleKind::ALL {
            let s = ScheduleSpec::new(kind).activated_at(8);
            assert_eq!(s.value(7, 50).unwrap(), 0.0, "{kind:?}");
        }
        assert!(lin.value(50, 50).is_err());
    }

    #[test]
    fn schedule_kind_names_parse() {
        let s: ScheduleSpec = toml::from_str("kind = \"exp\"\nk = 3.0").unwrap();
        assert_eq!(s.kind, ScheduleKind::Exp);
        assert_eq!(s.k, 3.0);
        assert!(toml::from_str::<ScheduleSpec>("kind = \"cosine\"").is_err());
    }

    #[test]
    fn total_combines_weighted_terms() {
        let none = Lambdas { lambda_c: 0.0, lambda_alpha: 1.0, lambda_beta: 4.0 };
        assert_eq!(total_loss(0.7, 3.0, (2.0, 1.0), none).total, 0.7);
        let cfg = RegularizerConfig {
            lambda_c: ScheduleSpec::new(ScheduleKind::Const),
            lambda_1: ScheduleSpec::new(ScheduleKind::Const),
            lambda_2: ScheduleSpec::new(ScheduleKind::Const),
            beta_multiplier: DEFAULT_BETA_MULTIPLIER,
        };
        let l = cfg.lambdas(3, 10).unwrap();
        let r = total_loss(0.5, 2.0, (0.25, 0.5), l);
        assert!((r.total - (0.5 + 2.0 + 4.0 * 0.75)).abs() < 1e-12);
        let zero = total_loss(0.5, 0.0, (0.0, 0.0), l);
        assert_eq!(zero.total, 0.5);
    }

    #[test]
    fn default_controls_are_linear_log_const() {
        let d = RegularizerConfig::default();
        assert_eq!(
            (d.lambda_c.kind, d.lambda_1.kind, d.lambda_2.kind),
            (ScheduleKind::Linear, ScheduleKind::Log, ScheduleKind::Const)
        );
        assert_eq!(RegularizerConfig::disabled().lambdas(5, 10).unwrap().lambda_c, 0.0);
    }
}
