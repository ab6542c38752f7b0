//! Discrete architectures: deriving them from continuous parameters, the
//! one-hot probe and the discretization gap.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ops::OpKind;
use crate::regularizers::{validate_groups, EdgeGroup};
use crate::supernet::{ArchParams, CellSpec, CellType, Edge, NetworkSpec, SuperNetwork};
use crate::tensor::{Float, Tensor};

pub const GENOTYPE_SCHEMA_VERSION: u32 = 1;

/// Logit given to dropped candidates by [`one_hot_arch`].
pub const DROPPED_LOGIT: Float = -1e4;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KeptEdge {
    pub edge: Edge,
    pub op: OpKind,
}

/// Kept edges and their operations, per cell type, plus the grouping they
/// were selected under.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Genotype {
    pub nodes: usize,
    pub cells: BTreeMap<CellType, Vec<KeptEdge>>,
    pub groups: Vec<EdgeGroup>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct GenotypeFile {
    schema_version: u32,
    nodes: usize,
    cells: BTreeMap<CellType, Vec<KeptEdge>>,
    groups: Vec<EdgeGroup>,
}

impl Genotype {
    pub fn cell(&self) -> Result<CellSpec> {
        CellSpec::new(self.nodes)
    }

    /// Kept operation per edge index of `cell_type`, `None` for dropped edges.
    pub fn kept_ops(&self, cell_type: CellType, cell: CellSpec) -> Result<Vec<Option<OpKind>>> {
        if cell.nodes != self.nodes {
            return Err(Error::contract(format!("genotype has {} nodes, cell has {}", self.nodes, cell.nodes)));
        }
        let kept = self
            .cells
            .get(&cell_type)
            .ok_or_else(|| Error::contract(format!("genotype has no {cell_type} cell")))?;
        let mut ops = vec![None; cell.num_edges()];
        for k in kept {
            let e = cell
                .edge_index(k.edge)
                .ok_or_else(|| Error::contract(format!("{:?} is not an edge of a {}-node cell", k.edge, cell.nodes)))?;
            if ops[e].replace(k.op).is_some() {
                return Err(Error::contract(format!("edge {:?} is kept twice", k.edge)));
            }
        }
        Ok(ops)
    }

    pub fn kept_edge_count(&self, cell_type: CellType) -> usize {
        self.cells.get(&cell_type).map_or(0, Vec::len)
    }

    /// Checks edge validity and that every group keeps exactly `K` edges.
    pub fn validate(&self) -> Result<()> {
        let cell = self.cell()?;
        validate_groups(&self.groups, cell)?;
        for (&t, kept) in &self.cells {
            self.kept_ops(t, cell)?;
            for (g, group) in self.groups.iter().enumerate() {
                let n = kept.iter().filter(|k| group.edges.contains(&k.edge)).count();
                if n != group.k {
                    return Err(Error::contract(format!(
                        "{t} cell keeps {n} edges of group {g}, expected {}",
                        group.k
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        let file = GenotypeFile {
            schema_version: GENOTYPE_SCHEMA_VERSION,
            nodes: self.nodes,
            cells: self.cells.clone(),
            groups: self.groups.clone(),
        };
        Ok(serde_json::to_string_pretty(&file)? + "\n")
    }

    pub fn from_json(text: &str) -> Result<Genotype> {
        let mut de = serde_json::Deserializer::from_str(text);
        let file: GenotypeFile = serde_path_to_error::deserialize(&mut de)
            .map_err(|e| Error::config(e.path().to_string(), e.inner().to_string()))?;
        if file.schema_version != GENOTYPE_SCHEMA_VERSION {
            return Err(Error::config(
                "schema_version",
                format!("unsupported genotype schema {}, expected {GENOTYPE_SCHEMA_VERSION}", file.schema_version),
            ));
        }
        let genotype = Genotype { nodes: file.nodes, cells: file.cells, groups: file.groups };
        genotype.validate()?;
        Ok(genotype)
    }
}

/// Index of the largest value; the smallest index wins ties.
fn argmax(values: &[Float]) -> (usize, bool) {
    let mut best = 0;
    let mut tied = false;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
            tied = false;
        } else if v == values[best] {
            tied = true;
        }
    }
    (best, tied)
}

/// Per group, the `K` edges with the largest `beta`; on each kept edge, the
/// operation with the largest `alpha`.
///
/// Ranking raw `beta` within a group is the same as ranking its softmax over
/// the group. Ties go to the lexicographically smallest edge, then to the
/// smallest operation index, and are logged.
pub fn derive_genotype(arch: &ArchParams, groups: &[EdgeGroup]) -> Result<Genotype> {
    let cell = arch.cell;
    validate_groups(groups, cell)?;
    let mut cells = BTreeMap::new();
    for (t, &cell_type) in arch.cell_types.iter().enumerate() {
        let beta = arch.beta[t].data();
        let mut kept = Vec::new();
        for (g, group) in groups.iter().enumerate() {
            let mut ranked: Vec<(Edge, Float)> =
                group.edges.iter().map(|&e| (e, beta[cell.edge_index(e).expect("validated")])).collect();
            ranked.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
            if group.k < ranked.len() && ranked[group.k - 1].1 == ranked[group.k].1 {
                log::warn!(
                    "{cell_type} group {g}: edges {:?} and {:?} tie at the selection boundary; keeping the first",
                    ranked[group.k - 1].0,
                    ranked[group.k].0
                );
            }
            for &(edge, _) in &ranked[..group.k] {
                let (op, tied) = argmax(arch.alpha_edge(t, cell.edge_index(edge).expect("validated")));
                if tied {
                    log::warn!("{cell_type} edge {edge:?}: operation tie, keeping {}", OpKind::ALL[op]);
                }
                kept.push(KeptEdge { edge, op: OpKind::ALL[op] });
            }
        }
        kept.sort_by_key(|k| cell.edge_index(k.edge));
        cells.insert(cell_type, kept);
    }
    Ok(Genotype { nodes: cell.nodes, cells, groups: groups.to_vec() })
}

/// Architecture that weights each kept operation of each kept edge by exactly
/// 1 and everything else by 0. The logits are set to a matching one-hot
/// pattern so that deriving again reproduces `genotype`.
pub fn one_hot_arch(arch: &ArchParams, genotype: &Genotype) -> Result<ArchParams> {
    let mut out = arch.clone();
    for (t, &cell_type) in arch.cell_types.iter().enumerate() {
        let kept = genotype.kept_ops(cell_type, arch.cell)?;
        let alpha = out.alpha[t].data_mut();
        let beta = out.beta[t].data_mut();
        for (e, op) in kept.iter().enumerate() {
            let row = &mut alpha[e * OpKind::COUNT..(e + 1) * OpKind::COUNT];
            row.fill(DROPPED_LOGIT);
            match op {
                Some(op) => {
                    row[op.index()] = 0.0;
                    beta[e] = 1.0;
                }
                None => {
                    row[0] = 0.0;
                    beta[e] = DROPPED_LOGIT;
                }
            }
        }
    }
    out.discrete = Some(genotype.clone());
    Ok(out)
}

/// Weight the continuous architecture puts on the kept operation of one kept
/// edge.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct KeptMass {
    pub cell_type: CellType,
    pub edge: Edge,
    pub op: OpKind,
    pub mass: Float,
}

/// `softmax(alpha)` mass on each kept candidate; exactly 1 for a discrete
/// architecture.
pub fn kept_mass(arch: &ArchParams, genotype: &Genotype) -> Result<Vec<KeptMass>> {
    let mut out = Vec::new();
    for (t, &cell_type) in arch.cell_types.iter().enumerate() {
        for k in genotype.cells.get(&cell_type).into_iter().flatten() {
            let e = arch
                .cell
                .edge_index(k.edge)
                .ok_or_else(|| Error::contract(format!("{:?} is not an edge of the cell", k.edge)))?;
            let mass = if arch.discrete.is_some() { 1.0 } else { arch.alpha_softmax(t, e)[k.op.index()] };
            out.push(KeptMass { cell_type, edge: k.edge, op: k.op, mass });
        }
    }
    Ok(out)
}

/// Accuracy of a trained super-network before and after discretization.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GapReport {
    /// Percent.
    pub supernet_accuracy: Float,
    pub discrete_accuracy: Float,
    pub drop: Float,
    pub mean_kept_mass: Float,
    pub kept_mass: Vec<KeptMass>,
}

/// Evaluates `net` under `arch` and under [`one_hot_arch`] with the same
/// weights and the same population statistics, captured from the continuous
/// model on the evaluation images.
pub fn gap_probe(
    net: &SuperNetwork,
    arch: &ArchParams,
    genotype: &Genotype,
    images: &Tensor,
    labels: &[usize],
    batch_size: usize,
) -> Result<GapReport> {
    if labels.is_empty() {
        return Err(Error::config("eval_set", "evaluation set is empty"));
    }
    let stats = net.capture_stats(arch, images, batch_size)?;
    let supernet_accuracy = net.accuracy(arch, &stats, images, labels, batch_size)?;
    let discrete = one_hot_arch(arch, genotype)?;
    let discrete_accuracy = net.accuracy(&discrete, &stats, images, labels, batch_size)?;
    let kept_mass = kept_mass(arch, genotype)?;
    let mean_kept_mass = kept_mass.iter().map(|k| k.mass).sum::<Float>() / kept_mass.len().max(1) as Float;
    Ok(GapReport {
        supernet_accuracy,
        discrete_accuracy,
        drop: supernet_accuracy - discrete_accuracy,
        mean_kept_mass,
        kept_mass,
    })
}

/// Fresh stand-alone network with only the kept operations.
pub fn instantiate_subnetwork(genotype: &Genotype, spec: NetworkSpec, seed: u64) -> Result<SuperNetwork> {
    SuperNetwork::from_genotype(spec, genotype, seed)
}
