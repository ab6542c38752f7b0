//! Line-delimited JSON metrics, one record per optimization step.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::search::{SearchObserver, StepRecord};
use crate::supernet::{softmax, ArchParams};
use crate::regularizers::EdgeGroup;
use crate::tensor::Float;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub run_id: String,
    pub epoch: usize,
    pub step: usize,
    pub l_c: Float,
    pub l_o: Float,
    pub l_e: Float,
    pub l_e_entropy: Float,
    pub l_e_cardinality: Float,
    pub lambda_c: Float,
    pub lambda_alpha: Float,
    pub lambda_beta: Float,
    pub total: Float,
    pub lr_theta: Float,
    pub lr_arch: Float,
    /// Per cell type and edge: largest entry of `softmax(alpha)`.
    pub alpha_max: Vec<Vec<Float>>,
    /// Per cell type and edge: `softmax(beta)` over the node's incoming edges.
    pub beta_softmax: Vec<Vec<Float>>,
    /// Per cell type and group: mass of the `K` largest entries of the
    /// group's `softmax(beta)`.
    pub beta_topk_mass: Vec<Vec<Float>>,
    pub wall_clock_s: f64,
}

impl MetricsRecord {
    /// The record with its timing removed, for reproducibility comparisons.
    pub fn without_timing(&self) -> MetricsRecord {
        MetricsRecord { wall_clock_s: 0.0, ..self.clone() }
    }
}

/// Top-`K` softmax mass of every group, per cell type.
pub fn beta_topk_mass(arch: &ArchParams, groups: &[EdgeGroup]) -> Vec<Vec<Float>> {
    (0..arch.cell_types.len())
        .map(|t| {
            groups
                .iter()
                .map(|g| {
                    let logits: Vec<Float> = g.indices(arch.cell).iter().map(|&e| arch.beta[t].data()[e]).collect();
                    let mut p = softmax(&logits);
                    p.sort_by(|a, b| b.total_cmp(a));
                    p.iter().take(g.k).sum()
                })
                .collect()
        })
        .collect()
}

pub fn alpha_max(arch: &ArchParams) -> Vec<Vec<Float>> {
    (0..arch.cell_types.len())
        .map(|t| {
            (0..arch.cell.num_edges())
                .map(|e| arch.alpha_softmax(t, e).into_iter().fold(0.0, Float::max))
                .collect()
        })
        .collect()
}

pub fn record(run_id: &str, step: &StepRecord<'_>, wall_clock_s: f64) -> MetricsRecord {
    let r = &step.report;
    MetricsRecord {
        run_id: run_id.to_string(),
        epoch: step.epoch,
        step: step.step,
        l_c: r.l_c,
        l_o: r.l_o,
        l_e: r.l_e,
        l_e_entropy: r.l_e_entropy,
        l_e_cardinality: r.l_e_cardinality,
        lambda_c: r.lambda_c,
        lambda_alpha: r.lambda_alpha,
        lambda_beta: r.lambda_beta,
        total: r.total,
        lr_theta: step.lr_theta,
        lr_arch: step.lr_arch,
        alpha_max: alpha_max(step.arch),
        beta_softmax: (0..step.arch.cell_types.len()).map(|t| step.arch.beta_softmax(t)).collect(),
        beta_topk_mass: beta_topk_mass(step.arch, step.groups),
        wall_clock_s,
    }
}

/// Appends one record per step to a JSONL file.
pub struct MetricsWriter {
    run_id: String,
    out: BufWriter<File>,
    started: Instant,
    last: Option<MetricsRecord>,
}

impl MetricsWriter {
    pub fn create(path: &Path, run_id: impl Into<String>) -> Result<Self> {
        let file = File::create(path).map_err(|e| std::io::Error::new(e.kind(), format!("{}: {e}", path.display())))?;
        Ok(MetricsWriter { run_id: run_id.into(), out: BufWriter::new(file), started: Instant::now(), last: None })
    }

    pub fn last(&self) -> Option<&MetricsRecord> {
        self.last.as_ref()
    }

    pub fn finish(mut self) -> Result<Option<MetricsRecord>> {
        self.out.flush()?;
        Ok(self.last)
    }
}

impl SearchObserver for MetricsWriter {
    fn on_step(&mut self, step: &StepRecord<'_>) -> Result<()> {
        let rec = record(&self.run_id, step, self.started.elapsed().as_secs_f64());
        serde_json::to_writer(&mut self.out, &rec)?;
        self.out.write_all(b"\n")?;
        self.last = Some(rec);
        Ok(())
    }
}

pub fn read_metrics(path: &Path) -> Result<Vec<MetricsRecord>> {
    let file = File::open(path).map_err(|e| std::io::Error::new(e.kind(), format!("{}: {e}", path.display())))?;
    let mut out = Vec::new();
    for (n, line) in BufReader::new(file).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: MetricsRecord = serde_json::from_str(&line)
            .map_err(|e| Error::config(format!("line {}", n + 1), format!("bad metrics record: {e}")))?;
        out.push(rec);
    }
    Ok(out)
}
