//! Subcommands of the `da2s` binary.

pub mod plots;

use std::path::{Path, PathBuf};

use serde::Serialize;

use da2s::checkpoint::{save_dataset, Checkpoint};
use da2s::config::RunConfig;
use da2s::discretize::{derive_genotype, gap_probe, one_hot_arch, GapReport, Genotype};
use da2s::metrics::{beta_topk_mass, read_metrics, MetricsWriter};
use da2s::regularizers::{GroupPreset, LossReport};
use da2s::search::{prepared_data, run_search, train_subnetwork, RetrainReport};
use da2s::{Error, Float, Result};

/// Environment variable naming the default output root.
pub const OUTPUT_ROOT_ENV: &str = "DA2S_OUTPUT_ROOT";
pub const DEFAULT_OUTPUT_ROOT: &str = "runs";

pub const MANIFEST: &str = "manifest.toml";
pub const METRICS: &str = "metrics.jsonl";
pub const CHECKPOINT: &str = "checkpoint.bin";
pub const GENOTYPE: &str = "genotype.json";
pub const SUMMARY: &str = "summary.json";

/// `--out` if given, else the configured directory under `root`, else
/// `<root>/<run id>`.
pub fn output_dir(config: &RunConfig, out: Option<&Path>, root: &Path) -> Result<PathBuf> {
    if let Some(out) = out {
        return Ok(out.to_path_buf());
    }
    Ok(match &config.output_dir {
        Some(dir) if dir.is_absolute() => dir.clone(),
        Some(dir) => root.join(dir),
        None => root.join(config.run_id()?),
    })
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let text = serde_json::to_string_pretty(value)? + "\n";
    std::fs::write(path, text).map_err(|e| std::io::Error::new(e.kind(), format!("{}: {e}", path.display())).into())
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| std::io::Error::new(e.kind(), format!("{}: {e}", dir.display())).into())
}

#[derive(Clone, Debug, Serialize)]
pub struct SearchSummary {
    pub run_id: String,
    pub epochs: usize,
    pub final_report: LossReport,
    pub mean_op_entropy: Float,
    /// Share of edges whose largest operation weight is at least 0.9.
    pub confident_edges: Float,
    pub beta_topk_mass: Vec<Vec<Float>>,
    pub kept_edges: usize,
    pub gap: GapReport,
}

pub struct SearchOutput {
    pub dir: PathBuf,
    pub summary: SearchSummary,
    pub genotype: Genotype,
}

/// Runs a search and writes the manifest, metrics stream, checkpoint,
/// genotype and summary into the output directory.
pub fn cmd_search(config_path: &Path, out: Option<&Path>, root: &Path) -> Result<SearchOutput> {
    let config = RunConfig::load(config_path)?;
    search_with(&config, out, root)
}

pub fn search_with(config: &RunConfig, out: Option<&Path>, root: &Path) -> Result<SearchOutput> {
    config.validate()?;
    let dir = output_dir(config, out, root)?;
    create_dir(&dir)?;
    std::fs::write(dir.join(MANIFEST), config.to_toml()?)?;
    let run_id = config.run_id()?;
    let mut writer = MetricsWriter::create(&dir.join(METRICS), run_id.clone())?;
    let result = run_search(config, &mut writer)?;
    writer.finish()?;

    Checkpoint {
        config: config.clone(),
        net: result.net.clone(),
        arch: result.arch.clone(),
        normalizer: result.normalizer.clone(),
    }
    .save(&dir.join(CHECKPOINT))?;
    std::fs::write(dir.join(GENOTYPE), result.genotype.to_json()?)?;

    let (_, test, _) = prepared_data(config)?;
    let gap = gap_probe(&result.net, &result.arch, &result.genotype, &test.images, &test.labels, config.search.batch_size)?;
    let last = result.snapshots.last().expect("at least one epoch");
    let summary = SearchSummary {
        run_id,
        epochs: config.search.epochs,
        final_report: last.report,
        mean_op_entropy: last.mean_op_entropy(),
        confident_edges: last.share_of_confident_edges(0.9),
        beta_topk_mass: beta_topk_mass(&result.arch, &result.genotype.groups),
        kept_edges: result.genotype.cells.values().map(Vec::len).sum(),
        gap,
    };
    write_json(&dir.join(SUMMARY), &summary)?;
    Ok(SearchOutput { dir, summary, genotype: result.genotype })
}

/// Probes a checkpoint under the grouping of `preset`. The report is written
/// next to the checkpoint unless `out` names a file.
pub fn cmd_gap_probe(checkpoint: &Path, preset: GroupPreset, out: Option<&Path>) -> Result<GapReport> {
    let ckpt = Checkpoint::load(checkpoint)?;
    let groups = preset.groups(ckpt.arch.cell)?;
    let genotype = match &ckpt.arch.discrete {
        Some(g) => g.clone(),
        None => derive_genotype(&ckpt.arch, &groups)?,
    };
    let (_, test, _) = prepared_data(&ckpt.config)?;
    let report = gap_probe(&ckpt.net, &ckpt.arch, &genotype, &test.images, &test.labels, ckpt.config.search.batch_size)?;
    let path = match out {
        Some(p) => p.to_path_buf(),
        None => checkpoint.with_file_name(format!("gap_{preset}.json")),
    };
    write_json(&path, &report)?;
    Ok(report)
}

/// Writes a copy of a checkpoint whose architecture is the one-hot
/// discretization under `preset`.
pub fn cmd_export_one_hot(checkpoint: &Path, preset: GroupPreset, out: &Path) -> Result<Genotype> {
    let mut ckpt = Checkpoint::load(checkpoint)?;
    let groups = preset.groups(ckpt.arch.cell)?;
    let genotype = derive_genotype(&ckpt.arch, &groups)?;
    ckpt.arch = one_hot_arch(&ckpt.arch, &genotype)?;
    ckpt.save(out)?;
    Ok(genotype)
}

#[derive(Clone, Debug, Serialize)]
pub struct RetrainOutput {
    pub genotype: Genotype,
    pub report: RetrainReport,
}

/// Trains a genotype from scratch; `epochs` overrides the configured count.
pub fn cmd_retrain(genotype: &Path, config: &Path, epochs: Option<usize>, out: Option<&Path>) -> Result<RetrainOutput> {
    let text = std::fs::read_to_string(genotype)
        .map_err(|e| std::io::Error::new(e.kind(), format!("{}: {e}", genotype.display())))?;
    let genotype = Genotype::from_json(&text)?;
    let config = RunConfig::load(config)?;
    let report = train_subnetwork(&genotype, &config, epochs.unwrap_or(config.search.retrain_epochs))?;
    let output = RetrainOutput { genotype, report };
    if let Some(out) = out {
        write_json(out, &output)?;
    }
    Ok(output)
}

/// Renders the metrics stream to three SVG charts in `out`.
pub fn cmd_export_plots(metrics: &Path, out: &Path) -> Result<Vec<PathBuf>> {
    let records = read_metrics(metrics)?;
    let charts = plots::charts(&records)?;
    create_dir(out)?;
    let mut written = Vec::new();
    for (name, chart) in charts {
        let path = out.join(name);
        std::fs::write(&path, chart.render())?;
        written.push(path);
    }
    Ok(written)
}

/// Writes the configured training and test sets in the checkpoint container.
pub fn cmd_export_dataset(config: &Path, out: &Path) -> Result<()> {
    let config = RunConfig::load(config)?;
    let (train, test) = config.load_data()?;
    create_dir(out)?;
    save_dataset(&train, &out.join("train.bin"))?;
    save_dataset(&test, &out.join("test.bin"))
}

/// One-line rendering of an error for the terminal.
pub fn error_line(err: &Error) -> String {
    format!("error[{}]: {err}", err.category())
}
