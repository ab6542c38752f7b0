use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

#[global_allocator]
static GLOBAL: mimalloc::MiMalloc = mimalloc::MiMalloc;

use da2s::regularizers::GroupPreset;
use da2s_cli::{
    cmd_export_dataset, cmd_export_one_hot, cmd_export_plots, cmd_gap_probe, cmd_retrain, cmd_search, error_line,
    DEFAULT_OUTPUT_ROOT, OUTPUT_ROOT_ENV,
};

#[derive(Parser)]
#[command(name = "da2s", version, about = "Discretization-aware differentiable architecture search")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Search a cell architecture.
    Search {
        #[arg(long)]
        config: PathBuf,
        /// Output directory; defaults to a directory under the output root.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Root for default output directories.
        #[arg(long, env = OUTPUT_ROOT_ENV)]
        output_root: Option<PathBuf>,
    },
    /// Accuracy before and after one-hot discretization, with frozen weights.
    GapProbe {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, value_parser = parse_preset)]
        groups: GroupPreset,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train a genotype from scratch.
    Retrain {
        #[arg(long)]
        genotype: PathBuf,
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Render the metrics stream as SVG charts.
    ExportPlots {
        #[arg(long)]
        metrics: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write a checkpoint whose architecture is discretized under a preset.
    ExportOneHot {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, value_parser = parse_preset)]
        groups: GroupPreset,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write the configured datasets in the checkpoint container format.
    ExportDataset {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

fn parse_preset(s: &str) -> Result<GroupPreset, String> {
    s.parse().map_err(|e: da2s::Error| e.to_string())
}

fn run(cli: Cli) -> da2s::Result<()> {
    match cli.command {
        Command::Search { config, out, output_root } => {
            let root = output_root.unwrap_or_else(|| PathBuf::from(DEFAULT_OUTPUT_ROOT));
            let done = cmd_search(&config, out.as_deref(), &root)?;
            println!("{}", serde_json::to_string(&done.summary)?);
            eprintln!("artifacts in {}", done.dir.display());
        }
        Command::GapProbe { checkpoint, groups, out } => {
            let report = cmd_gap_probe(&checkpoint, groups, out.as_deref())?;
            println!("{}", serde_json::to_string(&report)?);
        }
        Command::Retrain { genotype, config, epochs, out } => {
            let done = cmd_retrain(&genotype, &config, epochs, out.as_deref())?;
            println!("{}", serde_json::to_string(&done.report)?);
        }
        Command::ExportPlots { metrics, out } => {
            for path in cmd_export_plots(&metrics, &out)? {
                println!("{}", path.display());
            }
        }
        Command::ExportOneHot { checkpoint, groups, out } => {
            let genotype = cmd_export_one_hot(&checkpoint, groups, &out)?;
            println!("{}", serde_json::to_string(&genotype)?);
        }
        Command::ExportDataset { config, out } => cmd_export_dataset(&config, &out)?,
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("{}", error_line(&err));
            ExitCode::FAILURE
        }
    }
}
