//! `xmreid`: command-line front end of the experiment runner.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use log::info;

use xmodal_reid::backbone::{load_checkpoint, InputAdapter, ModelState, ZeroPadMode};
use xmodal_reid::dataset::{write_synthetic_dir, DatasetIndex, Modality};
use xmodal_reid::diagnostics::{emit_results_table, LabeledResult, TableFormat};
use xmodal_reid::evaluation::evaluate_cross_modal;
use xmodal_reid::experiment::{
    aggregate, emit_plots, load_index, prepare_data, run_ablation, run_experiment, run_folds, run_sweep,
    DatasetSource, ExperimentConfig, SweepAxis,
};
use xmodal_reid::training::embed_set;

const OUTPUT_ROOT_ENV: &str = "XMREID_OUTPUT_ROOT";
const DEVICE_ENV: &str = "XMREID_DEVICE";
const DETERMINISM_ENV: &str = "XMREID_DETERMINISM";

#[derive(Parser)]
#[command(name = "xmreid", version, about = "Cross-modal RGB/depth person re-identification experiments")]
struct Cli {
    /// More log output (repeatable).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArgs {
    /// Experiment configuration (TOML).
    #[arg(short, long)]
    config: PathBuf,
    /// Override a config value, e.g. `--set train.max_epochs=5`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Clone, Copy, ValueEnum)]
enum Format {
    Markdown,
    Csv,
}

impl From<Format> for TableFormat {
    fn from(f: Format) -> Self {
        match f {
            Format::Markdown => TableFormat::Markdown,
            Format::Csv => TableFormat::Csv,
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Materialise the configured synthetic dataset as an image directory, or
    /// check that a directory dataset loads.
    PrepareData {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Target directory for synthetic images.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train and evaluate every fold (or only the given folds).
    Train {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Run only this fold; repeatable. Combine results with `report`.
        #[arg(long)]
        fold: Vec<usize>,
        /// Delete an existing run directory first.
        #[arg(long)]
        fresh: bool,
    },
    /// Evaluate two checkpoints on the test identities of the configured dataset.
    Evaluate {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Network applied to RGB images.
        #[arg(long)]
        rgb_checkpoint: PathBuf,
        /// Network applied to depth images; defaults to the RGB network.
        #[arg(long)]
        depth_checkpoint: Option<PathBuf>,
        /// Also write the results as JSON.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// One run per value of an axis.
    Sweep {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// EMBEDDING_SIZE or FREEZE_STAGE.
        #[arg(long)]
        axis: String,
        /// Comma-separated values.
        #[arg(long, value_delimiter = ',', required = true)]
        values: Vec<String>,
    },
    /// Distillation with no-copy, copy-only and copy+freeze initialisation.
    Ablate {
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Render CMC and sweep plots for every result file below a directory.
    Plot {
        #[arg(long)]
        dir: Option<PathBuf>,
    },
    /// Aggregate persisted fold results and print the table.
    Report {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long, value_enum, default_value = "markdown")]
        format: Format,
    },
}

fn apply_environment() -> Result<()> {
    match std::env::var(DEVICE_ENV).ok().as_deref() {
        None | Some("") | Some("cpu") | Some("CPU") => {}
        Some(other) => bail!("{DEVICE_ENV}={other}: only `cpu` is supported by this build"),
    }
    match std::env::var(DETERMINISM_ENV).ok().as_deref() {
        None | Some("") | Some("strict") => {
            // one compute thread makes floating-point reductions independent of the core count
            std::env::set_var("RAYON_NUM_THREADS", "1");
        }
        Some("relaxed") => {}
        Some(other) => bail!("{DETERMINISM_ENV}={other}: expected `strict` or `relaxed`"),
    }
    Ok(())
}

fn load_config(args: &ConfigArgs) -> Result<ExperimentConfig> {
    let mut cfg = ExperimentConfig::load(&args.config, &args.overrides)?;
    let explicit = args.overrides.iter().any(|o| o.trim_start().starts_with("output_dir"));
    if let (Some(root), false) = (std::env::var_os(OUTPUT_ROOT_ENV), explicit) {
        cfg.output_dir = PathBuf::from(root);
    }
    Ok(cfg)
}

fn print_table(rows: &[LabeledResult], format: TableFormat) {
    print!("{}", emit_results_table(rows, format));
}

fn adapter_for(model: &ModelState) -> Result<InputAdapter> {
    Ok(match model.in_channels() {
        3 => InputAdapter::Identity,
        4 => InputAdapter::ZeroPad(ZeroPadMode::FourChannel),
        2 => InputAdapter::ZeroPad(ZeroPadMode::Gray),
        c => bail!("checkpoint expects {c} input channels; no input adapter matches"),
    })
}

fn summary(index: &DatasetIndex) -> String {
    format!(
        "{} samples ({} RGB, {} depth), {} identities, {} pairs",
        index.len(),
        index.count_modality(Modality::Rgb),
        index.count_modality(Modality::Depth),
        index.identities().len(),
        index.pairs().len()
    )
}

fn prepare(cfg: &ExperimentConfig, out: Option<&Path>) -> Result<()> {
    let index = load_index(cfg)?;
    match cfg.dataset.source {
        DatasetSource::Synthetic => {
            let out = out.context("--out is required for synthetic data")?;
            write_synthetic_dir(&index, out)?;
            cfg.dataset.split()?.write_dir(&out.join("splits"))?;
            println!("wrote {} to {}", summary(&index), out.display());
        }
        DatasetSource::Directory => println!("{}", summary(&index)),
    }
    Ok(())
}

fn evaluate(cfg: &ExperimentConfig, rgb_ckpt: &Path, depth_ckpt: Option<&Path>, out: Option<&Path>) -> Result<()> {
    let (rgb_model, _) = load_checkpoint(rgb_ckpt)?;
    let depth_model = match depth_ckpt {
        Some(p) => load_checkpoint(p)?.0,
        None => rgb_model.clone(),
    };
    let data = prepare_data(cfg)?;
    let rgb = embed_set(&rgb_model, &data.test.of_modality(Modality::Rgb), adapter_for(&rgb_model)?)?;
    let depth = embed_set(&depth_model, &data.test.of_modality(Modality::Depth), adapter_for(&depth_model)?)?;
    let rows: Vec<LabeledResult> = evaluate_cross_modal(&rgb, &depth, &cfg.protocol)?
        .into_iter()
        .map(|result| LabeledResult {
            label: cfg.experiment_id.clone(),
            result,
        })
        .collect();
    print_table(&rows, TableFormat::Markdown);
    if let Some(out) = out {
        fs::write(out, serde_json::to_string_pretty(&rows)? + "\n").with_context(|| format!("writing {}", out.display()))?;
    }
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    apply_environment()?;
    match cli.command {
        Command::PrepareData { cfg, out } => prepare(&load_config(&cfg)?, out.as_deref()),
        Command::Train { cfg, fold, fresh } => {
            let cfg = load_config(&cfg)?;
            let dir = cfg.run_dir();
            if fresh && dir.exists() {
                fs::remove_dir_all(&dir).with_context(|| format!("removing {}", dir.display()))?;
            }
            if fold.is_empty() {
                let rep = run_experiment(&cfg)?;
                print_table(&rep.metrics.results, TableFormat::Markdown);
                info!("results in {}", rep.dir.display());
            } else {
                run_folds(&cfg, &fold)?;
                println!("folds {fold:?} done; run `report` once every fold has finished");
            }
            Ok(())
        }
        Command::Evaluate {
            cfg,
            rgb_checkpoint,
            depth_checkpoint,
            out,
        } => evaluate(&load_config(&cfg)?, &rgb_checkpoint, depth_checkpoint.as_deref(), out.as_deref()),
        Command::Sweep { cfg, axis, values } => {
            let axis: SweepAxis = axis.parse()?;
            let rep = run_sweep(&load_config(&cfg)?, axis, &values)?;
            for row in &rep.rows {
                match &row.error {
                    None => print_table(&row.results, TableFormat::Markdown),
                    Some(e) => println!("{} = {}: failed: {e}", rep.axis, row.value),
                }
            }
            Ok(())
        }
        Command::Ablate { cfg } => {
            let rep = run_ablation(&load_config(&cfg)?)?;
            let rows: Vec<LabeledResult> = rep.rows.iter().flat_map(|r| r.results.clone()).collect();
            print_table(&rows, TableFormat::Markdown);
            for row in rep.rows.iter().filter(|r| r.error.is_some()) {
                println!("{}: failed: {}", row.value, row.error.as_deref().unwrap_or_default());
            }
            Ok(())
        }
        Command::Plot { dir } => {
            let dir = dir
                .or_else(|| std::env::var_os(OUTPUT_ROOT_ENV).map(PathBuf::from))
                .unwrap_or_else(|| PathBuf::from("runs"));
            for p in emit_plots(&dir)? {
                println!("{}", p.display());
            }
            Ok(())
        }
        Command::Report { cfg, format } => {
            let rep = aggregate(&load_config(&cfg)?)?;
            print_table(&rep.metrics.results, format.into());
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
