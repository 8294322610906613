use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use gradgate::experiment::{self, ExperimentConfig};
use gradgate::{seed, Classifier, Dataset, FeatureMode};
use log::error;

#[derive(Parser)]
#[command(name = "gradgate", version, about = "Gradient-feature anomaly detection pipeline")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// TOML experiment config; built-in defaults when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory (overrides `out_dir`).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Master seed (overrides `seed`).
    #[arg(long, global = true)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Train the classifier and write a checkpoint.
    TrainClassifier,
    /// Write the clean test set plus adversarial and OOD sets.
    GenAnomalies {
        /// Classifier to attack; trained from the config when omitted.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Write a feature CSV for one dataset file.
    ExtractFeatures {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        dataset: PathBuf,
        /// Defaults to the config's `features.mode`.
        #[arg(long)]
        mode: Option<FeatureMode>,
    },
    /// Train a detector on two feature CSVs and score the held-out split.
    Detect {
        #[arg(long)]
        normal: PathBuf,
        #[arg(long)]
        anomalous: PathBuf,
    },
    /// Run every stage and write the full report.
    RunExperiment,
    /// Per-layer gradient and activation norm quartiles per dataset.
    CompareNorms {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Dataset file; repeat for several.
        #[arg(long = "dataset", required = true)]
        datasets: Vec<PathBuf>,
    },
}

fn load_config(common: &Common) -> Result<ExperimentConfig> {
    let mut cfg = match &common.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    if let Some(out) = &common.out {
        cfg.out_dir = out.clone();
    }
    if let Some(s) = common.seed {
        cfg.seed = s;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn file_digest(path: &Path) -> Result<String> {
    let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(seed::short_digest(&bytes))
}

/// The classifier and the digest that keys downstream artifacts.
fn model_for(cfg: &ExperimentConfig, checkpoint: Option<&Path>) -> Result<(Classifier, String)> {
    match checkpoint {
        Some(p) => {
            let model = Classifier::load(p).with_context(|| format!("loading checkpoint {}", p.display()))?;
            Ok((model, file_digest(p)?))
        }
        None => Ok((experiment::train_stage(cfg)?.model, cfg.model_digest())),
    }
}

fn run(cli: Cli) -> Result<()> {
    let cfg = load_config(&cli.common)?;
    match cli.command {
        Command::TrainClassifier => {
            let out = experiment::train_stage(&cfg)?;
            if let Some(last) = out.history.last() {
                println!("val_accuracy={:?}", last.val_accuracy);
            }
            println!("{}", out.checkpoint.display());
        }
        Command::GenAnomalies { checkpoint } => {
            let (model, digest) = model_for(&cfg, checkpoint.as_deref())?;
            for src in experiment::anomaly_stage(&cfg, &model, &digest)? {
                println!("{}\t{}", src.name, src.path.display());
            }
        }
        Command::ExtractFeatures { checkpoint, dataset, mode } => {
            let (model, digest) = model_for(&cfg, checkpoint.as_deref())?;
            let name = dataset
                .file_stem()
                .and_then(|s| s.to_str())
                .context("dataset path has no file name")?
                .to_string();
            let (path, _) = experiment::feature_stage(
                &cfg,
                &model,
                &digest,
                &name,
                &dataset,
                &file_digest(&dataset)?,
                mode.unwrap_or(cfg.features.mode),
            )?;
            println!("{}", path.display());
        }
        Command::Detect { normal, anomalous } => {
            let (path, report) = experiment::detect_files(&cfg, &normal, &anomalous)?;
            print!("{}", report.to_table());
            println!("{}", path.display());
        }
        Command::RunExperiment => {
            let out = experiment::run_experiment(&cfg)?;
            print!("{}", out.to_table());
            println!("{}", out.kv_path.display());
            println!("{}", out.table_path.display());
        }
        Command::CompareNorms { checkpoint, datasets } => {
            let (model, _) = model_for(&cfg, checkpoint.as_deref())?;
            let sets = datasets
                .iter()
                .map(|p| Dataset::load(p).with_context(|| format!("loading {}", p.display())))
                .collect::<Result<Vec<_>>>()?;
            if sets.iter().any(Dataset::is_empty) {
                bail!("compare-norms: empty dataset");
            }
            print!("{}", experiment::compare_norms(&cfg, &model, &sets)?.to_table());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            error!("{e:#}");
            ExitCode::FAILURE
        }
    }
}
