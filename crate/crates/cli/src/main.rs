use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use dafc::data::{self, DatasetSpec};
use dafc::harness::{self, SweepGrid, TrainConfig};

#[derive(Parser)]
#[command(name = "dafc", version, about = "Deep adaptive fuzzy clustering")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Pretrain, then run the alternating fuzzy/network optimization.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Dataset root (overrides DAFC_DATA_DIR).
        #[arg(long)]
        data_dir: Option<PathBuf>,
        /// Extra `key=value` overrides applied after the config file.
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
    },
    /// Score a checkpoint against a labeled dataset.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        dataset: String,
        #[arg(long)]
        data_dir: Option<PathBuf>,
    },
    /// Train once per point of a lambda1/lambda2/eps_r/m grid.
    Sweep {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        grid: PathBuf,
        /// CSV path; defaults to `sweep.csv` in the config's out_dir or the working directory.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        data_dir: Option<PathBuf>,
    },
    /// Write bottleneck codes and head probabilities to CSV.
    Export {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Defaults to the dataset recorded in `config.txt` beside the checkpoint.
        #[arg(long)]
        dataset: Option<String>,
        #[arg(long)]
        data_dir: Option<PathBuf>,
    },
}

fn load_config(path: &Path, data_dir: Option<PathBuf>) -> Result<TrainConfig> {
    let mut cfg = TrainConfig::load(path).with_context(|| format!("reading config {}", path.display()))?;
    if data_dir.is_some() {
        cfg.data_dir = data_dir;
    }
    Ok(cfg)
}

fn load_dataset(spec: &str, data_dir: Option<&Path>) -> Result<data::Dataset> {
    let spec: DatasetSpec = spec.parse()?;
    Ok(data::load(&spec, &data::data_dir(data_dir))?)
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match Cli::parse().command {
        Command::Train {
            config,
            seed,
            out,
            data_dir,
            overrides,
        } => {
            let mut cfg = load_config(&config, data_dir)?;
            for kv in &overrides {
                let Some((k, v)) = kv.split_once('=') else {
                    bail!("override '{kv}' is not KEY=VALUE");
                };
                cfg.set(k, v)?;
            }
            if let Some(s) = seed {
                cfg.seed = s;
            }
            if out.is_some() {
                cfg.out_dir = out;
            }
            cfg.validate()?;
            let report = harness::train(&cfg)?;
            match report.best {
                Some(b) => println!(
                    "best epoch {}: acc {:.4} ari {:.4} nmi {:.4} test_error {:.4}",
                    report.best_epoch.unwrap_or(0),
                    b.acc,
                    b.ari,
                    b.nmi,
                    b.test_error
                ),
                None => println!("trained {} epochs (no labels to score)", cfg.max_epochs),
            }
        }
        Command::Eval {
            checkpoint,
            dataset,
            data_dir,
        } => {
            let ds = load_dataset(&dataset, data_dir.as_deref())?;
            let e = harness::evaluate(&checkpoint, &ds)?;
            println!("{}", format_eval(&e));
        }
        Command::Sweep {
            config,
            grid,
            out,
            data_dir,
        } => {
            let cfg = load_config(&config, data_dir)?;
            let grid = SweepGrid::from_flat(&fs::read_to_string(&grid)?)?;
            let cells = harness::sweep(&cfg, &grid)?;
            let path = out.unwrap_or_else(|| cfg.out_dir.clone().unwrap_or_default().join("sweep.csv"));
            if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
                fs::create_dir_all(dir)?;
            }
            fs::write(&path, harness::sweep_csv(&cells))?;
            let failed = cells.iter().filter(|c| c.outcome.is_err()).count();
            println!("{} cells, {failed} failed, written to {}", cells.len(), path.display());
        }
        Command::Export {
            checkpoint,
            out,
            dataset,
            data_dir,
        } => {
            let spec = match dataset {
                Some(s) => s,
                None => {
                    let saved = checkpoint.with_file_name("config.txt");
                    let cfg = TrainConfig::load(&saved)
                        .with_context(|| format!("no --dataset given and cannot read {}", saved.display()))?;
                    cfg.dataset.to_string()
                }
            };
            let ds = load_dataset(&spec, data_dir.as_deref())?;
            harness::export_embeddings(&checkpoint, &ds, &out)?;
            println!("wrote {} rows to {}", ds.len(), out.display());
        }
    }
    Ok(())
}

fn format_eval(e: &harness::Evaluation) -> String {
    format!(
        "acc {:.6} ari {:.6} nmi {:.6} test_error {:.6}",
        e.acc, e.ari, e.nmi, e.test_error
    )
}
