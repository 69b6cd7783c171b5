use std::path::{Path, PathBuf};
use std::process::ExitCode;

use adra_cli::bundle::Container;
use adra_cli::config::{Experiment, ExperimentConfig, TrainSection};
use adra_cli::experiments::{report_params, run, run_pretrain};
use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};

#[derive(Parser)]
#[command(
    name = "adra",
    version,
    about = "Anomaly detection with residual adapters on a frozen backbone"
)]
struct Cli {
    /// Experiment config (TOML); defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed_base: Option<u64>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Default training schedule: desk or paper.
    #[arg(long, global = true)]
    profile: Option<String>,
    #[command(flatten)]
    train: TrainFlags,
    #[command(subcommand)]
    command: Command,
}

/// Overrides for the training settings of the config.
#[derive(Args)]
struct TrainFlags {
    #[arg(long, global = true)]
    lr: Option<f32>,
    #[arg(long, global = true)]
    momentum: Option<f32>,
    #[arg(long, global = true)]
    weight_decay: Option<f32>,
    #[arg(long, global = true)]
    epochs: Option<usize>,
    /// Comma-separated epochs at which the learning rate drops by 10x.
    #[arg(long, global = true, value_delimiter = ',')]
    milestones: Option<Vec<usize>>,
    #[arg(long, global = true)]
    batch_size: Option<usize>,
    #[arg(long, global = true)]
    seeds: Option<usize>,
    /// Adapter experts per block (K).
    #[arg(long, global = true)]
    experts: Option<usize>,
    #[arg(long, global = true)]
    l2sp_strength: Option<f32>,
}

#[derive(Subcommand)]
enum Command {
    /// Pretrain the backbone and write the snapshot.
    Pretrain,
    /// Run the configured experiment.
    Run,
    /// Parameter counts for 1..10 tasks.
    ReportParams,
    /// Print the header and entries of a bundle or snapshot.
    InspectBundle { path: PathBuf },
}

fn load_config(cli: &Cli) -> Result<ExperimentConfig> {
    let mut cfg = match &cli.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    if let Some(s) = cli.seed_base {
        cfg.seed_base = s;
    }
    if let Some(o) = &cli.out {
        cfg.output_dir = o.clone();
    }
    if let Some(p) = &cli.profile {
        cfg.profile = p.clone();
    }
    let t = &cli.train;
    cfg.train.merge(&TrainSection {
        lr: t.lr,
        momentum: t.momentum,
        weight_decay: t.weight_decay,
        epochs: t.epochs,
        milestones: t.milestones.clone(),
        batch_size: t.batch_size,
        seeds: t.seeds,
        experts: t.experts,
        l2sp_strength: t.l2sp_strength,
    });
    if t.seeds.is_some() {
        cfg.seeds = t.seeds;
    }
    Ok(cfg)
}

fn inspect(path: &Path) -> Result<()> {
    let c = Container::load(path).with_context(|| format!("reading {}", path.display()))?;
    println!("version {}", c.version);
    println!("backbone hash {}", hex::encode(c.hash));
    println!("entries {}", c.entries.len());
    for (id, t) in &c.entries {
        println!("  {id} {:?}", t.shape());
    }
    println!("parameters {}", c.scalar_count());
    Ok(())
}

fn main() -> Result<ExitCode> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    if let Command::InspectBundle { path } = &cli.command {
        inspect(path)?;
        return Ok(ExitCode::SUCCESS);
    }
    let mut cfg = load_config(&cli)?;
    match cli.command {
        Command::Pretrain => {
            cfg.experiment = Experiment::Pretrain;
            let out = run_pretrain(&cfg)?;
            println!(
                "backbone {} accuracy {:.4}",
                hex::encode(out.pretrained.hash),
                out.accuracy
            );
        }
        Command::Run => {
            if cfg.experiment == Experiment::Pretrain {
                let out = run_pretrain(&cfg)?;
                println!(
                    "backbone {} accuracy {:.4}",
                    hex::encode(out.pretrained.hash),
                    out.accuracy
                );
                return Ok(ExitCode::SUCCESS);
            }
            let out = run(&cfg)?;
            println!(
                "{} rows, {} failed cells, reports in {}",
                out.rows.len(),
                out.failures.len(),
                cfg.output_dir.display()
            );
            if !out.failures.is_empty() {
                for f in &out.failures {
                    eprintln!(
                        "failed: {} {} seed {}: {}",
                        f.task, f.method, f.seed, f.error
                    );
                }
                return Ok(ExitCode::FAILURE);
            }
        }
        Command::ReportParams => {
            let (csv, svg) = report_params(&cfg)?;
            std::fs::create_dir_all(&cfg.output_dir)?;
            std::fs::write(cfg.output_dir.join("params.csv"), &csv)?;
            std::fs::write(cfg.output_dir.join("params.svg"), svg)?;
            print!("{csv}");
        }
        Command::InspectBundle { .. } => unreachable!("handled above"),
    }
    Ok(ExitCode::SUCCESS)
}
