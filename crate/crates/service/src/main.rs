use std::path::PathBuf;

use anyhow::Context;
use clap::{Parser, Subcommand};

use vbiopsy_service::commands;
use vbiopsy_service::grid::GridSpec;
use vbiopsy_service::workspace::Workspace;
use vbiopsy_service::PipelineConfig;

#[derive(Parser)]
#[command(name = "vbiopsy", version, about = "Prostate MRI virtual biopsy pipeline")]
struct Cli {
    /// Pipeline config (JSON). Desk defaults are used when absent.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides `storage_root` from the config.
    #[arg(long, global = true)]
    storage_root: Option<PathBuf>,
    /// Dotted-path override, e.g. `--set models.ensemble.0.epochs=4`. Repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic phantom cohort.
    PhantomGen {
        #[arg(long)]
        n: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Resample cases and fix the data split.
    Preprocess,
    /// Train the gland (and zone) segmenters.
    TrainSeg,
    /// Train the classifier ensemble.
    TrainClf,
    /// Train the counterfactual VAE-GAN.
    #[command(name = "train-vaegan")]
    TrainVaegan,
    /// Generate counterfactuals and heatmaps for one case.
    Counterfactual {
        #[arg(long = "case")]
        case_id: String,
        /// Comma-separated alpha schedule; must contain 0.
        #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
        alphas: Option<Vec<f64>>,
    },
    /// Score predictions against ground truth.
    Evaluate {
        /// Predictions JSON; the trained ensemble is used when absent.
        #[arg(long)]
        predictions: Option<PathBuf>,
        #[arg(long, default_value = "test")]
        split: String,
    },
    /// Summarise a reader study.
    TrialReport {
        #[arg(long)]
        trial: Option<String>,
        /// Sessions as JSON lines; finalized stored sessions are used when absent.
        #[arg(long)]
        sessions: Option<PathBuf>,
    },
    /// Hyperparameter grid over one ensemble member.
    GridSearch {
        #[arg(long)]
        grid: PathBuf,
        #[arg(long, default_value_t = 0)]
        member: usize,
    },
    /// Run the HTTP service.
    Serve {
        #[arg(long)]
        port: Option<u16>,
    },
}

fn load_config(cli: &Cli) -> anyhow::Result<PipelineConfig> {
    let mut cfg = match &cli.config {
        Some(p) => PipelineConfig::load(p)?,
        None => PipelineConfig::desk(PathBuf::from("vbiopsy-store")),
    };
    if let Some(root) = &cli.storage_root {
        cfg.storage_root = root.clone();
    }
    for o in &cli.overrides {
        cfg.set(o)?;
    }
    Ok(cfg)
}

fn main() -> anyhow::Result<()> {
    tracing_subscriber::fmt()
        .with_env_filter(tracing_subscriber::EnvFilter::try_from_default_env().unwrap_or_else(|_| "info".into()))
        .with_writer(std::io::stderr)
        .init();
    let cli = Cli::parse();
    let mut cfg = load_config(&cli)?;
    match &cli.command {
        Command::PhantomGen { n, seed } => {
            if let Some(n) = n {
                cfg.data.cohort.n = *n;
            }
            if let Some(s) = seed {
                cfg.data.cohort.seed = *s;
            }
        }
        Command::Serve { port: Some(p) } => cfg.service.port = *p,
        _ => {}
    }
    cfg.validate()?;
    if let Command::Serve { .. } = cli.command {
        let rt = tokio::runtime::Runtime::new()?;
        return rt.block_on(vbiopsy_service::server::serve(cfg));
    }
    let ws = Workspace::open(cfg)?;
    let rec = match cli.command {
        Command::PhantomGen { .. } => commands::phantom_gen(&ws),
        Command::Preprocess => commands::preprocess(&ws),
        Command::TrainSeg => commands::train_seg(&ws),
        Command::TrainClf => commands::train_clf(&ws),
        Command::TrainVaegan => commands::train_vae(&ws),
        Command::Counterfactual { case_id, alphas } => commands::counterfactual(&ws, &case_id, alphas),
        Command::Evaluate { predictions, split } => commands::evaluate(&ws, predictions.as_deref(), &split),
        Command::TrialReport { trial, sessions } => {
            let id = trial.unwrap_or_else(|| ws.cfg.trial.id.clone());
            commands::trial_report(&ws, &id, sessions.as_deref())
        }
        Command::GridSearch { grid, member } => {
            let spec: GridSpec = serde_json::from_slice(&std::fs::read(&grid).with_context(|| format!("reading {}", grid.display()))?)?;
            commands::grid_search(&ws, &spec, member)
        }
        Command::Serve { .. } => unreachable!("handled above"),
    }?;
    println!("{}", serde_json::to_string_pretty(&rec)?);
    Ok(())
}
