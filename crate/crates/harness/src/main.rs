//! Command-line entry point for dataset generation, training, evaluation,
//! sweeps and the variance study.

use std::path::{Path, PathBuf};

use anyhow::Context;
use clap::{Args, Parser, Subcommand};
use refplan_harness::config::ExperimentConfig;
use refplan_harness::metrics::save_records;
use refplan_harness::pipeline::{build_dataset, layout, run_pipeline};
use refplan_harness::{cmd_eval, cmd_sweep, cmd_variance_study, rundir};

#[derive(Parser)]
#[command(name = "refplan", version, about = "Offline Bayesian model-based planning experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the offline dataset.
    GenData(Common),
    /// Run the five-stage training pipeline and write checkpoints.
    Train(Common),
    /// Evaluate planners and write metrics.csv.
    Eval(Common),
    /// Grid search over planner hyperparameters.
    Sweep(Common),
    /// Spread of the planner output against the number of latent draws.
    VarianceStudy(Common),
    /// Print the resolved config (defaults when no file is given).
    ShowConfig(Show),
}

#[derive(Args)]
struct Show {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Args)]
struct Common {
    /// Experiment config (TOML).
    #[arg(long)]
    config: PathBuf,
    /// Override a config key, e.g. `--set eval.seeds=[0,1,2]`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

impl Common {
    fn load(&self) -> anyhow::Result<ExperimentConfig> {
        ExperimentConfig::load(&self.config, &self.overrides)
            .with_context(|| format!("loading {}", self.config.display()))
    }
}

fn output_dir(config: &ExperimentConfig) -> anyhow::Result<PathBuf> {
    let dir = rundir::allocate(&config.output_dir, &config.id)?;
    std::fs::write(dir.join("config.toml"), config.to_toml_string()?)?;
    Ok(dir)
}

fn write_csv<T: serde::Serialize>(path: &Path, rows: &[T]) -> anyhow::Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::ShowConfig(s) => {
            let config = match &s.config {
                Some(path) => ExperimentConfig::load(path, &s.overrides)?,
                None => ExperimentConfig::from_toml_str("", &s.overrides)?,
            };
            print!("{}", config.to_toml_string()?);
        }
        Command::GenData(c) => {
            let config = c.load()?;
            let data = build_dataset(&config)?;
            let dir = output_dir(&config)?;
            data.save(&dir.join(layout::DATASET))?;
            println!("{} transitions -> {}", data.len(), dir.join(layout::DATASET).display());
        }
        Command::Train(c) => {
            let config = c.load()?;
            let dir = rundir::allocate(&config.output_dir, &config.id)?;
            let run = run_pipeline(&config, &dir)?;
            for s in &run.manifest.stages {
                println!("{:<22} {}", s.stage, s.sha256);
            }
            println!("checkpoints -> {}", dir.display());
        }
        Command::Eval(c) => {
            let config = c.load()?;
            let records = cmd_eval(&config)?;
            let dir = output_dir(&config)?;
            save_records(&dir.join("metrics.csv"), &records)?;
            println!("{} records -> {}", records.len(), dir.join("metrics.csv").display());
        }
        Command::Sweep(c) => {
            let config = c.load()?;
            let outcome = cmd_sweep(&config)?;
            let dir = output_dir(&config)?;
            save_records(&dir.join("metrics.csv"), &outcome.records)?;
            std::fs::write(dir.join("sweep.json"), serde_json::to_vec_pretty(&outcome.winners)?)?;
            for w in &outcome.winners {
                println!("{:<10} score {:8.2}  {:?}", w.planner, w.mean_normalized_score, w.config);
            }
        }
        Command::VarianceStudy(c) => {
            let config = c.load()?;
            let study = cmd_variance_study(&config)?;
            let dir = output_dir(&config)?;
            write_csv(&dir.join("variance.csv"), &study.rows)?;
            write_csv(&dir.join("variance_seeds.csv"), &study.samples)?;
            for r in &study.rows {
                println!(
                    "n_bar {:>3}  variance {:.3e}  return {:8.3}  {:.1} ms/call",
                    r.n_bar, r.mean_variance, r.mean_return, r.ms_per_call
                );
            }
        }
    }
    Ok(())
}

fn main() {
    if let Err(e) = run(Cli::parse()) {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}
