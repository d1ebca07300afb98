//! Per-episode evaluation records and their CSV form.

use std::io::{Read, Write};
use std::path::Path;

use refplan::{PlannerConfig, PlannerKind};
use serde::{Deserialize, Serialize};

use crate::error::Result;

/// One evaluated episode for one planner configuration and seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub experiment_id: String,
    pub mode: String,
    pub planner: PlannerKind,
    pub seed: u64,
    pub episode: usize,
    pub horizon: usize,
    pub n_candidates: usize,
    pub n_latents: usize,
    pub kappa: f64,
    pub noise_sigma: f64,
    pub penalty: f64,
    /// Training-set size in transitions (dataset-size mode only).
    pub dataset_size: Option<usize>,
    pub train_seed: u64,
    pub episode_return: f64,
    pub normalized_score: f64,
    pub ms_per_step: f64,
}

impl MetricsRecord {
    /// The swept hyperparameters as a planner configuration.
    pub fn planner_config(&self, gamma: f64, latent_scale: f64) -> PlannerConfig {
        PlannerConfig {
            horizon: self.horizon,
            n_candidates: self.n_candidates,
            n_latents: self.n_latents,
            kappa: self.kappa,
            noise_sigma: self.noise_sigma,
            penalty: self.penalty,
            gamma,
            latent_scale,
        }
    }
}

pub fn write_records<W: Write>(out: W, records: &[MetricsRecord]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for r in records {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_records<R: Read>(input: R) -> Result<Vec<MetricsRecord>> {
    let mut r = csv::Reader::from_reader(input);
    let mut out = Vec::new();
    for row in r.deserialize() {
        out.push(row?);
    }
    Ok(out)
}

pub fn save_records(path: &Path, records: &[MetricsRecord]) -> Result<()> {
    write_records(std::fs::File::create(path)?, records)
}

pub fn load_records(path: &Path) -> Result<Vec<MetricsRecord>> {
    read_records(std::fs::File::open(path)?)
}
