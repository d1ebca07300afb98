//! The five-stage training pipeline and its content-hashed manifest.

use std::path::{Path, PathBuf};

use rand::SeedableRng;
use refplan::{
    freeze_then_finetune, generate_task_dataset, subsample, train_bc, train_vae, train_value_mc, Agent, Dataset,
    Encoder, EnsembleModel, PriorPolicy, SimRng, ValueFn,
};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::ExperimentConfig;
use crate::error::{HarnessError, Result, StageExt};

/// Stage names in execution order.
pub const STAGES: [&str; 5] = [
    "generate_dataset",
    "train_bc",
    "train_value_mc",
    "train_vae",
    "freeze_then_finetune",
];

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageRecord {
    pub stage: String,
    /// Artifact paths relative to the run directory.
    pub artifacts: Vec<String>,
    /// SHA-256 over the artifact names and bytes, in the listed order.
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Manifest {
    pub experiment_id: String,
    pub config_sha256: String,
    pub stages: Vec<StageRecord>,
}

impl Manifest {
    pub const FILE: &'static str = "manifest.json";

    pub fn load(run_dir: &Path) -> Result<Self> {
        let path = run_dir.join(Self::FILE);
        let bytes = std::fs::read(&path).map_err(|_| HarnessError::Missing {
            what: "manifest",
            path: path.clone(),
        })?;
        Ok(serde_json::from_slice(&bytes)?)
    }

    pub fn save(&self, run_dir: &Path) -> Result<()> {
        std::fs::write(run_dir.join(Self::FILE), serde_json::to_vec_pretty(self)?)?;
        Ok(())
    }
}

/// Relative locations of the pipeline artifacts inside a run directory.
pub mod layout {
    pub const DATASET: &str = "dataset.bin";
    pub const POLICY: &str = "checkpoints/policy";
    pub const VALUE: &str = "checkpoints/value";
    pub const ENCODER: &str = "checkpoints/encoder";
    pub const VAE_DECODER: &str = "checkpoints/decoder_vae";
    pub const DECODER: &str = "checkpoints/decoder";
}

/// Generates (or loads) the offline dataset and applies `dataset.subsample`.
pub fn build_dataset(config: &ExperimentConfig) -> Result<Dataset> {
    let spec = &config.dataset;
    let full = match &spec.path {
        Some(path) => {
            if !path.exists() {
                return Err(HarnessError::Missing {
                    what: "dataset",
                    path: path.clone(),
                });
            }
            Dataset::load(path).stage(STAGES[0])?
        }
        None => {
            let family = config.env.family();
            let behaviors = spec.behaviors();
            let k = behaviors.len();
            let mut parts = Vec::with_capacity(k);
            for (i, b) in behaviors.iter().enumerate() {
                let n = spec.episodes / k + usize::from(i < spec.episodes % k);
                if n > 0 {
                    parts.push(generate_task_dataset(&family, b.as_ref(), n, spec.seed + i as u64).stage(STAGES[0])?);
                }
            }
            interleave(parts)?
        }
    };
    Ok(match spec.subsample {
        Some(n) => subsample(&full, n, spec.seed),
        None => full,
    })
}

/// Merges per-behavior datasets, alternating their trajectories.
fn interleave(mut parts: Vec<Dataset>) -> Result<Dataset> {
    if parts.len() == 1 {
        return Ok(parts.pop().expect("one part"));
    }
    let mut meta = parts[0].meta.clone();
    meta.behavior_id = parts.iter().map(|p| p.meta.behavior_id.as_str()).collect::<Vec<_>>().join("+");
    let longest = parts.iter().map(|p| p.trajectories.len()).max().unwrap_or(0);
    let mut trajs = Vec::new();
    for i in 0..longest {
        for p in &parts {
            if let Some(t) = p.trajectories.get(i) {
                trajs.push(t.clone());
            }
        }
    }
    Dataset::new(trajs, meta).stage(STAGES[0])
}

/// Runs the four training stages in memory.
pub fn train_agent(config: &ExperimentConfig, data: &Dataset) -> Result<Agent> {
    train_agent_with(config, data, |_, _| Ok(()))
}

/// Training stages with a hook called after each stage with the stage
/// index and the agent parts finished so far.
fn train_agent_with(
    config: &ExperimentConfig,
    data: &Dataset,
    mut after: impl FnMut(usize, &Parts) -> Result<()>,
) -> Result<Agent> {
    let t = &config.train;
    let mut parts = Parts::default();
    let (policy, _) = train_bc(data, &t.bc).stage(STAGES[1])?;
    parts.policy = Some(policy);
    after(1, &parts)?;
    let (value, _) = train_value_mc(data, t.value_gamma, &t.value).stage(STAGES[2])?;
    parts.value = Some(value);
    after(2, &parts)?;

    let mut rng = SimRng::seed_from_u64(t.seed);
    let (s, a) = (data.state_dim(), data.action_dim());
    let mut encoder = Encoder::new(s, a, t.encoder.clone(), &mut rng);
    let mut model =
        EnsembleModel::new(s, a, t.encoder.latent_dim, t.ensemble.clone(), &mut rng).stage(STAGES[3])?;
    train_vae(&mut encoder, &mut model, data, &t.vae).stage(STAGES[3])?;
    parts.encoder = Some(encoder);
    parts.model = Some(model);
    after(3, &parts)?;

    let encoder = parts.encoder.take().expect("set above");
    let mut model = parts.model.take().expect("set above");
    freeze_then_finetune(&encoder, &mut model, data, &t.finetune).stage(STAGES[4])?;
    parts.encoder = Some(encoder);
    parts.model = Some(model);
    after(4, &parts)?;

    Ok(Agent {
        encoder: parts.encoder.expect("set above"),
        model: parts.model.expect("set above"),
        policy: parts.policy.expect("set above"),
        value: parts.value.expect("set above"),
    })
}

#[derive(Default)]
struct Parts {
    policy: Option<PriorPolicy>,
    value: Option<ValueFn>,
    encoder: Option<Encoder>,
    model: Option<EnsembleModel>,
}

/// Output of [`run_pipeline`].
#[derive(Debug)]
pub struct PipelineRun {
    pub dir: PathBuf,
    pub manifest: Manifest,
    pub agent: Agent,
    pub dataset: Dataset,
}

/// Runs all five stages, saving each stage's artifacts under `run_dir`
/// and writing `manifest.json` last.
pub fn run_pipeline(config: &ExperimentConfig, run_dir: &Path) -> Result<PipelineRun> {
    config.validate()?;
    std::fs::create_dir_all(run_dir.join("checkpoints"))?;
    let mut stages = Vec::with_capacity(STAGES.len());

    let dataset = build_dataset(config)?;
    dataset.save(&run_dir.join(layout::DATASET)).stage(STAGES[0])?;
    stages.push(record(run_dir, STAGES[0], &[layout::DATASET])?);

    let agent = train_agent_with(config, &dataset, |stage, parts| {
        let save = |r: refplan::Result<()>| r.stage(STAGES[stage]);
        let artifacts: &[&str] = match stage {
            1 => {
                save(parts.policy.as_ref().expect("trained").save(&run_dir.join(layout::POLICY)))?;
                &[layout::POLICY]
            }
            2 => {
                save(parts.value.as_ref().expect("trained").save(&run_dir.join(layout::VALUE)))?;
                &[layout::VALUE]
            }
            3 => {
                save(parts.encoder.as_ref().expect("trained").save(&run_dir.join(layout::ENCODER)))?;
                save(parts.model.as_ref().expect("trained").save(&run_dir.join(layout::VAE_DECODER)))?;
                &[layout::ENCODER, layout::VAE_DECODER]
            }
            _ => {
                save(parts.model.as_ref().expect("trained").save(&run_dir.join(layout::DECODER)))?;
                &[layout::DECODER]
            }
        };
        stages.push(record(run_dir, STAGES[stage], artifacts)?);
        Ok(())
    })?;

    let manifest = Manifest {
        experiment_id: config.id.clone(),
        config_sha256: hex::encode(Sha256::digest(config.to_toml_string()?.as_bytes())),
        stages,
    };
    std::fs::write(run_dir.join("config.toml"), config.to_toml_string()?)?;
    manifest.save(run_dir)?;
    Ok(PipelineRun {
        dir: run_dir.to_path_buf(),
        manifest,
        agent,
        dataset,
    })
}

/// Loads the trained agent from a run directory written by [`run_pipeline`].
pub fn load_agent(run_dir: &Path) -> Result<Agent> {
    if !run_dir.join(Manifest::FILE).exists() {
        return Err(HarnessError::Missing {
            what: "trained checkpoints",
            path: run_dir.to_path_buf(),
        });
    }
    let agent = Agent {
        encoder: Encoder::load(&run_dir.join(layout::ENCODER))?,
        model: EnsembleModel::load(&run_dir.join(layout::DECODER))?,
        policy: PriorPolicy::load(&run_dir.join(layout::POLICY))?,
        value: ValueFn::load(&run_dir.join(layout::VALUE))?,
    };
    if agent.model.latent_dim != agent.encoder.latent_dim() {
        return Err(HarnessError::Mismatch(format!(
            "decoder expects latent dimension {}, encoder produces {}",
            agent.model.latent_dim,
            agent.encoder.latent_dim()
        )));
    }
    Ok(agent)
}

/// Files belonging to an artifact: the path itself, or every file that
/// starts with the stem (`stem.json`, `stem.bin`), or a whole directory.
fn artifact_files(run_dir: &Path, artifact: &str) -> Result<Vec<PathBuf>> {
    let path = run_dir.join(artifact);
    let mut files = Vec::new();
    if path.is_dir() {
        collect_files(&path, &mut files)?;
    } else if path.is_file() {
        files.push(path.clone());
    } else {
        let parent = path.parent().unwrap_or(run_dir);
        let stem = path.file_name().and_then(|s| s.to_str()).unwrap_or_default();
        for entry in std::fs::read_dir(parent)? {
            let p = entry?.path();
            let name = p.file_name().and_then(|s| s.to_str()).unwrap_or_default();
            if p.is_file() && name.starts_with(&format!("{stem}.")) {
                files.push(p);
            }
        }
    }
    files.sort();
    if files.is_empty() {
        return Err(HarnessError::Missing { what: "artifact", path });
    }
    Ok(files)
}

fn collect_files(dir: &Path, out: &mut Vec<PathBuf>) -> Result<()> {
    for entry in std::fs::read_dir(dir)? {
        let p = entry?.path();
        if p.is_dir() {
            collect_files(&p, out)?;
        } else {
            out.push(p);
        }
    }
    Ok(())
}

fn record(run_dir: &Path, stage: &str, artifacts: &[&str]) -> Result<StageRecord> {
    let mut hasher = Sha256::new();
    for a in artifacts {
        for f in artifact_files(run_dir, a)? {
            let rel = f.strip_prefix(run_dir).unwrap_or(&f).to_string_lossy().replace('\\', "/");
            hasher.update(rel.as_bytes());
            hasher.update([0u8]);
            hasher.update(std::fs::read(&f)?);
        }
    }
    Ok(StageRecord {
        stage: stage.to_string(),
        artifacts: artifacts.iter().map(|s| s.to_string()).collect(),
        sha256: hex::encode(hasher.finalize()),
    })
}

/// Builds the dataset and trains every component in memory, writing nothing.
pub fn build_dataset_and_train(config: &ExperimentConfig) -> Result<Agent> {
    config.validate()?;
    let data = build_dataset(config)?;
    train_agent(config, &data)
}
