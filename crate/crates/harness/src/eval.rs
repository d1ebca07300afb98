//! Evaluation drivers: standard, out-of-distribution initial states,
//! shifted dynamics and dataset-size sweeps.

use std::time::Instant;

use rand::SeedableRng;
use refplan::env::{rollout_policy, UniformRandomPolicy};
use refplan::{
    mpc_episode, normalized_score, subsample, Agent, PlannerConfig, PlannerKind, PointMassFamily,
    ProportionalController, SimRng, TaskDistribution,
};

use crate::config::{EvalMode, ExperimentConfig};
use crate::error::{HarnessError, Result};
use crate::metrics::MetricsRecord;
use crate::pipeline::{build_dataset, load_agent, train_agent};

const ENV_SEED_SALT: u64 = 0x5eed_e4f1_0000_0001;
const REFERENCE_SEED: u64 = 0x5eed_4ef0_0000_0002;

/// Test-time environment family for an evaluation mode.
pub fn eval_family(config: &ExperimentConfig, mode: EvalMode) -> PointMassFamily {
    let base = config.env.family();
    match mode {
        EvalMode::Standard | EvalMode::DatasetSize => base,
        EvalMode::Ood => base.widened(config.eval.ood_factor),
        EvalMode::Shift => base.shifted(),
    }
}

/// Seed of episode `episode` under evaluation seed `seed`.
pub fn episode_seed(seed: u64, episode: usize) -> u64 {
    seed.wrapping_mul(1_000_003).wrapping_add(episode as u64)
}

/// The environment instance evaluated under an episode seed. Every planner
/// kind sees the same instance and initial state for the same seed.
pub fn env_for_episode(family: &PointMassFamily, episode_seed: u64) -> refplan::PointMass2D {
    family.sample(&mut SimRng::seed_from_u64(episode_seed ^ ENV_SEED_SALT))
}

/// Mean returns of the uniform-random and expert controllers, the anchors
/// of the normalized score.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct References {
    pub random: f64,
    pub expert: f64,
}

impl References {
    pub fn score(&self, ret: f64) -> Result<f64> {
        Ok(normalized_score(ret, self.random, self.expert)?)
    }
}

pub fn reference_returns(family: &PointMassFamily, episodes: usize) -> Result<References> {
    if episodes == 0 {
        return Err(HarnessError::Config("eval.reference_episodes must be ≥ 1".into()));
    }
    let mut task_rng = SimRng::seed_from_u64(REFERENCE_SEED);
    let mut rng = SimRng::seed_from_u64(REFERENCE_SEED + 1);
    let random_policy = UniformRandomPolicy { action_dim: 2 };
    let (mut random, mut expert) = (0.0, 0.0);
    for _ in 0..episodes {
        let env = family.sample(&mut task_rng);
        random += rollout_policy(&env, &random_policy, &mut rng);
        expert += rollout_policy(&env, &ProportionalController::expert(&env.params), &mut rng);
    }
    let n = episodes as f64;
    Ok(References {
        random: random / n,
        expert: expert / n,
    })
}

/// What is being evaluated, for labelling records.
#[derive(Debug, Clone)]
pub struct EvalSetting {
    pub id: String,
    pub mode: EvalMode,
    pub family: PointMassFamily,
    pub references: References,
    pub dataset_size: Option<usize>,
    pub train_seed: u64,
}

impl EvalSetting {
    pub fn new(config: &ExperimentConfig, mode: EvalMode) -> Result<Self> {
        let family = eval_family(config, mode);
        Ok(Self {
            id: config.id.clone(),
            mode,
            references: reference_returns(&family, config.eval.reference_episodes)?,
            family,
            dataset_size: None,
            train_seed: config.train.seed,
        })
    }
}

/// Applies `f` to every item on up to `workers` threads, keeping the input order.
pub fn parallel_map<T: Sync, R: Send>(
    items: &[T],
    workers: usize,
    f: impl Fn(&T) -> Result<R> + Sync,
) -> Result<Vec<R>> {
    let workers = workers.clamp(1, items.len().max(1));
    if workers == 1 {
        return items.iter().map(&f).collect();
    }
    let chunk = items.len().div_ceil(workers);
    std::thread::scope(|scope| {
        let handles: Vec<_> = items
            .chunks(chunk)
            .map(|c| scope.spawn(|| c.iter().map(&f).collect::<Result<Vec<R>>>()))
            .collect();
        let mut out = Vec::with_capacity(items.len());
        for h in handles {
            out.extend(h.join().expect("evaluation worker panicked")?);
        }
        Ok(out)
    })
}

/// One record per (planner kind, grid point, seed, episode), in that nesting order.
pub fn evaluate_agent(
    agent: &Agent,
    setting: &EvalSetting,
    kinds: &[PlannerKind],
    points: &[PlannerConfig],
    seeds: &[u64],
    episodes: usize,
    workers: usize,
) -> Result<Vec<MetricsRecord>> {
    let mut jobs = Vec::with_capacity(kinds.len() * points.len() * seeds.len() * episodes);
    for &kind in kinds {
        for point in points {
            for &seed in seeds {
                for episode in 0..episodes {
                    jobs.push((kind, point, seed, episode));
                }
            }
        }
    }
    parallel_map(&jobs, workers, |&(kind, point, seed, episode)| {
        let es = episode_seed(seed, episode);
        let env = env_for_episode(&setting.family, es);
        let start = Instant::now();
        let log = mpc_episode(&env, kind, agent, point, es)?;
        let elapsed_ms = start.elapsed().as_secs_f64() * 1e3;
        Ok(MetricsRecord {
            experiment_id: setting.id.clone(),
            mode: setting.mode.name().to_string(),
            planner: kind,
            seed,
            episode,
            horizon: point.horizon,
            n_candidates: point.n_candidates,
            n_latents: point.n_latents,
            kappa: point.kappa,
            noise_sigma: point.noise_sigma,
            penalty: point.penalty,
            dataset_size: setting.dataset_size,
            train_seed: setting.train_seed,
            episode_return: log.ret,
            normalized_score: setting.references.score(log.ret)?,
            ms_per_step: elapsed_ms / log.steps.len().max(1) as f64,
        })
    })
}

/// Checks that trained components fit the configured architecture and environment.
pub fn check_agent(config: &ExperimentConfig, agent: &Agent) -> Result<()> {
    let family = config.env.family();
    let (s, a) = (family.state_dim(), family.action_dim());
    if agent.encoder.config != config.train.encoder {
        return Err(HarnessError::Mismatch("encoder architecture differs from train.encoder".into()));
    }
    if agent.model.config != config.train.ensemble {
        return Err(HarnessError::Mismatch("decoder ensemble differs from train.ensemble".into()));
    }
    if agent.encoder.state_dim != s || agent.model.state_dim != s || agent.model.action_dim != a {
        return Err(HarnessError::Mismatch(format!(
            "checkpoints are for state/action dimensions {}/{}, environment has {s}/{a}",
            agent.model.state_dim, agent.model.action_dim
        )));
    }
    Ok(())
}

/// Loads the agent named by `eval.checkpoints`.
pub fn load_checked_agent(config: &ExperimentConfig) -> Result<Agent> {
    let dir = config
        .eval
        .checkpoints
        .as_ref()
        .ok_or_else(|| HarnessError::Config("eval.checkpoints must name a trained run directory".into()))?;
    let agent = load_agent(dir)?;
    check_agent(config, &agent)?;
    Ok(agent)
}

/// Evaluation with an already trained agent (standard, OOD or shift mode).
pub fn eval_with_agent(config: &ExperimentConfig, agent: &Agent) -> Result<Vec<MetricsRecord>> {
    let mode = config.eval.mode;
    if mode == EvalMode::DatasetSize {
        return Err(HarnessError::Config("dataset-size mode trains its own agents".into()));
    }
    let setting = EvalSetting::new(config, mode)?;
    let e = &config.eval;
    evaluate_agent(agent, &setting, &e.kinds, &config.planner.points(), &e.seeds, e.episodes, e.workers)
}

/// Retrains on nested subsamples of the dataset and evaluates each agent.
pub fn eval_dataset_sizes(config: &ExperimentConfig) -> Result<Vec<MetricsRecord>> {
    let mut full_config = config.clone();
    full_config.dataset.subsample = None;
    let full = build_dataset(&full_config)?;
    let base = EvalSetting::new(config, EvalMode::DatasetSize)?;
    let e = &config.eval;
    let points = config.planner.points();
    let mut out = Vec::new();
    for &size in &e.dataset_sizes {
        for &train_seed in &e.train_seeds {
            let data = subsample(&full, size, train_seed);
            let agent = train_agent(&config.reseeded(train_seed), &data)?;
            let setting = EvalSetting {
                dataset_size: Some(size),
                train_seed,
                ..base.clone()
            };
            out.extend(evaluate_agent(&agent, &setting, &e.kinds, &points, &e.seeds, e.episodes, e.workers)?);
        }
    }
    Ok(out)
}

pub fn cmd_eval(config: &ExperimentConfig) -> Result<Vec<MetricsRecord>> {
    config.validate()?;
    match config.eval.mode {
        EvalMode::DatasetSize => eval_dataset_sizes(config),
        _ => eval_with_agent(config, &load_checked_agent(config)?),
    }
}
