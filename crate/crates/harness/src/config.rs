//! Experiment configuration: one TOML file with sections, every key of
//! which can be overridden from the command line as `section.key=value`.

use std::path::{Path, PathBuf};

use refplan::env::UniformRandomPolicy;
use refplan::{
    EncoderConfig, EnsembleConfig, FitConfig, LatentDistribution, MleConfig, PlannerConfig, PlannerKind,
    PointMass2D, PointMassFamily, PointMassParams, Policy, ProportionalController, VaeConfig,
};
use serde::{Deserialize, Serialize};

use crate::error::{HarnessError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FamilyKind {
    /// A single environment without drag or wind.
    Calm,
    /// Drag 0 or 0.5 with equal probability, no wind.
    TwoMode,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EnvSpec {
    pub family: FamilyKind,
    pub horizon: usize,
    /// Half-width of the initial position box.
    pub init_pos: f64,
}

impl Default for EnvSpec {
    fn default() -> Self {
        Self {
            family: FamilyKind::Calm,
            horizon: 100,
            init_pos: 1.0,
        }
    }
}

impl EnvSpec {
    pub fn family(&self) -> PointMassFamily {
        let mut base = PointMass2D {
            horizon: self.horizon,
            ..PointMass2D::default()
        };
        base.init.pos = self.init_pos;
        match self.family {
            FamilyKind::Calm => PointMassFamily::new(
                base,
                LatentDistribution::Fixed {
                    params: PointMassParams::CALM,
                },
            ),
            FamilyKind::TwoMode => PointMassFamily {
                base,
                ..PointMassFamily::two_mode()
            },
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BehaviorKind {
    /// Sluggish noisy PD controller.
    Suboptimal,
    /// Uniform random actions.
    Random,
    /// Constant push of `dataset.push` plus noise.
    Push,
    /// Cycles PD, push, PD, opposite push.
    Mixed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DatasetSpec {
    pub episodes: usize,
    pub behavior: BehaviorKind,
    pub push: f64,
    /// Keep roughly this many transitions (whole trajectories).
    pub subsample: Option<usize>,
    pub seed: u64,
    /// Load this dataset instead of generating one.
    pub path: Option<PathBuf>,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        Self {
            episodes: 200,
            behavior: BehaviorKind::Suboptimal,
            push: 0.5,
            subsample: None,
            seed: 1,
            path: None,
        }
    }
}

impl DatasetSpec {
    /// Behavior policies, cycled over episodes.
    pub fn behaviors(&self) -> Vec<Box<dyn Policy>> {
        let pd = || Box::new(ProportionalController::suboptimal()) as Box<dyn Policy>;
        let push = |p: f64| Box::new(ProportionalController::constant_push(p, 0.3)) as Box<dyn Policy>;
        match self.behavior {
            BehaviorKind::Suboptimal => vec![pd()],
            BehaviorKind::Random => vec![Box::new(UniformRandomPolicy { action_dim: 2 })],
            BehaviorKind::Push => vec![push(self.push)],
            BehaviorKind::Mixed => vec![pd(), push(self.push), pd(), push(-self.push)],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainSpec {
    pub seed: u64,
    pub encoder: EncoderConfig,
    pub ensemble: EnsembleConfig,
    pub vae: VaeConfig,
    pub finetune: MleConfig,
    pub bc: FitConfig,
    pub value: FitConfig,
    pub value_gamma: f64,
}

impl Default for TrainSpec {
    fn default() -> Self {
        Self {
            seed: 3,
            encoder: EncoderConfig::default(),
            ensemble: EnsembleConfig::default(),
            vae: VaeConfig {
                max_epochs: 20,
                ..VaeConfig::default()
            },
            finetune: MleConfig {
                max_epochs: 30,
                ..MleConfig::default()
            },
            bc: FitConfig {
                max_epochs: 30,
                ..FitConfig::default()
            },
            value: FitConfig {
                max_epochs: 30,
                ..FitConfig::default()
            },
            value_gamma: 0.95,
        }
    }
}

/// Lists of planner hyperparameters whose cartesian product is evaluated.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PlannerGrid {
    pub horizon: Vec<usize>,
    pub n_candidates: Vec<usize>,
    pub n_latents: Vec<usize>,
    pub kappa: Vec<f64>,
    pub noise_sigma: Vec<f64>,
    pub penalty: Vec<f64>,
    pub gamma: f64,
    pub latent_scale: f64,
}

impl Default for PlannerGrid {
    fn default() -> Self {
        let d = PlannerConfig::default();
        Self {
            horizon: vec![d.horizon],
            n_candidates: vec![256],
            n_latents: vec![d.n_latents],
            kappa: vec![d.kappa],
            noise_sigma: vec![d.noise_sigma],
            penalty: vec![d.penalty],
            gamma: d.gamma,
            latent_scale: d.latent_scale,
        }
    }
}

impl PlannerGrid {
    pub fn single(config: &PlannerConfig) -> Self {
        Self {
            horizon: vec![config.horizon],
            n_candidates: vec![config.n_candidates],
            n_latents: vec![config.n_latents],
            kappa: vec![config.kappa],
            noise_sigma: vec![config.noise_sigma],
            penalty: vec![config.penalty],
            gamma: config.gamma,
            latent_scale: config.latent_scale,
        }
    }

    pub fn len(&self) -> usize {
        self.horizon.len()
            * self.n_candidates.len()
            * self.n_latents.len()
            * self.kappa.len()
            * self.noise_sigma.len()
            * self.penalty.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Every grid point, sorted lexicographically by
    /// `(horizon, n_candidates, n_latents, kappa, noise_sigma, penalty)`.
    pub fn points(&self) -> Vec<PlannerConfig> {
        let mut out = Vec::with_capacity(self.len());
        for &horizon in &self.horizon {
            for &n_candidates in &self.n_candidates {
                for &n_latents in &self.n_latents {
                    for &kappa in &self.kappa {
                        for &noise_sigma in &self.noise_sigma {
                            for &penalty in &self.penalty {
                                out.push(PlannerConfig {
                                    horizon,
                                    n_candidates,
                                    n_latents,
                                    kappa,
                                    noise_sigma,
                                    penalty,
                                    gamma: self.gamma,
                                    latent_scale: self.latent_scale,
                                });
                            }
                        }
                    }
                }
            }
        }
        out.sort_by(compare_points);
        out
    }
}

/// Lexicographic order on the swept hyperparameters.
pub fn compare_points(a: &PlannerConfig, b: &PlannerConfig) -> std::cmp::Ordering {
    a.horizon
        .cmp(&b.horizon)
        .then(a.n_candidates.cmp(&b.n_candidates))
        .then(a.n_latents.cmp(&b.n_latents))
        .then(a.kappa.total_cmp(&b.kappa))
        .then(a.noise_sigma.total_cmp(&b.noise_sigma))
        .then(a.penalty.total_cmp(&b.penalty))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EvalMode {
    /// Test environments drawn like the training ones.
    Standard,
    /// Initial states from a box `ood_factor` times wider.
    Ood,
    /// Drag doubled and wind shifted by +0.3 on both axes.
    Shift,
    /// Retrain on subsampled datasets of each size in `dataset_sizes`.
    DatasetSize,
}

impl EvalMode {
    pub fn name(self) -> &'static str {
        match self {
            EvalMode::Standard => "standard",
            EvalMode::Ood => "ood",
            EvalMode::Shift => "shift",
            EvalMode::DatasetSize => "dataset_size",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalSpec {
    pub kinds: Vec<PlannerKind>,
    pub seeds: Vec<u64>,
    pub episodes: usize,
    pub mode: EvalMode,
    pub ood_factor: f64,
    pub dataset_sizes: Vec<usize>,
    /// Training seeds for dataset-size mode.
    pub train_seeds: Vec<u64>,
    /// Episodes per reference policy for the normalized score.
    pub reference_episodes: usize,
    /// Run directory holding trained checkpoints (eval-only commands).
    pub checkpoints: Option<PathBuf>,
    /// Concurrent evaluation workers.
    pub workers: usize,
}

impl Default for EvalSpec {
    fn default() -> Self {
        Self {
            kinds: PlannerKind::ALL.to_vec(),
            seeds: (0..5).collect(),
            episodes: 1,
            mode: EvalMode::Standard,
            ood_factor: 3.0,
            dataset_sizes: vec![1_000, 5_000, 20_000],
            train_seeds: vec![0, 1, 2],
            reference_episodes: 20,
            checkpoints: None,
            workers: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct VarianceSpec {
    pub n_bars: Vec<usize>,
    /// Repeated planner calls `K` per step.
    pub repeats: usize,
    pub seeds: Vec<u64>,
    /// Episode length used for the study.
    pub horizon: usize,
}

impl Default for VarianceSpec {
    fn default() -> Self {
        Self {
            n_bars: vec![1, 4, 8, 16],
            repeats: 20,
            seeds: vec![0, 1, 2],
            horizon: 20,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub id: String,
    pub output_dir: PathBuf,
    pub env: EnvSpec,
    pub dataset: DatasetSpec,
    pub train: TrainSpec,
    pub planner: PlannerGrid,
    pub eval: EvalSpec,
    pub variance: VarianceSpec,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            id: "pointmass".into(),
            output_dir: PathBuf::from("runs"),
            env: EnvSpec::default(),
            dataset: DatasetSpec::default(),
            train: TrainSpec::default(),
            planner: PlannerGrid::default(),
            eval: EvalSpec::default(),
            variance: VarianceSpec::default(),
        }
    }
}

impl ExperimentConfig {
    /// Parses a TOML document and applies `key.path=value` overrides.
    pub fn from_toml_str(text: &str, overrides: &[String]) -> Result<Self> {
        let mut table: toml::Table = toml::from_str(text).map_err(|e| HarnessError::Toml(e.to_string()))?;
        for o in overrides {
            apply_override(&mut table, o)?;
        }
        let config: Self = toml::Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| HarnessError::Toml(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: &Path, overrides: &[String]) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|_| HarnessError::Missing {
            what: "config file",
            path: path.to_path_buf(),
        })?;
        Self::from_toml_str(&text, overrides)
    }

    /// Copy whose training stages (initialization, minibatch order, splits)
    /// all derive from `seed`.
    pub fn reseeded(&self, seed: u64) -> Self {
        let mut c = self.clone();
        let t = &mut c.train;
        t.seed = seed;
        t.vae.seed = seed.wrapping_add(1);
        t.finetune.seed = seed.wrapping_add(2);
        t.bc.seed = seed.wrapping_add(3);
        t.value.seed = seed.wrapping_add(4);
        c
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| HarnessError::Toml(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(HarnessError::Config(m.to_string()));
        if self.eval.seeds.is_empty() {
            return bad("eval.seeds must not be empty");
        }
        if self.eval.kinds.is_empty() {
            return bad("eval.kinds must not be empty");
        }
        if self.eval.episodes == 0 {
            return bad("eval.episodes must be ≥ 1");
        }
        if self.planner.is_empty() {
            return bad("every planner grid list must be non-empty");
        }
        for p in self.planner.points() {
            p.validate().map_err(|e| HarnessError::Config(e.to_string()))?;
        }
        if self.env.horizon == 0 {
            return bad("env.horizon must be ≥ 1");
        }
        if self.dataset.episodes == 0 && self.dataset.path.is_none() {
            return bad("dataset.episodes must be ≥ 1");
        }
        if self.eval.mode == EvalMode::DatasetSize
            && (self.eval.dataset_sizes.is_empty() || self.eval.train_seeds.is_empty())
        {
            return bad("dataset-size mode needs eval.dataset_sizes and eval.train_seeds");
        }
        if self.eval.ood_factor.is_nan() || self.eval.ood_factor <= 0.0 {
            return bad("eval.ood_factor must be > 0");
        }
        if self.variance.n_bars.is_empty() || self.variance.seeds.is_empty() {
            return bad("variance.n_bars and variance.seeds must not be empty");
        }
        if self.variance.n_bars.contains(&0) {
            return bad("variance.n_bars entries must be ≥ 1");
        }
        Ok(())
    }
}

/// Sets `path.to.key` in `table` to `value`, parsed as a TOML value when
/// possible and as a string otherwise.
fn apply_override(table: &mut toml::Table, assignment: &str) -> Result<()> {
    let (path, raw) = assignment
        .split_once('=')
        .ok_or_else(|| HarnessError::Config(format!("override {assignment:?} is not key=value")))?;
    let value = toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()));
    let keys: Vec<&str> = path.trim().split('.').collect();
    let (last, parents) = keys.split_last().expect("split yields at least one key");
    let mut cur = table;
    for k in parents {
        let entry = cur
            .entry(k.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = entry
            .as_table_mut()
            .ok_or_else(|| HarnessError::Config(format!("override {path:?}: {k} is not a section")))?;
    }
    cur.insert(last.to_string(), value);
    Ok(())
}
