//! Spread of the planner output across repeated calls, as a function of
//! the number of posterior latent draws.

use std::time::Instant;

use rand::{RngCore, SeedableRng};
use refplan::planner::{run_episode, Controller, Decision};
use refplan::{refplan, Agent, BeliefTracker, PlannerConfig, Result as CoreResult, SimRng, Transition};
use serde::{Deserialize, Serialize};

use crate::config::ExperimentConfig;
use crate::error::{HarnessError, Result};
use crate::eval::{env_for_episode, episode_seed, eval_family, load_checked_agent};
use crate::stats::mean;

/// Averages over seeds for one `n̄`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VarianceRow {
    pub n_bar: usize,
    pub mean_variance: f64,
    pub mean_return: f64,
    /// Mean wall-clock of one planner call.
    pub ms_per_call: f64,
}

/// One `(n̄, seed)` episode.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VarianceSample {
    pub n_bar: usize,
    pub seed: u64,
    pub mean_variance: f64,
    pub episode_return: f64,
    pub ms_per_call: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct VarianceStudy {
    pub rows: Vec<VarianceRow>,
    pub samples: Vec<VarianceSample>,
}

/// Sample variance (denominator `K − 1`) of each coordinate, averaged over coordinates.
pub fn mean_coordinate_variance(draws: &[Vec<f64>]) -> f64 {
    let k = draws.len() as f64;
    let dims = draws[0].len();
    let total: f64 = (0..dims)
        .map(|d| {
            let m = draws.iter().map(|x| x[d]).sum::<f64>() / k;
            draws.iter().map(|x| (x[d] - m).powi(2)).sum::<f64>() / (k - 1.0)
        })
        .sum();
    total / dims as f64
}

/// Calls the planner `repeats` times per step with independent streams,
/// logs the spread of the first action, and executes the first call's action.
struct RepeatedPlanner<'a> {
    agent: &'a Agent,
    config: PlannerConfig,
    repeats: usize,
    tracker: BeliefTracker<'a>,
    variances: Vec<f64>,
    call_ms: Vec<f64>,
}

impl Controller for RepeatedPlanner<'_> {
    fn act(
        &mut self,
        state: &[f64],
        remaining: usize,
        last: Option<&Transition>,
        rng: &mut SimRng,
    ) -> CoreResult<Decision> {
        if let Some(tr) = last {
            self.tracker.record(&tr.action, tr.reward);
        }
        let belief = self.tracker.observe(state)?;
        let mut firsts = Vec::with_capacity(self.repeats);
        let mut entropies = Vec::new();
        for k in 0..self.repeats {
            let mut call_rng = SimRng::seed_from_u64(rng.next_u64());
            let start = Instant::now();
            let r = refplan(self.agent.components(), state, &belief, &self.config, remaining, &mut call_rng)?;
            self.call_ms.push(start.elapsed().as_secs_f64() * 1e3);
            if k == 0 {
                entropies = r.weight_entropies();
            }
            firsts.push(r.actions.into_iter().next().ok_or(refplan::Error::Empty("plan"))?);
        }
        self.variances.push(mean_coordinate_variance(&firsts));
        Ok(Decision {
            action: firsts.swap_remove(0),
            entropies,
        })
    }

    fn n_bar(&self) -> usize {
        self.config.n_latents
    }

    fn kappa(&self) -> f64 {
        self.config.kappa
    }
}

/// Runs the study at the first planner grid point, overriding `n_latents`.
pub fn variance_with_agent(config: &ExperimentConfig, agent: &Agent) -> Result<VarianceStudy> {
    let v = &config.variance;
    if v.repeats < 2 {
        return Err(HarnessError::Config(format!("variance.repeats must be ≥ 2, got {}", v.repeats)));
    }
    if v.horizon == 0 {
        return Err(HarnessError::Config("variance.horizon must be ≥ 1".into()));
    }
    let base = config.planner.points().into_iter().next().expect("validated grid is non-empty");
    let mut family = eval_family(config, config.eval.mode);
    family.base.horizon = v.horizon;
    let mut samples = Vec::new();
    for &n_bar in &v.n_bars {
        for &seed in &v.seeds {
            let es = episode_seed(seed, 0);
            let env = env_for_episode(&family, es);
            let mut controller = RepeatedPlanner {
                agent,
                config: PlannerConfig {
                    n_latents: n_bar,
                    ..base.clone()
                },
                repeats: v.repeats,
                tracker: BeliefTracker::new(&agent.encoder),
                variances: Vec::new(),
                call_ms: Vec::new(),
            };
            let log = run_episode(&env, &mut controller, es)?;
            samples.push(VarianceSample {
                n_bar,
                seed,
                mean_variance: mean(&controller.variances),
                episode_return: log.ret,
                ms_per_call: mean(&controller.call_ms),
            });
        }
    }
    let rows = v
        .n_bars
        .iter()
        .map(|&n_bar| {
            let of = |f: fn(&VarianceSample) -> f64| {
                mean(&samples.iter().filter(|s| s.n_bar == n_bar).map(f).collect::<Vec<_>>())
            };
            VarianceRow {
                n_bar,
                mean_variance: of(|s| s.mean_variance),
                mean_return: of(|s| s.episode_return),
                ms_per_call: of(|s| s.ms_per_call),
            }
        })
        .collect();
    Ok(VarianceStudy { rows, samples })
}

pub fn cmd_variance_study(config: &ExperimentConfig) -> Result<VarianceStudy> {
    config.validate()?;
    if config.variance.repeats < 2 {
        return Err(HarnessError::Config(format!(
            "variance.repeats must be ≥ 2, got {}",
            config.variance.repeats
        )));
    }
    variance_with_agent(config, &load_checked_agent(config)?)
}
