//! Control-as-inference trajectory optimization with a prior policy,
//! latent-conditioned ensemble rollouts and latent marginalization, plus
//! the receding-horizon driver.
//!
//! Candidate plans are sampled once from the prior policy under the
//! posterior mean latent. Each latent sample then re-scores the same
//! action sequences, the scores become softmax weights, and the weighted
//! plans are averaged over latent samples.

use std::time::Instant;

use ndarray::Array2;
use rand::{RngCore, SeedableRng};
use serde::{Deserialize, Serialize};

use crate::belief::{BeliefParams, BeliefTracker, Encoder};
use crate::data::Transition;
use crate::env::Environment;
use crate::error::{check_dim, Error, Result};
use crate::model::EnsembleModel;
use crate::prior::{PriorPolicy, ValueFn};
use crate::SimRng;

/// Stochastic transition model used for imagined rollouts.
pub trait TransitionModel {
    fn state_dim(&self) -> usize;
    fn action_dim(&self) -> usize;
    fn latent_dim(&self) -> usize;
    /// Number of members available to planning.
    fn n_members(&self) -> usize;
    /// Samples `(s', r)` per row from member `member` (`0..n_members`).
    fn sample_member(
        &self,
        member: usize,
        states: &Array2<f64>,
        actions: &Array2<f64>,
        latent: &[f64],
        rng: &mut SimRng,
    ) -> Result<(Array2<f64>, Vec<f64>)>;
    /// Samples `(s', r)` per row from a uniformly drawn member.
    fn sample_any(
        &self,
        states: &Array2<f64>,
        actions: &Array2<f64>,
        latent: &[f64],
        rng: &mut SimRng,
    ) -> Result<(Array2<f64>, Vec<f64>)>;
}

/// Action-sampling prior used to propose candidate plans.
pub trait ActionPrior {
    fn action_dim(&self) -> usize;
    /// One proposal per state row, with extra Gaussian noise, clipped to `[−1, 1]`.
    fn sample_batch(&self, states: &Array2<f64>, noise_sigma: f64, rng: &mut SimRng) -> Result<Array2<f64>>;
    /// Deterministic action per state row.
    fn mean_batch(&self, states: &Array2<f64>) -> Result<Array2<f64>>;
}

/// Terminal value estimate.
pub trait StateValue {
    fn values(&self, states: &Array2<f64>) -> Result<Vec<f64>>;
}

impl TransitionModel for EnsembleModel {
    fn state_dim(&self) -> usize {
        self.state_dim
    }

    fn action_dim(&self) -> usize {
        self.action_dim
    }

    fn latent_dim(&self) -> usize {
        self.latent_dim
    }

    fn n_members(&self) -> usize {
        self.elites.len()
    }

    fn sample_member(
        &self,
        member: usize,
        states: &Array2<f64>,
        actions: &Array2<f64>,
        latent: &[f64],
        rng: &mut SimRng,
    ) -> Result<(Array2<f64>, Vec<f64>)> {
        self.sample_member_batch(self.elites[member], states, actions, latent, rng)
    }

    fn sample_any(
        &self,
        states: &Array2<f64>,
        actions: &Array2<f64>,
        latent: &[f64],
        rng: &mut SimRng,
    ) -> Result<(Array2<f64>, Vec<f64>)> {
        self.sample_batch(states, actions, latent, rng)
    }
}

impl ActionPrior for PriorPolicy {
    fn action_dim(&self) -> usize {
        self.action_dim
    }

    fn sample_batch(&self, states: &Array2<f64>, noise_sigma: f64, rng: &mut SimRng) -> Result<Array2<f64>> {
        PriorPolicy::sample_batch(self, states, noise_sigma, rng)
    }

    fn mean_batch(&self, states: &Array2<f64>) -> Result<Array2<f64>> {
        Ok(self.distribution(states)?.0)
    }
}

impl StateValue for ValueFn {
    fn values(&self, states: &Array2<f64>) -> Result<Vec<f64>> {
        ValueFn::values(self, states)
    }
}

/// `V ≡ 0`.
#[derive(Debug, Clone, Copy, Default)]
pub struct ZeroValue;

impl StateValue for ZeroValue {
    fn values(&self, states: &Array2<f64>) -> Result<Vec<f64>> {
        Ok(vec![0.0; states.nrows()])
    }
}

/// A known deterministic environment wrapped as a one-member model that
/// ignores the latent.
#[derive(Debug, Clone)]
pub struct EnvModel<E>(pub E);

impl<E: Environment> TransitionModel for EnvModel<E> {
    fn state_dim(&self) -> usize {
        self.0.state_dim()
    }

    fn action_dim(&self) -> usize {
        self.0.action_dim()
    }

    fn latent_dim(&self) -> usize {
        0
    }

    fn n_members(&self) -> usize {
        1
    }

    fn sample_member(
        &self,
        _member: usize,
        states: &Array2<f64>,
        actions: &Array2<f64>,
        latent: &[f64],
        rng: &mut SimRng,
    ) -> Result<(Array2<f64>, Vec<f64>)> {
        self.sample_any(states, actions, latent, rng)
    }

    fn sample_any(
        &self,
        states: &Array2<f64>,
        actions: &Array2<f64>,
        _latent: &[f64],
        rng: &mut SimRng,
    ) -> Result<(Array2<f64>, Vec<f64>)> {
        let mut next = Array2::zeros(states.raw_dim());
        let mut rewards = Vec::with_capacity(states.nrows());
        for (i, (s, a)) in states.rows().into_iter().zip(actions.rows()).enumerate() {
            let step = self.0.step(&s.to_vec(), &a.to_vec(), rng);
            next.row_mut(i).assign(&ndarray::ArrayView1::from(&step.next_state[..]));
            rewards.push(step.reward);
        }
        Ok((next, rewards))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PlannerConfig {
    pub horizon: usize,
    pub n_candidates: usize,
    pub n_latents: usize,
    pub kappa: f64,
    pub noise_sigma: f64,
    pub penalty: f64,
    pub gamma: f64,
    /// Multiplies the posterior standard deviation when drawing latents;
    /// zero collapses every draw onto the posterior mean.
    pub latent_scale: f64,
}

impl Default for PlannerConfig {
    fn default() -> Self {
        Self {
            horizon: 4,
            n_candidates: 512,
            n_latents: 4,
            kappa: 1.0,
            noise_sigma: 0.05,
            penalty: 0.5,
            gamma: 0.95,
            latent_scale: 1.0,
        }
    }
}

impl PlannerConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |what: &str| Err(Error::InvalidArgument(format!("planner config: {what}")));
        if self.horizon == 0 {
            return bad("horizon must be ≥ 1");
        }
        if self.n_candidates == 0 {
            return bad("n_candidates must be ≥ 1");
        }
        if self.n_latents == 0 {
            return bad("n_latents must be ≥ 1");
        }
        if self.kappa.is_nan() || self.kappa < 0.0 {
            return bad("kappa must be ≥ 0");
        }
        if self.penalty.is_nan() || self.penalty < 0.0 {
            return bad("penalty must be ≥ 0");
        }
        if self.noise_sigma.is_nan() || self.noise_sigma < 0.0 {
            return bad("noise_sigma must be ≥ 0");
        }
        if !(0.0..=1.0).contains(&self.gamma) {
            return bad("gamma must lie in [0, 1]");
        }
        if self.latent_scale.is_nan() || self.latent_scale < 0.0 {
            return bad("latent_scale must be ≥ 0");
        }
        Ok(())
    }
}

/// `N` candidate action sequences of a common length, with the states
/// imagined while proposing them.
#[derive(Debug, Clone, PartialEq)]
pub struct CandidatePlans {
    /// `actions[h]` is `N × action_dim`.
    pub actions: Vec<Array2<f64>>,
    /// `states[h]` is `N × state_dim`; `states[0]` repeats the start state.
    pub states: Vec<Array2<f64>>,
    /// Whether rollouts of these plans add a terminal value; false when
    /// the plans reach the end of the episode.
    pub terminal_value: bool,
}

impl CandidatePlans {
    /// Explicit candidates: `plans[n][h]` is an action vector.
    pub fn from_sequences(plans: &[Vec<Vec<f64>>], terminal_value: bool) -> Result<Self> {
        let n = plans.len();
        if n == 0 {
            return Err(Error::Empty("candidate plans"));
        }
        let horizon = plans[0].len();
        let da = plans[0].first().map_or(0, Vec::len);
        let mut actions = vec![Array2::zeros((n, da)); horizon];
        for (i, plan) in plans.iter().enumerate() {
            check_dim("candidate plan length", horizon, plan.len())?;
            for (h, a) in plan.iter().enumerate() {
                check_dim("candidate action", da, a.len())?;
                actions[h].row_mut(i).assign(&ndarray::ArrayView1::from(&a[..]));
            }
        }
        Ok(Self {
            actions,
            states: Vec::new(),
            terminal_value,
        })
    }

    pub fn len(&self) -> usize {
        self.actions.first().map_or(0, Array2::nrows)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn horizon(&self) -> usize {
        self.actions.len()
    }

    /// Plan `n` as `H` action vectors.
    pub fn plan(&self, n: usize) -> Vec<Vec<f64>> {
        self.actions.iter().map(|a| a.row(n).to_vec()).collect()
    }

    /// Elementwise mean over candidates.
    pub fn mean_plan(&self) -> Vec<Vec<f64>> {
        self.weighted_plan(&vec![1.0 / self.len() as f64; self.len()])
    }

    /// `Σ_n w_n · plan_n`.
    pub fn weighted_plan(&self, weights: &[f64]) -> Vec<Vec<f64>> {
        self.actions
            .iter()
            .map(|a| {
                let mut out = vec![0.0; a.ncols()];
                for (row, w) in a.rows().into_iter().zip(weights) {
                    for (o, v) in out.iter_mut().zip(row) {
                        *o += w * v;
                    }
                }
                out
            })
            .collect()
    }
}

/// Max-subtracted softmax of `κ · returns`.
pub fn softmax_weights(returns: &[f64], kappa: f64) -> Vec<f64> {
    if returns.is_empty() {
        return Vec::new();
    }
    let max = returns.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = returns.iter().map(|r| (kappa * (r - max)).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

/// Shannon entropy (nats) of a weight vector.
pub fn weight_entropy(weights: &[f64]) -> f64 {
    -weights.iter().filter(|&&w| w > 0.0).map(|w| w * w.ln()).sum::<f64>()
}

/// `mean − p · std` over member returns (population std); also returns the variance.
pub fn penalized_score(member_returns: &[f64], penalty: f64) -> (f64, f64) {
    let k = member_returns.len() as f64;
    let mean = member_returns.iter().sum::<f64>() / k;
    let var = member_returns.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / k;
    (mean - penalty * var.sqrt(), var)
}

/// Everything the planner needs besides the belief.
#[derive(Clone, Copy)]
pub struct Components<'a> {
    pub model: &'a dyn TransitionModel,
    pub prior: &'a dyn ActionPrior,
    pub value: &'a dyn StateValue,
}

/// Scores of all candidates under one latent.
#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    /// Penalized score per candidate.
    pub scores: Vec<f64>,
    /// Across-member return variance per candidate.
    pub variances: Vec<f64>,
}

fn broadcast(state: &[f64], n: usize) -> Array2<f64> {
    let row = ndarray::ArrayView1::from(state);
    let mut out = Array2::zeros((n, state.len()));
    for mut r in out.rows_mut() {
        r.assign(&row);
    }
    out
}

/// Rolls every candidate out under each planning member with shared
/// action sequences: `R_k = Σ_h γ^h r_h + γ^H V(s_H)` (the value term only
/// when `plans.terminal_value`), scored as `mean_k R_k − p · std_k R_k`.
pub fn rollout_returns(
    comp: Components<'_>,
    state: &[f64],
    plans: &CandidatePlans,
    latent: &[f64],
    gamma: f64,
    penalty: f64,
    rng: &mut SimRng,
) -> Result<Evaluation> {
    let model = comp.model;
    check_dim("planner state", model.state_dim(), state.len())?;
    check_dim("planner latent", model.latent_dim(), latent.len())?;
    let n = plans.len();
    let k = model.n_members();
    let mut member_returns = vec![vec![0.0; k]; n];
    for member in 0..k {
        let mut s = broadcast(state, n);
        let mut discount = 1.0;
        for actions in &plans.actions {
            let (next, rewards) = model.sample_member(member, &s, actions, latent, rng)?;
            for (ret, r) in member_returns.iter_mut().zip(&rewards) {
                ret[member] += discount * r;
            }
            s = next;
            discount *= gamma;
        }
        if plans.terminal_value {
            for (ret, v) in member_returns.iter_mut().zip(comp.value.values(&s)?) {
                ret[member] += discount * v;
            }
        }
    }
    let (scores, variances) = member_returns.iter().map(|r| penalized_score(r, penalty)).unzip();
    Ok(Evaluation { scores, variances })
}

/// Penalized return of a single plan (`plan[h]` an action vector).
pub fn rollout_return(
    comp: Components<'_>,
    state: &[f64],
    plan: &[Vec<f64>],
    latent: &[f64],
    gamma: f64,
    penalty: f64,
    rng: &mut SimRng,
) -> Result<f64> {
    if plan.is_empty() {
        return Ok(comp.value.values(&broadcast(state, 1))?[0]);
    }
    let plans = CandidatePlans::from_sequences(&[plan.to_vec()], true)?;
    Ok(rollout_returns(comp, state, &plans, latent, gamma, penalty, rng)?.scores[0])
}

/// Samples `n_candidates` plans of length `horizon` from the prior policy,
/// advancing imagined states with the model conditioned on `latent`.
pub fn generate_prior_plans(
    comp: Components<'_>,
    state: &[f64],
    latent: &[f64],
    config: &PlannerConfig,
    horizon: usize,
    terminal_value: bool,
    rng: &mut SimRng,
) -> Result<CandidatePlans> {
    check_dim("planner action", comp.model.action_dim(), comp.prior.action_dim())?;
    let n = config.n_candidates;
    let mut s = broadcast(state, n);
    let mut actions = Vec::with_capacity(horizon);
    let mut states = Vec::with_capacity(horizon + 1);
    states.push(s.clone());
    for _ in 0..horizon {
        let a = comp.prior.sample_batch(&s, config.noise_sigma, rng)?;
        let (next, _) = comp.model.sample_any(&s, &a, latent, rng)?;
        actions.push(a);
        s = next;
        states.push(s.clone());
    }
    Ok(CandidatePlans {
        actions,
        states,
        terminal_value,
    })
}

/// Posterior-mean plan under one latent.
#[derive(Debug, Clone, PartialEq)]
pub struct ConditionedPlan {
    pub actions: Vec<Vec<f64>>,
    pub weights: Vec<f64>,
    pub evaluation: Evaluation,
}

/// Re-scores `plans` under `latent` and returns `Σ_n w_n · plan_n`.
pub fn plan_conditioned(
    comp: Components<'_>,
    state: &[f64],
    latent: &[f64],
    plans: &CandidatePlans,
    config: &PlannerConfig,
    rng: &mut SimRng,
) -> Result<ConditionedPlan> {
    if plans.is_empty() {
        return Err(Error::Empty("candidate plans"));
    }
    let evaluation = rollout_returns(comp, state, plans, latent, config.gamma, config.penalty, rng)?;
    let weights = softmax_weights(&evaluation.scores, config.kappa);
    Ok(ConditionedPlan {
        actions: plans.weighted_plan(&weights),
        weights,
        evaluation,
    })
}

/// Delta-method standard error of a self-normalized weighted mean.
pub fn snis_standard_error(weights: &[f64], values: &[f64]) -> f64 {
    let total: f64 = weights.iter().sum();
    let mean = weights.iter().zip(values).map(|(w, v)| w * v).sum::<f64>() / total;
    let s2 = weights
        .iter()
        .zip(values)
        .map(|(w, v)| (w / total).powi(2) * (v - mean).powi(2))
        .sum::<f64>();
    s2.sqrt()
}

#[derive(Debug, Clone, PartialEq)]
pub struct PlanResult {
    /// Posterior-mean plan, `H` action vectors.
    pub actions: Vec<Vec<f64>>,
    /// Latent draws, one per re-scoring pass.
    pub latents: Vec<Vec<f64>>,
    /// Softmax weights per latent.
    pub weights: Vec<Vec<f64>>,
    /// Penalized candidate scores per latent.
    pub returns: Vec<Vec<f64>>,
    /// Across-member return variance per latent and candidate.
    pub return_variance: Vec<Vec<f64>>,
    pub plans: CandidatePlans,
}

impl PlanResult {
    pub fn weight_entropies(&self) -> Vec<f64> {
        self.weights.iter().map(|w| weight_entropy(w)).collect()
    }
}

/// Draws `n` latents `μ + scale · σ ⊙ ε`.
pub fn sample_latents(belief: &BeliefParams, n: usize, scale: f64, rng: &mut SimRng) -> Vec<Vec<f64>> {
    (0..n).map(|_| belief.sample(scale, rng).m).collect()
}

/// Marginalized planning from a posterior belief.
///
/// The rng is consumed in a fixed order: latent draws, candidate
/// generation under `μ`, then one seed from which every latent's
/// re-scoring pass restarts, so all latents see the same simulation noise.
/// `remaining` is the number of environment steps left in the episode;
/// rollouts are truncated there and lose their terminal value.
pub fn refplan(
    comp: Components<'_>,
    state: &[f64],
    belief: &BeliefParams,
    config: &PlannerConfig,
    remaining: usize,
    rng: &mut SimRng,
) -> Result<PlanResult> {
    config.validate()?;
    check_dim("belief latent", comp.model.latent_dim(), belief.dim())?;
    let (horizon, terminal_value) = effective_horizon(config.horizon, remaining);
    let latents = sample_latents(belief, config.n_latents, config.latent_scale, rng);
    let plans = generate_prior_plans(comp, state, &belief.mu, config, horizon, terminal_value, rng)?;
    let eval_seed = rng.next_u64();
    let mut mean: Option<Vec<Vec<f64>>> = None;
    let mut weights = Vec::with_capacity(latents.len());
    let mut returns = Vec::with_capacity(latents.len());
    let mut variances = Vec::with_capacity(latents.len());
    for (j, m) in latents.iter().enumerate() {
        let mut eval_rng = SimRng::seed_from_u64(eval_seed);
        let cond = plan_conditioned(comp, state, m, &plans, config, &mut eval_rng)?;
        match mean.as_mut() {
            None => mean = Some(cond.actions),
            Some(acc) => {
                let c = (j + 1) as f64;
                for (acc_h, new_h) in acc.iter_mut().zip(&cond.actions) {
                    for (a, b) in acc_h.iter_mut().zip(new_h) {
                        *a += (b - *a) / c;
                    }
                }
            }
        }
        weights.push(cond.weights);
        returns.push(cond.evaluation.scores);
        variances.push(cond.evaluation.variances);
    }
    Ok(PlanResult {
        actions: mean.unwrap_or_default(),
        latents,
        weights,
        returns,
        return_variance: variances,
        plans,
    })
}

/// Planning horizon clipped to the steps left in the episode, and whether
/// a terminal value applies.
pub fn effective_horizon(horizon: usize, remaining: usize) -> (usize, bool) {
    if remaining > horizon {
        (horizon, true)
    } else {
        (remaining, false)
    }
}

/// [`refplan`] starting from an observed history: the prefix is encoded
/// first and planning happens at the state after it.
#[allow(clippy::too_many_arguments)]
pub fn refplan_from_prefix(
    comp: Components<'_>,
    encoder: &Encoder,
    prefix: &[Transition],
    current_state: &[f64],
    config: &PlannerConfig,
    remaining: usize,
    rng: &mut SimRng,
) -> Result<PlanResult> {
    let beliefs = encoder.encode(prefix, current_state)?;
    let belief = beliefs.last().expect("encode returns at least one belief");
    refplan(comp, current_state, belief, config, remaining, rng)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PlannerKind {
    PriorOnly,
    Flat,
    Refplan,
}

impl PlannerKind {
    pub const ALL: [PlannerKind; 3] = [PlannerKind::PriorOnly, PlannerKind::Flat, PlannerKind::Refplan];

    pub fn name(self) -> &'static str {
        match self {
            PlannerKind::PriorOnly => "prior_only",
            PlannerKind::Flat => "flat",
            PlannerKind::Refplan => "refplan",
        }
    }
}

impl std::fmt::Display for PlannerKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for PlannerKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "prior_only" | "prior-only" | "prior" => Ok(PlannerKind::PriorOnly),
            "flat" => Ok(PlannerKind::Flat),
            "refplan" => Ok(PlannerKind::Refplan),
            other => Err(Error::InvalidArgument(format!("unknown planner kind {other:?}"))),
        }
    }
}

/// One executed decision.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub t: usize,
    pub state: Vec<f64>,
    pub action: Vec<f64>,
    pub reward: f64,
    pub plan_time_ms: f64,
    pub n_bar: usize,
    pub kappa: f64,
    /// Entropy of the softmax weights for each latent (empty without planning).
    pub entropies: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpisodeLog {
    /// Undiscounted sum of environment rewards.
    pub ret: f64,
    pub steps: Vec<StepRecord>,
}

/// What a controller decided at one step.
#[derive(Debug, Clone, PartialEq)]
pub struct Decision {
    pub action: Vec<f64>,
    pub entropies: Vec<f64>,
}

/// A receding-horizon decision rule.
pub trait Controller {
    /// Called with the current state, the number of steps left in the
    /// episode, and the transition that led here (`None` at `t = 0`).
    fn act(
        &mut self,
        state: &[f64],
        remaining: usize,
        last: Option<&Transition>,
        rng: &mut SimRng,
    ) -> Result<Decision>;

    fn n_bar(&self) -> usize {
        0
    }

    fn kappa(&self) -> f64 {
        0.0
    }
}

/// Independent environment and planner streams derived from one seed.
pub fn episode_rngs(seed: u64) -> (SimRng, SimRng) {
    let mut master = SimRng::seed_from_u64(seed);
    let env_rng = SimRng::seed_from_u64(master.next_u64());
    let plan_rng = SimRng::seed_from_u64(master.next_u64());
    (env_rng, plan_rng)
}

/// Runs one episode, executing only the first action of each decision.
pub fn run_episode(env: &dyn Environment, controller: &mut dyn Controller, seed: u64) -> Result<EpisodeLog> {
    let (mut env_rng, mut plan_rng) = episode_rngs(seed);
    let mut state = env.reset(&mut env_rng);
    let horizon = env.horizon();
    let mut last: Option<Transition> = None;
    let mut steps = Vec::with_capacity(horizon);
    let mut ret = 0.0;
    for t in 0..horizon {
        let start = Instant::now();
        let decision = controller.act(&state, horizon - t, last.as_ref(), &mut plan_rng)?;
        let plan_time_ms = start.elapsed().as_secs_f64() * 1e3;
        check_dim("controller action", env.action_dim(), decision.action.len())?;
        let step = env.step(&state, &decision.action, &mut env_rng);
        if !step.reward.is_finite() || step.next_state.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument(format!("environment produced non-finite output at t={t}")));
        }
        ret += step.reward;
        steps.push(StepRecord {
            t,
            state: state.clone(),
            action: decision.action.clone(),
            reward: step.reward,
            plan_time_ms,
            n_bar: controller.n_bar(),
            kappa: controller.kappa(),
            entropies: decision.entropies,
        });
        last = Some(Transition {
            state: std::mem::take(&mut state),
            action: decision.action,
            reward: step.reward,
            next_state: step.next_state.clone(),
            done: t + 1 == horizon,
        });
        state = step.next_state;
    }
    Ok(EpisodeLog { ret, steps })
}

/// Trained components of one agent.
#[derive(Debug, Clone)]
pub struct Agent {
    pub encoder: Encoder,
    pub model: EnsembleModel,
    pub policy: PriorPolicy,
    pub value: ValueFn,
}

impl Agent {
    pub fn components(&self) -> Components<'_> {
        Components {
            model: &self.model,
            prior: &self.policy,
            value: &self.value,
        }
    }
}

/// Controller for one of the three planner kinds backed by learned components.
pub struct AgentController<'a> {
    agent: &'a Agent,
    kind: PlannerKind,
    config: PlannerConfig,
    tracker: BeliefTracker<'a>,
}

impl<'a> AgentController<'a> {
    pub fn new(agent: &'a Agent, kind: PlannerKind, config: PlannerConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            agent,
            kind,
            config,
            tracker: BeliefTracker::new(&agent.encoder),
        })
    }
}

impl Controller for AgentController<'_> {
    fn act(
        &mut self,
        state: &[f64],
        remaining: usize,
        last: Option<&Transition>,
        rng: &mut SimRng,
    ) -> Result<Decision> {
        if self.kind == PlannerKind::PriorOnly {
            return Ok(Decision {
                action: self.agent.policy.mean_action(state)?,
                entropies: Vec::new(),
            });
        }
        if let Some(tr) = last {
            self.tracker.record(&tr.action, tr.reward);
        }
        let belief = self.tracker.observe(state)?;
        let comp = self.agent.components();
        let (actions, entropies) = match self.kind {
            PlannerKind::Refplan => {
                let r = refplan(comp, state, &belief, &self.config, remaining, rng)?;
                let e = r.weight_entropies();
                (r.actions, e)
            }
            _ => {
                let (horizon, terminal) = effective_horizon(self.config.horizon, remaining);
                let plans = generate_prior_plans(comp, state, &belief.mu, &self.config, horizon, terminal, rng)?;
                let c = plan_conditioned(comp, state, &belief.mu, &plans, &self.config, rng)?;
                let e = vec![weight_entropy(&c.weights)];
                (c.actions, e)
            }
        };
        Ok(Decision {
            action: actions.into_iter().next().ok_or(Error::Empty("plan"))?,
            entropies,
        })
    }

    fn n_bar(&self) -> usize {
        match self.kind {
            PlannerKind::PriorOnly => 0,
            PlannerKind::Flat => 1,
            PlannerKind::Refplan => self.config.n_latents,
        }
    }

    fn kappa(&self) -> f64 {
        match self.kind {
            PlannerKind::PriorOnly => 0.0,
            _ => self.config.kappa,
        }
    }
}

/// One model-predictive-control episode with the chosen planner.
pub fn mpc_episode(
    env: &dyn Environment,
    kind: PlannerKind,
    agent: &Agent,
    config: &PlannerConfig,
    seed: u64,
) -> Result<EpisodeLog> {
    let mut controller = AgentController::new(agent, kind, config.clone())?;
    run_episode(env, &mut controller, seed)
}

/// Plans from explicit candidates at every step (no prior sampling).
pub struct FixedCandidateController<'a> {
    pub comp: Components<'a>,
    pub config: PlannerConfig,
    /// Candidate generator given the number of steps to plan.
    pub candidates: Box<dyn Fn(usize) -> Vec<Vec<Vec<f64>>> + 'a>,
}

impl Controller for FixedCandidateController<'_> {
    fn act(
        &mut self,
        state: &[f64],
        remaining: usize,
        _last: Option<&Transition>,
        rng: &mut SimRng,
    ) -> Result<Decision> {
        let (horizon, terminal) = effective_horizon(self.config.horizon, remaining);
        let plans = CandidatePlans::from_sequences(&(self.candidates)(horizon), terminal)?;
        let latent = vec![0.0; self.comp.model.latent_dim()];
        let c = plan_conditioned(self.comp, state, &latent, &plans, &self.config, rng)?;
        Ok(Decision {
            action: c.actions.into_iter().next().ok_or(Error::Empty("plan"))?,
            entropies: vec![weight_entropy(&c.weights)],
        })
    }

    fn n_bar(&self) -> usize {
        1
    }

    fn kappa(&self) -> f64 {
        self.config.kappa
    }
}
