//! Exact tabular Bayes-adaptive machinery: Dirichlet transition beliefs,
//! the belief-state MDP, and brute-force enumeration of the posterior
//! plan expectation, plus an adapter exposing the belief MDP to the
//! sampling planner.

use std::path::Path;

use ndarray::Array2;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::env::clip_action;
use crate::error::{Error, Result};
use crate::planner::{ActionPrior, TransitionModel};
use crate::SimRng;

/// Row-stochastic tolerance used by [`TabularMdp::validate`].
const ROW_TOL: f64 = 1e-12;

/// Largest enumeration [`exact_posterior_plan`] accepts.
pub const ENUMERATION_LIMIT: u128 = 10_000_000;

/// Finite MDP with known rewards.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TabularMdp {
    pub n_states: usize,
    pub n_actions: usize,
    /// `rewards[s][a]`.
    pub rewards: Vec<Vec<f64>>,
    /// `transitions[s][a][s']`.
    pub transitions: Vec<Vec<Vec<f64>>>,
}

impl TabularMdp {
    pub fn validate(&self) -> Result<()> {
        let shape_err = |what: &str| Err(Error::Format(format!("tabular mdp: {what}")));
        if self.n_states == 0 || self.n_actions == 0 {
            return shape_err("needs at least one state and one action");
        }
        if self.rewards.len() != self.n_states || self.transitions.len() != self.n_states {
            return shape_err("table row count differs from n_states");
        }
        for s in 0..self.n_states {
            if self.rewards[s].len() != self.n_actions || self.transitions[s].len() != self.n_actions {
                return shape_err("table column count differs from n_actions");
            }
            if self.rewards[s].iter().any(|r| !r.is_finite()) {
                return shape_err("non-finite reward");
            }
            for row in &self.transitions[s] {
                if row.len() != self.n_states || row.iter().any(|p| p.is_nan() || *p < 0.0) {
                    return shape_err("transition row has wrong length or negative entry");
                }
                if (row.iter().sum::<f64>() - 1.0).abs() > ROW_TOL {
                    return shape_err("transition row does not sum to 1");
                }
            }
        }
        Ok(())
    }

    pub fn from_json_str(text: &str) -> Result<Self> {
        let mdp: Self = serde_json::from_str(text)?;
        mdp.validate()?;
        Ok(mdp)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json_str(&std::fs::read_to_string(path)?)
    }

    /// Two states, two actions. Action 0 stays, action 1 tries to switch
    /// (succeeding with probability 0.8). Rewards favour acting in state 1.
    pub fn two_state_chain() -> Self {
        Self {
            n_states: 2,
            n_actions: 2,
            rewards: vec![vec![0.0, 0.2], vec![1.0, 0.5]],
            transitions: vec![
                vec![vec![1.0, 0.0], vec![0.2, 0.8]],
                vec![vec![0.0, 1.0], vec![0.8, 0.2]],
            ],
        }
    }

    fn check_sa(&self, s: usize, a: usize) -> Result<()> {
        if s >= self.n_states {
            return Err(Error::IndexOutOfRange {
                context: "state",
                index: s,
                len: self.n_states,
            });
        }
        if a >= self.n_actions {
            return Err(Error::IndexOutOfRange {
                context: "action",
                index: a,
                len: self.n_actions,
            });
        }
        Ok(())
    }
}

/// Independent Dirichlet beliefs over every transition row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DirichletBelief {
    pub n_states: usize,
    pub n_actions: usize,
    /// Flattened `alpha[s][a][s']`.
    pub alpha: Vec<f64>,
}

impl DirichletBelief {
    pub fn uniform(n_states: usize, n_actions: usize, value: f64) -> Result<Self> {
        if value.is_nan() || value <= 0.0 {
            return Err(Error::InvalidArgument(format!("Dirichlet parameters must be > 0, got {value}")));
        }
        Ok(Self {
            n_states,
            n_actions,
            alpha: vec![value; n_states * n_actions * n_states],
        })
    }

    pub fn from_flat(n_states: usize, n_actions: usize, alpha: Vec<f64>) -> Result<Self> {
        if alpha.len() != n_states * n_actions * n_states {
            return Err(Error::DimensionMismatch {
                context: "dirichlet alpha",
                expected: n_states * n_actions * n_states,
                got: alpha.len(),
            });
        }
        if alpha.iter().any(|a| a.is_nan() || *a <= 0.0) {
            return Err(Error::InvalidArgument("Dirichlet parameters must be > 0".into()));
        }
        Ok(Self {
            n_states,
            n_actions,
            alpha,
        })
    }

    fn offset(&self, s: usize, a: usize) -> usize {
        (s * self.n_actions + a) * self.n_states
    }

    fn check(&self, s: usize, a: usize, s_next: Option<usize>) -> Result<()> {
        let range = |context, index, len| {
            if index >= len {
                Err(Error::IndexOutOfRange { context, index, len })
            } else {
                Ok(())
            }
        };
        range("state", s, self.n_states)?;
        range("action", a, self.n_actions)?;
        if let Some(n) = s_next {
            range("next state", n, self.n_states)?;
        }
        Ok(())
    }

    pub fn row(&self, s: usize, a: usize) -> Result<&[f64]> {
        self.check(s, a, None)?;
        let o = self.offset(s, a);
        Ok(&self.alpha[o..o + self.n_states])
    }
}

/// Increments `α[s][a][s']` by one.
pub fn dirichlet_update(belief: &DirichletBelief, s: usize, a: usize, s_next: usize) -> Result<DirichletBelief> {
    belief.check(s, a, Some(s_next))?;
    let mut out = belief.clone();
    let o = out.offset(s, a);
    out.alpha[o + s_next] += 1.0;
    Ok(out)
}

/// Normalized `α[s][a]`.
pub fn posterior_predictive(belief: &DirichletBelief, s: usize, a: usize) -> Result<Vec<f64>> {
    let row = belief.row(s, a)?;
    let total: f64 = row.iter().sum();
    Ok(row.iter().map(|x| x / total).collect())
}

/// Successor hyper-states `((s', α + e_{s,a,s'}), p(s'))` of the belief MDP.
pub fn belief_mdp_transition(
    belief: &DirichletBelief,
    s: usize,
    a: usize,
) -> Result<Vec<((usize, DirichletBelief), f64)>> {
    let probs = posterior_predictive(belief, s, a)?;
    probs
        .into_iter()
        .enumerate()
        .filter(|(_, p)| *p > 0.0)
        .map(|(next, p)| Ok(((next, dirichlet_update(belief, s, a, next)?), p)))
        .collect()
}

/// Stochastic tabular policy `probs[s][a]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TabularPolicy {
    pub probs: Vec<Vec<f64>>,
}

impl TabularPolicy {
    pub fn uniform(n_states: usize, n_actions: usize) -> Self {
        Self {
            probs: vec![vec![1.0 / n_actions as f64; n_actions]; n_states],
        }
    }

    pub fn is_state_independent(&self) -> bool {
        self.probs.windows(2).all(|w| w[0] == w[1])
    }
}

/// Kahan-compensated accumulator.
#[derive(Debug, Clone, Copy, Default)]
struct Kahan {
    sum: f64,
    c: f64,
}

impl Kahan {
    fn add(&mut self, x: f64) {
        let y = x - self.c;
        let t = self.sum + y;
        self.c = (t - self.sum) - y;
        self.sum = t;
    }
}

/// Exact posterior over action sequences given optimality.
#[derive(Debug, Clone, PartialEq)]
pub struct ExactPlan {
    /// `action_probs[h][a] = P(a_h = a | O)`.
    pub action_probs: Vec<Vec<f64>>,
    /// `Σ_a P(a_h = a | O) · action_values[a]` per step.
    pub expected_actions: Vec<f64>,
    pub expected_first_action: f64,
    /// Number of enumerated action/outcome paths.
    pub terms: u64,
}

struct Enumerator<'a> {
    mdp: &'a TabularMdp,
    prior: &'a TabularPolicy,
    kappa: f64,
    gamma: f64,
    horizon: usize,
    /// `mass[h][a]`: total unnormalized posterior mass of paths with `a_h = a`.
    mass: Vec<Vec<Kahan>>,
    total: Kahan,
    terms: u64,
}

impl Enumerator<'_> {
    #[allow(clippy::too_many_arguments)]
    fn walk(
        &mut self,
        depth: usize,
        s: usize,
        belief: &DirichletBelief,
        prob: f64,
        ret: f64,
        discount: f64,
        actions: &mut Vec<usize>,
    ) -> Result<()> {
        if depth == self.horizon {
            let w = prob * (self.kappa * ret).exp();
            self.total.add(w);
            for (h, &a) in actions.iter().enumerate() {
                self.mass[h][a].add(w);
            }
            self.terms += 1;
            return Ok(());
        }
        for a in 0..self.mdp.n_actions {
            let pa = self.prior.probs[s][a];
            if pa == 0.0 {
                continue;
            }
            let r = self.mdp.rewards[s][a];
            actions.push(a);
            for ((next, next_belief), p) in belief_mdp_transition(belief, s, a)? {
                self.walk(
                    depth + 1,
                    next,
                    &next_belief,
                    prob * pa * p,
                    ret + discount * r,
                    discount * self.gamma,
                    actions,
                )?;
            }
            actions.pop();
        }
        Ok(())
    }
}

/// Exhaustive evaluation of `E[a_{0:H} | O]` where paths are weighted by
/// `p(τ) · exp(κ Σ_h γ^h r_h)` under the prior policy and the
/// belief-averaged (Bayes-adaptive) dynamics.
#[allow(clippy::too_many_arguments)]
pub fn exact_posterior_plan(
    mdp: &TabularMdp,
    belief: &DirichletBelief,
    s: usize,
    horizon: usize,
    kappa: f64,
    prior: &TabularPolicy,
    gamma: f64,
    action_values: &[f64],
) -> Result<ExactPlan> {
    mdp.check_sa(s, 0)?;
    if action_values.len() != mdp.n_actions {
        return Err(Error::DimensionMismatch {
            context: "action values",
            expected: mdp.n_actions,
            got: action_values.len(),
        });
    }
    if prior.probs.len() != mdp.n_states || prior.probs.iter().any(|r| r.len() != mdp.n_actions) {
        return Err(Error::Format("prior policy shape differs from the MDP".into()));
    }
    let per_step = (mdp.n_actions * mdp.n_states) as u128;
    let terms = (0..horizon).try_fold(1u128, |acc, _| acc.checked_mul(per_step));
    match terms {
        Some(t) if t <= ENUMERATION_LIMIT => {}
        other => {
            return Err(Error::EnumerationTooLarge {
                terms: other.unwrap_or(u128::MAX),
                limit: ENUMERATION_LIMIT,
            })
        }
    }
    let mut e = Enumerator {
        mdp,
        prior,
        kappa,
        gamma,
        horizon,
        mass: vec![vec![Kahan::default(); mdp.n_actions]; horizon],
        total: Kahan::default(),
        terms: 0,
    };
    e.walk(0, s, belief, 1.0, 0.0, 1.0, &mut Vec::with_capacity(horizon))?;
    let z = e.total.sum;
    let action_probs: Vec<Vec<f64>> = e
        .mass
        .iter()
        .map(|row| row.iter().map(|k| k.sum / z).collect())
        .collect();
    let expected_actions: Vec<f64> = action_probs
        .iter()
        .map(|p| p.iter().zip(action_values).map(|(p, v)| p * v).sum())
        .collect();
    Ok(ExactPlan {
        expected_first_action: expected_actions.first().copied().unwrap_or(0.0),
        action_probs,
        expected_actions,
        terms: e.terms,
    })
}

/// Self-normalized Monte-Carlo estimate of the first expected action with
/// its delta-method standard error, sampling paths from the prior policy
/// and belief-averaged dynamics.
#[allow(clippy::too_many_arguments)]
pub fn monte_carlo_first_action(
    mdp: &TabularMdp,
    belief: &DirichletBelief,
    s: usize,
    horizon: usize,
    kappa: f64,
    prior: &TabularPolicy,
    gamma: f64,
    action_values: &[f64],
    samples: usize,
    rng: &mut SimRng,
) -> Result<(f64, f64)> {
    mdp.check_sa(s, 0)?;
    let mut weights = Vec::with_capacity(samples);
    let mut firsts = Vec::with_capacity(samples);
    for _ in 0..samples {
        let mut b = belief.clone();
        let mut state = s;
        let (mut ret, mut discount) = (0.0, 1.0);
        let mut first = None;
        for _ in 0..horizon {
            let a = sample_categorical(&prior.probs[state], rng);
            first.get_or_insert(a);
            ret += discount * mdp.rewards[state][a];
            discount *= gamma;
            let next = sample_categorical(&posterior_predictive(&b, state, a)?, rng);
            let o = b.offset(state, a);
            b.alpha[o + next] += 1.0;
            state = next;
        }
        weights.push((kappa * ret).exp());
        firsts.push(first.map_or(0.0, |a| action_values[a]));
    }
    let total: f64 = weights.iter().sum();
    let est = weights.iter().zip(&firsts).map(|(w, a)| w * a).sum::<f64>() / total;
    Ok((est, crate::planner::snis_standard_error(&weights, &firsts)))
}

fn sample_categorical(probs: &[f64], rng: &mut SimRng) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (i, p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    probs.len() - 1
}

/// Index of the action value nearest to `x`.
fn decode_action(values: &[f64], x: f64) -> usize {
    values
        .iter()
        .enumerate()
        .min_by(|a, b| (a.1 - x).abs().total_cmp(&(b.1 - x).abs()))
        .map_or(0, |(i, _)| i)
}

/// The belief MDP as a planner model. State rows are `[s, α...]`, the
/// single action coordinate is decoded to the nearest of `action_values`,
/// and the latent is empty.
#[derive(Debug, Clone)]
pub struct BamdpModel<'a> {
    pub mdp: &'a TabularMdp,
    pub action_values: Vec<f64>,
}

impl BamdpModel<'_> {
    /// Planner state row for physical state `s` and belief `belief`.
    pub fn encode_state(&self, s: usize, belief: &DirichletBelief) -> Vec<f64> {
        std::iter::once(s as f64).chain(belief.alpha.iter().copied()).collect()
    }
}

impl TransitionModel for BamdpModel<'_> {
    fn state_dim(&self) -> usize {
        1 + self.mdp.n_states * self.mdp.n_actions * self.mdp.n_states
    }

    fn action_dim(&self) -> usize {
        1
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
        let ns = self.mdp.n_states;
        let na = self.mdp.n_actions;
        let mut next = states.clone();
        let mut rewards = Vec::with_capacity(states.nrows());
        for i in 0..states.nrows() {
            let s = states[(i, 0)] as usize;
            let a = decode_action(&self.action_values, actions[(i, 0)]);
            self.mdp.check_sa(s, a)?;
            let o = 1 + (s * na + a) * ns;
            let row: Vec<f64> = (0..ns).map(|k| states[(i, o + k)]).collect();
            let total: f64 = row.iter().sum();
            let probs: Vec<f64> = row.iter().map(|x| x / total).collect();
            let s_next = sample_categorical(&probs, rng);
            next[(i, 0)] = s_next as f64;
            next[(i, o + s_next)] += 1.0;
            rewards.push(self.mdp.rewards[s][a]);
        }
        Ok((next, rewards))
    }
}

/// A tabular policy proposing coded actions for `[s, ...]` state rows.
#[derive(Debug, Clone)]
pub struct TabularPrior {
    pub policy: TabularPolicy,
    pub action_values: Vec<f64>,
}

impl ActionPrior for TabularPrior {
    fn action_dim(&self) -> usize {
        1
    }

    fn sample_batch(&self, states: &Array2<f64>, noise_sigma: f64, rng: &mut SimRng) -> Result<Array2<f64>> {
        let mut out = Array2::zeros((states.nrows(), 1));
        for i in 0..states.nrows() {
            let s = states[(i, 0)] as usize;
            let a = sample_categorical(&self.policy.probs[s], rng);
            let noise = if noise_sigma > 0.0 {
                noise_sigma * crate::env::std_normal(rng)
            } else {
                0.0
            };
            out[(i, 0)] = clip_action(self.action_values[a] + noise);
        }
        Ok(out)
    }

    fn mean_batch(&self, states: &Array2<f64>) -> Result<Array2<f64>> {
        let mut out = Array2::zeros((states.nrows(), 1));
        for i in 0..states.nrows() {
            let s = states[(i, 0)] as usize;
            out[(i, 0)] = self.policy.probs[s]
                .iter()
                .zip(&self.action_values)
                .map(|(p, v)| p * v)
                .sum();
        }
        Ok(out)
    }
}
