//! Recurrent variational belief encoder `q(m | τ_:t)` and its ELBO
//! training loop, trained jointly with the ensemble decoder.
//!
//! At step `h` the encoder consumes `(s_h, a_{h−1}, r_{h−1})`, with the
//! previous action, reward and GRU hidden state initialised to zero at
//! `h = 0`. Each input is embedded by its own linear layer with ReLU, the
//! concatenation drives a GRU, and a linear head maps the hidden state to
//! the posterior mean and clamped log-variance.

use std::path::Path;

use diffnet::{
    adam_step, load_checkpoint, save_checkpoint, AdamHyper, AdamState, Bound, GaussianHead,
    GruCell, Linear, ParamStore, Tape, Var, LN_2PI, LOGVAR_MIN,
};
use ndarray::Array2;
use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, Trajectory, Transition};
use crate::env::std_normal;
use crate::error::{check_dim, Error, Result};
use crate::model::EnsembleModel;
use crate::train::{running_min, split_indices, EarlyStopping, Normalizer};
use crate::SimRng;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EncoderConfig {
    pub latent_dim: usize,
    pub state_embed: usize,
    pub action_embed: usize,
    pub reward_embed: usize,
    pub gru_hidden: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            latent_dim: 8,
            state_embed: 16,
            action_embed: 8,
            reward_embed: 4,
            gru_hidden: 32,
        }
    }
}

impl EncoderConfig {
    /// Full-size architecture (latent 16, embeddings 16/16/4, GRU 256).
    pub fn full_scale() -> Self {
        Self {
            latent_dim: 16,
            state_embed: 16,
            action_embed: 16,
            reward_embed: 4,
            gru_hidden: 256,
        }
    }
}

/// Diagonal-Gaussian posterior over the latent, plus the recurrent state
/// that produced it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BeliefParams {
    pub mu: Vec<f64>,
    pub log_var: Vec<f64>,
    #[serde(default)]
    pub hidden: Vec<f64>,
}

impl BeliefParams {
    /// The standard normal prior.
    pub fn standard(latent_dim: usize) -> Self {
        Self {
            mu: vec![0.0; latent_dim],
            log_var: vec![0.0; latent_dim],
            hidden: Vec::new(),
        }
    }

    /// A point mass at `mu`, represented with the clamp floor variance.
    pub fn point(mu: Vec<f64>) -> Self {
        let n = mu.len();
        Self {
            mu,
            log_var: vec![LOGVAR_MIN; n],
            hidden: Vec::new(),
        }
    }

    pub fn dim(&self) -> usize {
        self.mu.len()
    }

    pub fn std(&self) -> Vec<f64> {
        self.log_var.iter().map(|l| (0.5 * l).exp()).collect()
    }

    /// Reparameterized draw `μ + scale · σ ⊙ ε`.
    pub fn sample(&self, scale: f64, rng: &mut SimRng) -> LatentSample {
        let m = self
            .mu
            .iter()
            .zip(self.std())
            .map(|(mu, sd)| {
                let eps = std_normal(rng);
                mu + scale * sd * eps
            })
            .collect();
        LatentSample {
            m,
            source: self.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LatentSample {
    pub m: Vec<f64>,
    pub source: BeliefParams,
}

/// Closed-form `KL(q ‖ p)` between diagonal Gaussians.
pub fn kl_gaussian(q: &BeliefParams, p: &BeliefParams) -> Result<f64> {
    check_dim("kl latent", q.dim(), p.dim())?;
    let kl = q
        .mu
        .iter()
        .zip(&q.log_var)
        .zip(p.mu.iter().zip(&p.log_var))
        .map(|((mq, lq), (mp, lp))| {
            0.5 * (lp - lq + ((lq - lp).exp()) + (mq - mp).powi(2) / lp.exp() - 1.0)
        })
        .sum::<f64>();
    Ok(kl.max(0.0))
}

/// Per-step encoder inputs for a batch of sequences, as `B×d` matrices.
struct StepInputs {
    states: Array2<f64>,
    prev_actions: Array2<f64>,
    prev_rewards: Array2<f64>,
}

/// Posterior mean and log-variance at one step.
pub type MeanLogVar = (Vec<f64>, Vec<f64>);

#[derive(Debug, Clone)]
pub struct Encoder {
    pub config: EncoderConfig,
    pub state_dim: usize,
    pub action_dim: usize,
    pub store: ParamStore,
    /// Affine standardization of the concatenated `(s, a_prev, r_prev)` input.
    pub input_norm: Normalizer,
    state_embed: Linear,
    action_embed: Linear,
    reward_embed: Linear,
    gru: GruCell,
    head: Linear,
}

impl Encoder {
    pub fn new(state_dim: usize, action_dim: usize, config: EncoderConfig, rng: &mut SimRng) -> Self {
        let mut store = ParamStore::new();
        let state_embed = Linear::new(&mut store, "enc.state", state_dim, config.state_embed, rng);
        let action_embed = Linear::new(&mut store, "enc.action", action_dim, config.action_embed, rng);
        let reward_embed = Linear::new(&mut store, "enc.reward", 1, config.reward_embed, rng);
        let gru_in = config.state_embed + config.action_embed + config.reward_embed;
        let gru = GruCell::new(&mut store, "enc.gru", gru_in, config.gru_hidden, rng);
        let head = Linear::new(&mut store, "enc.head", config.gru_hidden, 2 * config.latent_dim, rng);
        Self {
            config,
            state_dim,
            action_dim,
            store,
            input_norm: Normalizer::identity(state_dim + action_dim + 1),
            state_embed,
            action_embed,
            reward_embed,
            gru,
            head,
        }
    }

    pub fn latent_dim(&self) -> usize {
        self.config.latent_dim
    }

    /// Content hash of the encoder parameters.
    pub fn checksum(&self) -> String {
        self.store.checksum()
    }

    /// Fits the input standardization on every observation the encoder
    /// would consume along `trajs`.
    pub fn fit_input_normalizer<'a>(&mut self, trajs: impl Iterator<Item = &'a Trajectory>) {
        let mut rows = Vec::new();
        for traj in trajs {
            let Some(last) = traj.last_state() else { continue };
            for h in 0..=traj.len() {
                let state = if h < traj.len() { &traj.transitions[h].state } else { last };
                let mut row = state.to_vec();
                if h == 0 {
                    row.extend(std::iter::repeat_n(0.0, self.action_dim + 1));
                } else {
                    let prev = &traj.transitions[h - 1];
                    row.extend(&prev.action);
                    row.push(prev.reward);
                }
                rows.push(row);
            }
        }
        if !rows.is_empty() {
            let width = self.state_dim + self.action_dim + 1;
            self.input_norm = Normalizer::fit(&crate::train::rows_to_array(&rows, width));
        }
    }

    /// Standardizes one block of columns `offset..offset + x.ncols()`.
    fn standardize(&self, x: &Array2<f64>, offset: usize) -> Array2<f64> {
        let mut out = x.clone();
        for mut row in out.rows_mut() {
            for (j, v) in row.iter_mut().enumerate() {
                *v = (*v - self.input_norm.mean[offset + j]) / self.input_norm.std[offset + j];
            }
        }
        out
    }

    pub fn initial_hidden(&self) -> Vec<f64> {
        vec![0.0; self.config.gru_hidden]
    }

    fn gaussian(&self) -> GaussianHead {
        GaussianHead::new(self.config.latent_dim)
    }

    /// One recurrent step on the tape: returns `(hidden', mu, log_var)`.
    fn step_on_tape(
        &self,
        tape: &mut Tape,
        p: &Bound,
        hidden: Var,
        input: &StepInputs,
    ) -> Result<(Var, Var, Var)> {
        let s = tape.leaf(self.standardize(&input.states, 0));
        let a = tape.leaf(self.standardize(&input.prev_actions, self.state_dim));
        let r = tape.leaf(self.standardize(&input.prev_rewards, self.state_dim + self.action_dim));
        let es = self.state_embed.forward(tape, p, s);
        let es = tape.relu(es);
        let ea = self.action_embed.forward(tape, p, a);
        let ea = tape.relu(ea);
        let er = self.reward_embed.forward(tape, p, r);
        let er = tape.relu(er);
        let x = tape.concat(&[es, ea, er]);
        let h = self.gru.forward(tape, p, x, hidden)?;
        let raw = self.head.forward(tape, p, h);
        let (mu, lv) = self.gaussian().split(tape, raw);
        Ok((h, mu, lv))
    }

    /// Runs the encoder over padded step inputs and returns `(mu, log_var)`
    /// nodes per step.
    fn forward_steps(&self, tape: &mut Tape, p: &Bound, steps: &[StepInputs]) -> Result<Vec<(Var, Var)>> {
        let batch = steps.first().map_or(0, |s| s.states.nrows());
        let mut h = tape.leaf(Array2::zeros((batch, self.config.gru_hidden)));
        let mut out = Vec::with_capacity(steps.len());
        for input in steps {
            let (h2, mu, lv) = self.step_on_tape(tape, p, h, input)?;
            h = h2;
            out.push((mu, lv));
        }
        Ok(out)
    }

    /// Builds step inputs `0..=max_step` for a batch of trajectories. Rows
    /// past the end of a trajectory are zero padding; causality keeps them
    /// from influencing earlier steps.
    fn step_inputs(&self, trajs: &[&Trajectory], max_step: usize) -> Result<Vec<StepInputs>> {
        let b = trajs.len();
        for t in trajs {
            if let Some(tr) = t.transitions.first() {
                check_dim("encoder state", self.state_dim, tr.state.len())?;
                check_dim("encoder action", self.action_dim, tr.action.len())?;
            }
        }
        let mut steps = Vec::with_capacity(max_step + 1);
        for h in 0..=max_step {
            let mut states = Array2::zeros((b, self.state_dim));
            let mut actions = Array2::zeros((b, self.action_dim));
            let mut rewards = Array2::zeros((b, 1));
            for (i, traj) in trajs.iter().enumerate() {
                let n = traj.len();
                if h < n {
                    states
                        .row_mut(i)
                        .assign(&ndarray::ArrayView1::from(&traj.transitions[h].state[..]));
                } else if h == n && n > 0 {
                    states
                        .row_mut(i)
                        .assign(&ndarray::ArrayView1::from(&traj.transitions[n - 1].next_state[..]));
                }
                if h >= 1 && h <= n {
                    let prev = &traj.transitions[h - 1];
                    actions.row_mut(i).assign(&ndarray::ArrayView1::from(&prev.action[..]));
                    rewards[(i, 0)] = prev.reward;
                }
            }
            steps.push(StepInputs {
                states,
                prev_actions: actions,
                prev_rewards: rewards,
            });
        }
        Ok(steps)
    }

    /// Advances the recurrent state by one observation.
    pub fn step(
        &self,
        hidden: &[f64],
        state: &[f64],
        prev_action: &[f64],
        prev_reward: f64,
    ) -> Result<BeliefParams> {
        check_dim("encoder hidden", self.config.gru_hidden, hidden.len())?;
        check_dim("encoder state", self.state_dim, state.len())?;
        check_dim("encoder action", self.action_dim, prev_action.len())?;
        let mut tape = Tape::new();
        let p = tape.bind(&self.store);
        let h = tape.row(hidden);
        let input = StepInputs {
            states: crate::train::row_vec(state),
            prev_actions: crate::train::row_vec(prev_action),
            prev_rewards: Array2::from_elem((1, 1), prev_reward),
        };
        let (h, mu, lv) = self.step_on_tape(&mut tape, &p, h, &input)?;
        Ok(BeliefParams {
            mu: tape.value(mu).iter().copied().collect(),
            log_var: tape.value(lv).iter().copied().collect(),
            hidden: tape.value(h).iter().copied().collect(),
        })
    }

    /// Posteriors for steps `0..=t` of the history `transitions` followed
    /// by `current_state`; `transitions` may be empty.
    pub fn encode(&self, transitions: &[Transition], current_state: &[f64]) -> Result<Vec<BeliefParams>> {
        let mut hidden = self.initial_hidden();
        let mut out = Vec::with_capacity(transitions.len() + 1);
        let zero_action = vec![0.0; self.action_dim];
        for h in 0..=transitions.len() {
            let state = if h < transitions.len() {
                &transitions[h].state
            } else {
                current_state
            };
            let (a, r) = if h == 0 {
                (&zero_action[..], 0.0)
            } else {
                (&transitions[h - 1].action[..], transitions[h - 1].reward)
            };
            let belief = self.step(&hidden, state, a, r)?;
            hidden.clone_from(&belief.hidden);
            out.push(belief);
        }
        Ok(out)
    }

    /// Posteriors for every step of a non-empty trajectory, including the
    /// state after its final transition (`len + 1` entries).
    pub fn encode_trajectory(&self, traj: &Trajectory) -> Result<Vec<BeliefParams>> {
        let last = traj.last_state().ok_or(Error::Empty("trajectory"))?;
        self.encode(&traj.transitions, last)
    }

    /// Batched posterior means and log-variances for whole trajectories:
    /// `result[i][h]` is the posterior at step `h` of trajectory `i`.
    pub fn encode_batch(&self, trajs: &[&Trajectory]) -> Result<Vec<Vec<MeanLogVar>>> {
        let max_len = trajs.iter().map(|t| t.len()).max().unwrap_or(0);
        let mut tape = Tape::new();
        let p = tape.bind(&self.store);
        let steps = self.step_inputs(trajs, max_len)?;
        let nodes = self.forward_steps(&mut tape, &p, &steps)?;
        let mut out: Vec<Vec<MeanLogVar>> =
            trajs.iter().map(|t| Vec::with_capacity(t.len() + 1)).collect();
        for (mu, lv) in nodes.iter() {
            let (mu, lv) = (tape.value(*mu), tape.value(*lv));
            for (i, traj) in trajs.iter().enumerate() {
                if out[i].len() <= traj.len() {
                    out[i].push((mu.row(i).to_vec(), lv.row(i).to_vec()));
                }
            }
        }
        Ok(out)
    }

    /// Posterior `(mu, log_var)` nodes (each `1 × latent_dim`) for steps
    /// `0..=len` of one trajectory, recorded on `tape`.
    pub fn posterior_on_tape(&self, tape: &mut Tape, p: &Bound, traj: &Trajectory) -> Result<Vec<(Var, Var)>> {
        let steps = self.step_inputs(&[traj], traj.len())?;
        self.forward_steps(tape, p, &steps)
    }

    /// Scalar test function `Σ_h Σ_d (μ_h + log σ²_h)` over a trajectory,
    /// recorded on `tape` for gradient checks.
    pub fn summary_loss(&self, tape: &mut Tape, p: &Bound, traj: &Trajectory) -> Result<Var> {
        let nodes = self.posterior_on_tape(tape, p, traj)?;
        let parts: Vec<Var> = nodes
            .iter()
            .map(|&(mu, lv)| {
                let both = tape.add(mu, lv);
                tape.sum(both)
            })
            .collect();
        let total = tape.concat(&parts);
        Ok(tape.sum(total))
    }

    pub fn save(&self, stem: &Path) -> Result<()> {
        let meta = serde_json::json!({
            "kind": "encoder",
            "config": self.config,
            "state_dim": self.state_dim,
            "action_dim": self.action_dim,
            "input_norm": self.input_norm,
        });
        save_checkpoint(stem, &self.store, None, meta)?;
        Ok(())
    }

    /// Restores parameters saved by [`Encoder::save`] into an encoder of the
    /// recorded architecture.
    pub fn load(stem: &Path) -> Result<Self> {
        let (store, manifest) = load_checkpoint(stem)?;
        let config: EncoderConfig = serde_json::from_value(manifest.extra["config"].clone())?;
        let dim = |k: &str| {
            manifest.extra[k]
                .as_u64()
                .map(|v| v as usize)
                .ok_or_else(|| Error::Format(format!("encoder sidecar lacks {k}")))
        };
        let mut enc = Encoder::new(dim("state_dim")?, dim("action_dim")?, config, &mut SimRng::seed_from_u64(0));
        if enc.store.len() != store.len() || enc.store.num_scalars() != store.num_scalars() {
            return Err(Error::Format("encoder checkpoint does not match its architecture".into()));
        }
        enc.store = store;
        if let Some(norm) = manifest.extra.get("input_norm") {
            enc.input_norm = serde_json::from_value(norm.clone())?;
        }
        Ok(enc)
    }
}

/// Incremental posterior tracking along a live episode.
#[derive(Debug, Clone)]
pub struct BeliefTracker<'a> {
    encoder: &'a Encoder,
    hidden: Vec<f64>,
    prev_action: Vec<f64>,
    prev_reward: f64,
}

impl<'a> BeliefTracker<'a> {
    pub fn new(encoder: &'a Encoder) -> Self {
        Self {
            encoder,
            hidden: encoder.initial_hidden(),
            prev_action: vec![0.0; encoder.action_dim],
            prev_reward: 0.0,
        }
    }

    /// Posterior after observing `state` (the transition that led here must
    /// already have been recorded with [`BeliefTracker::record`]).
    pub fn observe(&mut self, state: &[f64]) -> Result<BeliefParams> {
        let b = self
            .encoder
            .step(&self.hidden, state, &self.prev_action, self.prev_reward)?;
        self.hidden.clone_from(&b.hidden);
        Ok(b)
    }

    pub fn record(&mut self, action: &[f64], reward: f64) {
        self.prev_action = action.to_vec();
        self.prev_reward = reward;
    }
}

/// The three ELBO pieces at one time step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ElboTerms {
    pub reconstruction: f64,
    pub kl: f64,
    pub elbo: f64,
}

/// `Σ_{h=0}^{t} log p̂(Δs_h, r_h | s_h, a_h, m)`, averaged over the
/// decoder's active members.
pub fn reconstruction_log_likelihood(
    decoder: &EnsembleModel,
    traj: &Trajectory,
    t: usize,
    m: &[f64],
) -> Result<f64> {
    if t >= traj.len() {
        return Err(Error::IndexOutOfRange {
            context: "elbo time step",
            index: t,
            len: traj.len(),
        });
    }
    let members = decoder.elites.clone();
    let mut total = 0.0;
    for &k in &members {
        for tr in &traj.transitions[..=t] {
            let pred = decoder.predict(&tr.state, &tr.action, m, k)?;
            let target: Vec<f64> = tr
                .next_state
                .iter()
                .zip(&tr.state)
                .map(|(n, s)| n - s)
                .chain([tr.reward])
                .collect();
            total += gaussian_log_density(&target, &pred.mean, &pred.log_var);
        }
    }
    Ok(total / members.len() as f64)
}

pub(crate) fn gaussian_log_density(x: &[f64], mean: &[f64], log_var: &[f64]) -> f64 {
    x.iter()
        .zip(mean)
        .zip(log_var)
        .map(|((x, m), lv)| -0.5 * (LN_2PI + lv + (x - m).powi(2) / lv.exp()))
        .sum()
}

/// Single-sample ELBO at step `t`: reconstruction of transitions `0..=t`
/// under one reparameterized draw from the posterior at `t`, minus
/// `kl_weight` times the KL to the sequential prior (standard normal at
/// `t = 0`, the previous posterior afterwards).
pub fn elbo(
    encoder: &Encoder,
    decoder: &EnsembleModel,
    traj: &Trajectory,
    t: usize,
    kl_weight: f64,
    rng: &mut SimRng,
) -> Result<ElboTerms> {
    if t >= traj.len() {
        return Err(Error::IndexOutOfRange {
            context: "elbo time step",
            index: t,
            len: traj.len(),
        });
    }
    let beliefs = encoder.encode(&traj.transitions[..t], &traj.transitions[t].state)?;
    let q = &beliefs[t];
    let prior = if t == 0 {
        BeliefParams::standard(encoder.latent_dim())
    } else {
        beliefs[t - 1].clone()
    };
    let m = q.sample(1.0, rng).m;
    let reconstruction = reconstruction_log_likelihood(decoder, traj, t, &m)?;
    let kl = kl_gaussian(q, &prior)?;
    Ok(ElboTerms {
        reconstruction,
        kl,
        elbo: reconstruction - kl_weight * kl,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct VaeConfig {
    pub max_epochs: usize,
    pub steps_per_epoch: usize,
    /// Trajectories per minibatch.
    pub batch_trajectories: usize,
    /// Time steps `t` drawn per trajectory.
    pub steps_per_trajectory: usize,
    /// Reconstruction terms `h ≤ t` drawn per `(trajectory, t)` pair.
    pub recon_samples: usize,
    pub kl_weight: f64,
    pub optimizer: AdamHyper,
    pub val_frac: f64,
    pub patience: usize,
    pub seed: u64,
}

impl Default for VaeConfig {
    fn default() -> Self {
        Self {
            max_epochs: 60,
            steps_per_epoch: 40,
            batch_trajectories: 16,
            steps_per_trajectory: 4,
            recon_samples: 8,
            kl_weight: 0.1,
            optimizer: AdamHyper::default(),
            val_frac: 0.1,
            patience: 5,
            seed: 0,
        }
    }
}

/// Outcome of ELBO training; validation values are negative ELBO per
/// `(trajectory, t)` pair.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct VaeReport {
    pub train_curve: Vec<f64>,
    pub val_curve: Vec<f64>,
    pub best_val: f64,
    pub best_epoch: usize,
}

impl VaeReport {
    /// Best-so-far validation ELBO (negated loss), non-decreasing by construction.
    pub fn best_elbo_so_far(&self) -> Vec<f64> {
        running_min(&self.val_curve).into_iter().map(|l| -l).collect()
    }
}

/// One `(trajectory, t, h)` reconstruction sample with its estimator weight.
#[derive(Debug, Clone, Copy)]
struct ReconSample {
    traj: usize,
    t: usize,
    h: usize,
    weight: f64,
}

/// Draws the `(t, h)` pairs of one minibatch. Each reconstruction sum over
/// `h ≤ t` is estimated from `s` uniform draws scaled by `(t + 1) / s`.
fn draw_samples(
    lens: &[usize],
    steps_per_traj: usize,
    s: usize,
    rng: &mut SimRng,
) -> (Vec<(usize, usize)>, Vec<ReconSample>) {
    let mut pairs = Vec::new();
    let mut recon = Vec::new();
    for (b, &len) in lens.iter().enumerate() {
        for _ in 0..steps_per_traj {
            let t = rng.random_range(0..len);
            pairs.push((b, t));
            let weight = (t + 1) as f64 / s as f64;
            for _ in 0..s {
                recon.push(ReconSample {
                    traj: b,
                    t,
                    h: rng.random_range(0..=t),
                    weight,
                });
            }
        }
    }
    (pairs, recon)
}

/// Records the negative ELBO estimate for a minibatch on `tape`, using
/// `member` as the decoder for every reconstruction term.
#[allow(clippy::too_many_arguments)]
fn minibatch_loss(
    encoder: &Encoder,
    decoder: &EnsembleModel,
    member: usize,
    tape: &mut Tape,
    pe: &Bound,
    pd: &Bound,
    trajs: &[&Trajectory],
    pairs: &[(usize, usize)],
    recon: &[ReconSample],
    kl_weight: f64,
    rng: &mut SimRng,
) -> Result<Var> {
    let max_t = pairs.iter().map(|p| p.1).max().unwrap_or(0);
    let steps = encoder.step_inputs(trajs, max_t)?;
    let nodes = encoder.forward_steps(tape, pe, &steps)?;
    let ld = encoder.latent_dim();

    // Latents, grouped by t so each group is one gather from that step's posterior.
    let mut latent_parts = Vec::new();
    let mut inputs = Vec::new();
    let mut targets = Vec::new();
    let mut weights = Vec::new();
    for (t, &(mu, lv)) in nodes.iter().enumerate().take(max_t + 1) {
        let group: Vec<&ReconSample> = recon.iter().filter(|r| r.t == t).collect();
        if group.is_empty() {
            continue;
        }
        let rows: Vec<usize> = group.iter().map(|r| r.traj).collect();
        let mu = tape.rows(mu, &rows);
        let lv = tape.rows(lv, &rows);
        let half = tape.scale(lv, 0.5);
        let sd = tape.exp(half);
        let eps = Array2::from_shape_fn((rows.len(), ld), |_| std_normal(rng));
        let eps = tape.leaf(eps);
        let noise = tape.mul(sd, eps);
        latent_parts.push(tape.add(mu, noise));
        for r in group {
            let tr = &trajs[r.traj].transitions[r.h];
            inputs.push((tr.state.clone(), tr.action.clone()));
            targets.push(decoder.target_of(tr));
            weights.push(r.weight);
        }
    }
    let m = tape.stack(&latent_parts);
    let x = decoder.normalized_inputs(&inputs);
    let y = crate::train::rows_to_array(&targets, decoder.output_dim());
    let w = Array2::from_shape_vec((weights.len(), 1), weights).expect("weight column");
    let ll = decoder.member_log_likelihood(tape, pd, member, x, m, &y)?;
    let wv = tape.leaf(w);
    let weighted = tape.mul(ll, wv);
    let recon_total = tape.sum(weighted);

    let mut kl_parts = Vec::new();
    for t in 0..=max_t {
        let rows: Vec<usize> = pairs.iter().filter(|p| p.1 == t).map(|p| p.0).collect();
        if rows.is_empty() {
            continue;
        }
        let (mu, lv) = nodes[t];
        let (pmu, plv) = if t == 0 {
            let z = tape.leaf(Array2::zeros((trajs.len(), ld)));
            (z, z)
        } else {
            nodes[t - 1]
        };
        let kl = tape.kl_diagonal(mu, lv, pmu, plv);
        kl_parts.push(tape.rows(kl, &rows));
    }
    let kl = tape.stack(&kl_parts);
    let kl_total = tape.sum(kl);
    let kl_scaled = tape.scale(kl_total, kl_weight);
    let neg = tape.sub(kl_scaled, recon_total);
    Ok(tape.scale(neg, 1.0 / pairs.len() as f64))
}

/// Jointly maximizes the sequential ELBO over encoder and decoder. The
/// decoder and encoder input normalizers are fitted on the training split first.
/// Parameters from the epoch with the best validation ELBO are restored.
pub fn train_vae(
    encoder: &mut Encoder,
    decoder: &mut EnsembleModel,
    dataset: &Dataset,
    config: &VaeConfig,
) -> Result<VaeReport> {
    let usable: Vec<usize> = (0..dataset.trajectories.len())
        .filter(|&i| !dataset.trajectories[i].is_empty())
        .collect();
    if usable.is_empty() {
        return Err(Error::Empty("dataset"));
    }
    check_dim("vae state", encoder.state_dim, dataset.state_dim())?;
    check_dim("vae latent", encoder.latent_dim(), decoder.latent_dim)?;
    let mut rng = SimRng::seed_from_u64(config.seed);
    let (train_pos, val_pos) = split_indices(usable.len(), config.val_frac, &mut rng);
    let train: Vec<&Trajectory> = train_pos.iter().map(|&i| &dataset.trajectories[usable[i]]).collect();
    let val: Vec<&Trajectory> = val_pos.iter().map(|&i| &dataset.trajectories[usable[i]]).collect();
    decoder.fit_normalizer_on(train.iter().copied());
    encoder.fit_input_normalizer(train.iter().copied());

    // Fixed validation draws so the validation curve is comparable across epochs.
    let val_seed = rng.random::<u64>();
    let val_loss = |enc: &Encoder, dec: &EnsembleModel| -> Result<f64> {
        let mut vr = SimRng::seed_from_u64(val_seed);
        let lens: Vec<usize> = val.iter().map(|t| t.len()).collect();
        let (pairs, recon) = draw_samples(&lens, config.steps_per_trajectory, config.recon_samples, &mut vr);
        let mut total = 0.0;
        for &k in &dec.elites {
            let mut tape = Tape::new();
            let pe = tape.bind(&enc.store);
            let pd = tape.bind(&dec.members[k]);
            let l = minibatch_loss(enc, dec, k, &mut tape, &pe, &pd, &val, &pairs, &recon, config.kl_weight, &mut vr)?;
            total += tape.scalar(l);
        }
        Ok(total / dec.elites.len() as f64)
    };

    let mut report = VaeReport::default();
    let initial = val_loss(encoder, decoder)?;
    report.val_curve.push(initial);
    let mut stopper = EarlyStopping::new(initial, config.patience);
    let mut best = (encoder.store.clone(), decoder.members.clone());
    let mut enc_state = AdamState::new(&encoder.store);
    let mut dec_states: Vec<AdamState> = decoder.members.iter().map(AdamState::new).collect();
    let n_members = decoder.members.len();

    for epoch in 1..=config.max_epochs {
        let mut epoch_loss = 0.0;
        for _ in 0..config.steps_per_epoch {
            let batch: Vec<&Trajectory> = (0..config.batch_trajectories)
                .map(|_| *train.choose(&mut rng).expect("non-empty"))
                .collect();
            let lens: Vec<usize> = batch.iter().map(|t| t.len()).collect();
            let (pairs, recon) = draw_samples(&lens, config.steps_per_trajectory, config.recon_samples, &mut rng);
            let member = rng.random_range(0..n_members);
            let mut tape = Tape::new();
            let pe = tape.bind(&encoder.store);
            let pd = tape.bind(&decoder.members[member]);
            let loss = minibatch_loss(
                encoder, decoder, member, &mut tape, &pe, &pd, &batch, &pairs, &recon, config.kl_weight, &mut rng,
            )?;
            epoch_loss += tape.scalar(loss);
            let grads = tape.backward(loss)?;
            let ge = grads.for_params(&pe, &encoder.store);
            let gd = grads.for_params(&pd, &decoder.members[member]);
            adam_step(&mut encoder.store, &ge, &mut enc_state, &config.optimizer);
            adam_step(&mut decoder.members[member], &gd, &mut dec_states[member], &config.optimizer);
        }
        report.train_curve.push(epoch_loss / config.steps_per_epoch.max(1) as f64);
        let v = val_loss(encoder, decoder)?;
        report.val_curve.push(v);
        if stopper.observe(epoch, v) {
            best = (encoder.store.clone(), decoder.members.clone());
        }
        if stopper.should_stop() {
            break;
        }
    }
    encoder.store = best.0;
    decoder.members = best.1;
    report.best_val = stopper.best;
    report.best_epoch = stopper.best_epoch;
    Ok(report)
}

/// Second training stage: the encoder is only read while the decoder is
/// refit by maximum likelihood.
pub fn freeze_then_finetune(
    encoder: &Encoder,
    decoder: &mut EnsembleModel,
    dataset: &Dataset,
    config: &crate::model::MleConfig,
) -> Result<crate::model::MleReport> {
    crate::model::train_mle(decoder, dataset, encoder, config)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn kl_closed_forms() {
        let q = BeliefParams {
            mu: vec![1.0],
            log_var: vec![0.0],
            hidden: vec![],
        };
        let p = BeliefParams::standard(1);
        assert!((kl_gaussian(&q, &p).unwrap() - 0.5).abs() < 1e-12);
        let q = BeliefParams {
            mu: vec![0.0],
            log_var: vec![4f64.ln()],
            hidden: vec![],
        };
        let expected = 0.5 * (4.0 - 1.0 - 4f64.ln());
        assert!((kl_gaussian(&q, &p).unwrap() - expected).abs() < 1e-12);
        assert_eq!(kl_gaussian(&p, &p).unwrap(), 0.0);
    }

    #[test]
    fn estimator_weights_cover_prefix() {
        let mut rng = SimRng::seed_from_u64(4);
        let (pairs, recon) = draw_samples(&[5, 9], 3, 4, &mut rng);
        assert_eq!(pairs.len(), 6);
        assert_eq!(recon.len(), 24);
        for r in recon {
            assert!(r.h <= r.t);
            assert!((r.weight - (r.t + 1) as f64 / 4.0).abs() < 1e-15);
        }
    }
}
