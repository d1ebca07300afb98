//! Latent-conditioned probabilistic ensemble `p̂(s', r | s, a, m)`.
//!
//! Each member maps `[normalize(s, a), m]` to a diagonal Gaussian over the
//! state delta and the reward. Only elite members are used for
//! prediction and sampling.

use std::path::Path;

use diffnet::{
    adam_step, load_checkpoint, save_checkpoint, AdamHyper, AdamState, Bound, GaussianHead, Mlp,
    MlpConfig, ParamStore, Tape, Var,
};
use ndarray::{s, Array2};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use serde::{Deserialize, Serialize};

use crate::belief::Encoder;
use crate::data::{Dataset, Trajectory, Transition};
use crate::env::std_normal;
use crate::error::{check_dim, Error, Result};
use crate::train::{batches_per_epoch, rows_to_array, split_indices, EarlyStopping, Normalizer};
use crate::SimRng;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EnsembleConfig {
    pub n_members: usize,
    pub n_elites: usize,
    pub hidden: Vec<usize>,
    pub skip: bool,
}

impl Default for EnsembleConfig {
    fn default() -> Self {
        Self {
            n_members: 7,
            n_elites: 5,
            hidden: vec![64, 64],
            skip: true,
        }
    }
}

impl EnsembleConfig {
    /// Full-size ensemble: 20 members, 14 elites, four 200-unit layers.
    pub fn full_scale() -> Self {
        Self {
            n_members: 20,
            n_elites: 14,
            hidden: vec![200; 4],
            skip: true,
        }
    }
}

/// Gaussian over `(Δs, r)`.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianPrediction {
    pub mean: Vec<f64>,
    pub log_var: Vec<f64>,
}

impl GaussianPrediction {
    pub fn next_state_mean(&self, state: &[f64]) -> Vec<f64> {
        state.iter().zip(&self.mean).map(|(s, d)| s + d).collect()
    }

    pub fn reward_mean(&self) -> f64 {
        *self.mean.last().expect("prediction includes reward")
    }
}

#[derive(Debug, Clone)]
pub struct EnsembleModel {
    pub config: EnsembleConfig,
    pub state_dim: usize,
    pub action_dim: usize,
    pub latent_dim: usize,
    pub members: Vec<ParamStore>,
    pub nets: Vec<Mlp>,
    pub elites: Vec<usize>,
    /// Statistics of the `(s, a)` inputs; the latent is passed through raw.
    pub normalizer: Normalizer,
}

impl EnsembleModel {
    pub fn new(
        state_dim: usize,
        action_dim: usize,
        latent_dim: usize,
        config: EnsembleConfig,
        rng: &mut SimRng,
    ) -> Result<Self> {
        if config.n_members == 0 || config.n_elites == 0 || config.n_elites > config.n_members {
            return Err(Error::InvalidArgument(format!(
                "need 1 ≤ elites ({}) ≤ members ({})",
                config.n_elites, config.n_members
            )));
        }
        let in_dim = state_dim + action_dim + latent_dim;
        let out = GaussianHead::new(state_dim + 1).raw_dim();
        let mut members = Vec::with_capacity(config.n_members);
        let mut nets = Vec::with_capacity(config.n_members);
        for k in 0..config.n_members {
            let mut store = ParamStore::new();
            let cfg = MlpConfig::new(in_dim, &config.hidden, out).with_skip(config.skip);
            nets.push(Mlp::new(&mut store, &format!("member{k}"), cfg, rng));
            members.push(store);
        }
        Ok(Self {
            elites: (0..config.n_members).collect(),
            config,
            state_dim,
            action_dim,
            latent_dim,
            members,
            nets,
            normalizer: Normalizer::identity(state_dim + action_dim),
        })
    }

    pub fn output_dim(&self) -> usize {
        self.state_dim + 1
    }

    fn head(&self) -> GaussianHead {
        GaussianHead::new(self.output_dim())
    }

    /// Regression target `(s' − s, r)` of a transition.
    pub fn target_of(&self, tr: &Transition) -> Vec<f64> {
        tr.next_state
            .iter()
            .zip(&tr.state)
            .map(|(n, s)| n - s)
            .chain([tr.reward])
            .collect()
    }

    pub fn fit_normalizer(&mut self, dataset: &Dataset) {
        self.fit_normalizer_on(dataset.trajectories.iter());
    }

    pub fn fit_normalizer_on<'a>(&mut self, trajs: impl Iterator<Item = &'a Trajectory>) {
        let rows: Vec<Vec<f64>> = trajs
            .flat_map(|t| t.transitions.iter())
            .map(|tr| tr.state.iter().chain(&tr.action).copied().collect())
            .collect();
        if !rows.is_empty() {
            self.normalizer = Normalizer::fit(&rows_to_array(&rows, self.state_dim + self.action_dim));
        }
    }

    /// Normalized `(s, a)` rows.
    pub fn normalized_inputs(&self, pairs: &[(Vec<f64>, Vec<f64>)]) -> Array2<f64> {
        let rows: Vec<Vec<f64>> = pairs
            .iter()
            .map(|(s, a)| s.iter().chain(a).copied().collect())
            .collect();
        self.normalizer
            .normalize(&rows_to_array(&rows, self.state_dim + self.action_dim))
    }

    fn normalize_batch(&self, states: &Array2<f64>, actions: &Array2<f64>) -> Array2<f64> {
        let joined = ndarray::concatenate![ndarray::Axis(1), *states, *actions];
        self.normalizer.normalize(&joined)
    }

    /// Per-row log density `n×1` of targets `y` under `member`, recorded on
    /// `tape`. `x` holds normalized `(s, a)` rows and `m` the latents.
    pub fn member_log_likelihood(
        &self,
        tape: &mut Tape,
        p: &Bound,
        member: usize,
        x: Array2<f64>,
        m: Var,
        y: &Array2<f64>,
    ) -> Result<Var> {
        let xv = tape.leaf(x);
        let input = tape.concat(&[xv, m]);
        let raw = self.nets[member].forward(tape, p, input)?;
        let (mean, lv) = self.head().split(tape, raw);
        let yv = tape.leaf(y.clone());
        let ld = tape.gaussian_log_density(yv, mean, lv);
        Ok(tape.row_sum(ld))
    }

    /// Mean negative log-likelihood of a batch under `member`, for training
    /// and gradient checks.
    pub fn member_nll(
        &self,
        tape: &mut Tape,
        p: &Bound,
        member: usize,
        x: Array2<f64>,
        latents: Array2<f64>,
        y: &Array2<f64>,
    ) -> Result<Var> {
        let m = tape.leaf(latents);
        let ll = self.member_log_likelihood(tape, p, member, x, m, y)?;
        let mean = tape.mean(ll);
        Ok(tape.scale(mean, -1.0))
    }

    /// Mean and clamped log-variance of `member` on a batch, broadcasting one latent.
    pub fn predict_batch(
        &self,
        member: usize,
        states: &Array2<f64>,
        actions: &Array2<f64>,
        latent: &[f64],
    ) -> Result<(Array2<f64>, Array2<f64>)> {
        check_dim("model state", self.state_dim, states.ncols())?;
        check_dim("model action", self.action_dim, actions.ncols())?;
        check_dim("model latent", self.latent_dim, latent.len())?;
        let n = states.nrows();
        let mut input = Array2::zeros((n, self.state_dim + self.action_dim + self.latent_dim));
        input
            .slice_mut(s![.., ..self.state_dim + self.action_dim])
            .assign(&self.normalize_batch(states, actions));
        for mut row in input.rows_mut() {
            for (dst, &v) in row.iter_mut().skip(self.state_dim + self.action_dim).zip(latent) {
                *dst = v;
            }
        }
        let raw = self.nets[member].eval(&self.members[member], &input)?;
        let d = self.output_dim();
        let mean = raw.slice(s![.., ..d]).to_owned();
        let lv = raw
            .slice(s![.., d..])
            .mapv(|v| v.clamp(diffnet::LOGVAR_MIN, diffnet::LOGVAR_MAX));
        Ok((mean, lv))
    }

    /// Gaussian prediction of an elite member for one `(s, a, m)`.
    pub fn predict(&self, s: &[f64], a: &[f64], m: &[f64], member: usize) -> Result<GaussianPrediction> {
        if !self.elites.contains(&member) {
            return Err(Error::InvalidArgument(format!("member {member} is not an elite")));
        }
        check_dim("model state", self.state_dim, s.len())?;
        check_dim("model action", self.action_dim, a.len())?;
        let (mean, lv) = self.predict_batch(
            member,
            &crate::train::row_vec(s),
            &crate::train::row_vec(a),
            m,
        )?;
        Ok(GaussianPrediction {
            mean: mean.iter().copied().collect(),
            log_var: lv.iter().copied().collect(),
        })
    }

    /// Samples `(s', r)` for every row from `member`.
    pub fn sample_member_batch(
        &self,
        member: usize,
        states: &Array2<f64>,
        actions: &Array2<f64>,
        latent: &[f64],
        rng: &mut SimRng,
    ) -> Result<(Array2<f64>, Vec<f64>)> {
        let (mean, lv) = self.predict_batch(member, states, actions, latent)?;
        Ok(self.draw(states, &mean, &lv, rng))
    }

    fn draw(&self, states: &Array2<f64>, mean: &Array2<f64>, lv: &Array2<f64>, rng: &mut SimRng) -> (Array2<f64>, Vec<f64>) {
        let ds = self.state_dim;
        let mut next = states.clone();
        let mut rewards = Vec::with_capacity(states.nrows());
        for i in 0..states.nrows() {
            for j in 0..=ds {
                let eps = std_normal(rng);
                let v = mean[(i, j)] + (0.5 * lv[(i, j)]).exp() * eps;
                if j < ds {
                    next[(i, j)] += v;
                } else {
                    rewards.push(v);
                }
            }
        }
        (next, rewards)
    }

    /// Samples `(s', r)` per row, each row from an elite drawn uniformly.
    pub fn sample_batch(
        &self,
        states: &Array2<f64>,
        actions: &Array2<f64>,
        latent: &[f64],
        rng: &mut SimRng,
    ) -> Result<(Array2<f64>, Vec<f64>)> {
        let n = states.nrows();
        let choice: Vec<usize> = (0..n).map(|_| rng.random_range(0..self.elites.len())).collect();
        let ds = self.state_dim;
        let mut mean = Array2::zeros((n, ds + 1));
        let mut lv = Array2::zeros((n, ds + 1));
        for (e, &k) in self.elites.iter().enumerate() {
            let rows: Vec<usize> = (0..n).filter(|&i| choice[i] == e).collect();
            if rows.is_empty() {
                continue;
            }
            let (m, l) = self.predict_batch(
                k,
                &states.select(ndarray::Axis(0), &rows),
                &actions.select(ndarray::Axis(0), &rows),
                latent,
            )?;
            for (r, &i) in rows.iter().enumerate() {
                mean.row_mut(i).assign(&m.row(r));
                lv.row_mut(i).assign(&l.row(r));
            }
        }
        Ok(self.draw(states, &mean, &lv, rng))
    }

    /// Draws an elite uniformly, then `(s', r)` from its Gaussian.
    pub fn sample_transition(
        &self,
        s: &[f64],
        a: &[f64],
        m: &[f64],
        rng: &mut SimRng,
    ) -> Result<(Vec<f64>, f64, usize)> {
        let member = self.elites[rng.random_range(0..self.elites.len())];
        let (next, r) = self.sample_member_batch(
            member,
            &crate::train::row_vec(s),
            &crate::train::row_vec(a),
            m,
            rng,
        )?;
        Ok((next.iter().copied().collect(), r[0], member))
    }

    pub fn checksum(&self) -> String {
        let joined: String = self.members.iter().map(ParamStore::checksum).collect();
        joined
    }

    /// Saves every member as `<dir>/member<k>` plus `<dir>/ensemble.json`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        for (k, store) in self.members.iter().enumerate() {
            save_checkpoint(&dir.join(format!("member{k}")), store, Some(AdamHyper::default()), serde_json::Value::Null)?;
        }
        let sidecar = serde_json::json!({
            "config": self.config,
            "state_dim": self.state_dim,
            "action_dim": self.action_dim,
            "latent_dim": self.latent_dim,
            "elites": self.elites,
            "normalizer": self.normalizer,
        });
        std::fs::write(dir.join("ensemble.json"), serde_json::to_vec_pretty(&sidecar)?)?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let sidecar: serde_json::Value = serde_json::from_slice(&std::fs::read(dir.join("ensemble.json"))?)?;
        let config: EnsembleConfig = serde_json::from_value(sidecar["config"].clone())?;
        let dim = |k: &str| {
            sidecar[k]
                .as_u64()
                .map(|v| v as usize)
                .ok_or_else(|| Error::Format(format!("ensemble sidecar lacks {k}")))
        };
        let mut model = Self::new(
            dim("state_dim")?,
            dim("action_dim")?,
            dim("latent_dim")?,
            config,
            &mut SimRng::seed_from_u64(0),
        )?;
        for k in 0..model.members.len() {
            let (store, _) = load_checkpoint(&dir.join(format!("member{k}")))?;
            if store.num_scalars() != model.members[k].num_scalars() {
                return Err(Error::Format(format!("member {k} does not match its architecture")));
            }
            model.members[k] = store;
        }
        model.elites = serde_json::from_value(sidecar["elites"].clone())?;
        model.normalizer = serde_json::from_value(sidecar["normalizer"].clone())?;
        if model.elites.iter().any(|&e| e >= model.members.len()) || !model.normalizer.is_valid() {
            return Err(Error::Format("ensemble sidecar is inconsistent".into()));
        }
        Ok(model)
    }
}

/// Indices of the `k` smallest losses in ascending loss order; ties go to
/// the lower index.
pub fn select_elites(val_losses: &[f64], k: usize) -> Result<Vec<usize>> {
    if k == 0 || k > val_losses.len() {
        return Err(Error::InvalidArgument(format!(
            "elite count {k} outside 1..={}",
            val_losses.len()
        )));
    }
    let mut idx: Vec<usize> = (0..val_losses.len()).collect();
    idx.sort_by(|&a, &b| val_losses[a].total_cmp(&val_losses[b]).then(a.cmp(&b)));
    idx.truncate(k);
    Ok(idx)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MleConfig {
    pub max_epochs: usize,
    pub batch: usize,
    /// Segment length; every trajectory must be at least this long.
    pub horizon: usize,
    pub val_frac: f64,
    pub patience: usize,
    pub optimizer: AdamHyper,
    /// Cap on minibatches per epoch (`None` sweeps the bootstrap sample once).
    pub max_steps_per_epoch: Option<usize>,
    pub seed: u64,
}

impl Default for MleConfig {
    fn default() -> Self {
        Self {
            max_epochs: 200,
            batch: 64,
            horizon: 4,
            val_frac: 0.1,
            patience: 5,
            optimizer: AdamHyper::default(),
            max_steps_per_epoch: Some(100),
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MleReport {
    /// Best validation NLL per member.
    pub val_losses: Vec<f64>,
    /// Validation NLL per member per epoch (entry 0 before training).
    pub val_curves: Vec<Vec<f64>>,
    pub train_curves: Vec<Vec<f64>>,
    pub elites: Vec<usize>,
}

/// Per-step training samples with their frozen posteriors.
struct StepSamples {
    inputs: Array2<f64>,
    targets: Array2<f64>,
    mu: Array2<f64>,
    sd: Array2<f64>,
}

impl StepSamples {
    fn build(model: &EnsembleModel, encoder: &Encoder, trajs: &[&Trajectory]) -> Result<Self> {
        let posteriors = if trajs.is_empty() {
            Vec::new()
        } else {
            encoder.encode_batch(trajs)?
        };
        let mut pairs = Vec::new();
        let mut targets = Vec::new();
        let mut mus = Vec::new();
        let mut sds = Vec::new();
        for (traj, post) in trajs.iter().zip(&posteriors) {
            for (h, tr) in traj.transitions.iter().enumerate() {
                pairs.push((tr.state.clone(), tr.action.clone()));
                targets.push(model.target_of(tr));
                mus.push(post[h].0.clone());
                sds.push(post[h].1.iter().map(|l| (0.5 * l).exp()).collect());
            }
        }
        Ok(Self {
            inputs: model.normalized_inputs(&pairs),
            targets: rows_to_array(&targets, model.output_dim()),
            mu: rows_to_array(&mus, model.latent_dim),
            sd: rows_to_array(&sds, model.latent_dim),
        })
    }

    fn len(&self) -> usize {
        self.inputs.nrows()
    }

    fn latents(&self, rows: &[usize], rng: &mut SimRng) -> Array2<f64> {
        let mut m = self.mu.select(ndarray::Axis(0), rows);
        let sd = self.sd.select(ndarray::Axis(0), rows);
        for (v, s) in m.iter_mut().zip(sd.iter()) {
            *v += s * std_normal(rng);
        }
        m
    }
}

fn member_val_nll(model: &EnsembleModel, k: usize, val: &StepSamples, latents: &Array2<f64>) -> Result<f64> {
    let mut tape = Tape::new();
    let p = tape.bind(&model.members[k]);
    let l = model.member_nll(&mut tape, &p, k, val.inputs.clone(), latents.clone(), &val.targets)?;
    Ok(tape.scalar(l))
}

/// The validation split and fixed latent draws used by [`train_mle`].
fn mle_split<'a>(
    dataset: &'a Dataset,
    config: &MleConfig,
) -> Result<(Vec<&'a Trajectory>, Vec<&'a Trajectory>, SimRng)> {
    if dataset.is_empty() {
        return Err(Error::Empty("dataset"));
    }
    let shortest = dataset.shortest_trajectory();
    if config.horizon > shortest {
        return Err(Error::InvalidArgument(format!(
            "segment horizon {} exceeds shortest trajectory ({shortest})",
            config.horizon
        )));
    }
    let mut rng = SimRng::seed_from_u64(config.seed);
    let (tr, va) = split_indices(dataset.trajectories.len(), config.val_frac, &mut rng);
    let train = tr.iter().map(|&i| &dataset.trajectories[i]).collect();
    let val = va.iter().map(|&i| &dataset.trajectories[i]).collect();
    Ok((train, val, rng))
}

/// Validation NLL of every member on the split [`train_mle`] would use
/// with the same config.
pub fn validation_nll(
    model: &EnsembleModel,
    dataset: &Dataset,
    encoder: &Encoder,
    config: &MleConfig,
) -> Result<Vec<f64>> {
    let (_, val, mut rng) = mle_split(dataset, config)?;
    let val = StepSamples::build(model, encoder, &val)?;
    let all: Vec<usize> = (0..val.len()).collect();
    let latents = val.latents(&all, &mut SimRng::seed_from_u64(rng.random()));
    (0..model.members.len())
        .map(|k| member_val_nll(model, k, &val, &latents))
        .collect()
}

/// Maximum-likelihood refit of every member on its own bootstrap sample,
/// with latents drawn from the frozen encoder's posterior at each step.
/// Each member keeps the parameters of its best validation epoch; elites
/// are then re-selected. The input normalizer is left as is.
pub fn train_mle(
    model: &mut EnsembleModel,
    dataset: &Dataset,
    encoder: &Encoder,
    config: &MleConfig,
) -> Result<MleReport> {
    check_dim("mle latent", model.latent_dim, encoder.latent_dim())?;
    let (train, val, mut rng) = mle_split(dataset, config)?;
    let train = StepSamples::build(model, encoder, &train)?;
    let val = StepSamples::build(model, encoder, &val)?;
    let all_val: Vec<usize> = (0..val.len()).collect();
    let val_latents = val.latents(&all_val, &mut SimRng::seed_from_u64(rng.random()));

    let mut report = MleReport::default();
    for k in 0..model.members.len() {
        let initial = member_val_nll(model, k, &val, &val_latents)?;
        let mut val_curve = vec![initial];
        let mut train_curve = Vec::new();
        if config.max_epochs > 0 {
            let boot: Vec<usize> = (0..train.len()).map(|_| rng.random_range(0..train.len())).collect();
            let mut stopper = EarlyStopping::new(initial, config.patience);
            let mut best = model.members[k].clone();
            let mut state = AdamState::new(&model.members[k]);
            let steps = batches_per_epoch(boot.len(), config.batch, config.max_steps_per_epoch);
            let mut order = boot.clone();
            for epoch in 1..=config.max_epochs {
                order.shuffle(&mut rng);
                let mut total = 0.0;
                for chunk in order.chunks(config.batch.max(1)).take(steps) {
                    let latents = train.latents(chunk, &mut rng);
                    let x = train.inputs.select(ndarray::Axis(0), chunk);
                    let y = train.targets.select(ndarray::Axis(0), chunk);
                    let mut tape = Tape::new();
                    let p = tape.bind(&model.members[k]);
                    let loss = model.member_nll(&mut tape, &p, k, x, latents, &y)?;
                    total += tape.scalar(loss);
                    let g = tape.backward(loss)?.for_params(&p, &model.members[k]);
                    adam_step(&mut model.members[k], &g, &mut state, &config.optimizer);
                }
                train_curve.push(total / steps as f64);
                let v = member_val_nll(model, k, &val, &val_latents)?;
                val_curve.push(v);
                if stopper.observe(epoch, v) {
                    best = model.members[k].clone();
                }
                if stopper.should_stop() {
                    break;
                }
            }
            model.members[k] = best;
            report.val_losses.push(stopper.best);
        } else {
            report.val_losses.push(initial);
        }
        report.val_curves.push(val_curve);
        report.train_curves.push(train_curve);
    }
    if config.max_epochs > 0 {
        model.elites = select_elites(&report.val_losses, model.config.n_elites)?;
    }
    report.elites = model.elites.clone();
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn elites_sorted_by_loss_with_index_ties() {
        assert_eq!(select_elites(&[3.0, 1.0, 2.0], 2).unwrap(), vec![1, 2]);
        assert_eq!(select_elites(&[1.0, 1.0, 2.0], 1).unwrap(), vec![0]);
        assert_eq!(select_elites(&[5.0, 4.0, 3.0], 3).unwrap(), vec![2, 1, 0]);
        assert!(select_elites(&[1.0], 0).is_err());
        assert!(select_elites(&[1.0], 2).is_err());
    }

    #[test]
    fn zero_member_predicts_identity() {
        let mut rng = SimRng::seed_from_u64(0);
        let mut m = EnsembleModel::new(2, 1, 1, EnsembleConfig::default(), &mut rng).unwrap();
        m.members[0].zero();
        let p = m.predict(&[0.3, -0.4], &[0.5], &[1.0], 0).unwrap();
        assert_eq!(p.next_state_mean(&[0.3, -0.4]), vec![0.3, -0.4]);
        assert_eq!(p.log_var, vec![0.0; 3]);
    }

    #[test]
    fn non_elite_member_is_rejected() {
        let mut rng = SimRng::seed_from_u64(0);
        let mut m = EnsembleModel::new(2, 1, 0, EnsembleConfig::default(), &mut rng).unwrap();
        m.elites = vec![0, 1];
        assert!(m.predict(&[0.0, 0.0], &[0.0], &[], 5).is_err());
    }
}
