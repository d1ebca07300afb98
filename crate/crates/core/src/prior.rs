//! Offline-learned components consumed by the planner: a behaviour-cloned
//! Gaussian prior policy and a Monte-Carlo regression value function.

use std::path::Path;

use diffnet::{
    adam_step, load_checkpoint, save_checkpoint, AdamHyper, AdamState, Bound, GaussianHead, Mlp,
    MlpConfig, ParamStore, Tape, Var,
};
use ndarray::{s, Array2};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, Trajectory};
use crate::env::{clip_action, std_normal, Policy};
use crate::error::{check_dim, Error, Result};
use crate::train::{batches_per_epoch, rows_to_array, split_indices, EarlyStopping, Normalizer, TrainReport};
use crate::SimRng;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FitConfig {
    pub hidden: Vec<usize>,
    pub max_epochs: usize,
    pub batch: usize,
    pub val_frac: f64,
    pub patience: usize,
    pub optimizer: AdamHyper,
    pub max_steps_per_epoch: Option<usize>,
    pub seed: u64,
}

impl Default for FitConfig {
    fn default() -> Self {
        Self {
            hidden: vec![64, 64],
            max_epochs: 100,
            batch: 64,
            val_frac: 0.1,
            patience: 5,
            optimizer: AdamHyper::default().with_weight_decay(0.0),
            max_steps_per_epoch: Some(100),
            seed: 0,
        }
    }
}

/// Generic supervised loop: minibatch Adam on rows `(x, y)` with early
/// stopping on a trajectory-level validation split and best-epoch restore.
#[allow(clippy::too_many_arguments)]
fn fit_rows<F>(
    store: &mut ParamStore,
    x: &Array2<f64>,
    y: &Array2<f64>,
    train_rows: &[usize],
    val_rows: &[usize],
    config: &FitConfig,
    rng: &mut SimRng,
    loss: F,
) -> Result<TrainReport>
where
    F: Fn(&mut Tape, &Bound, Array2<f64>, Array2<f64>) -> Result<Var>,
{
    let eval = |store: &ParamStore| -> Result<f64> {
        let mut tape = Tape::new();
        let p = tape.bind(store);
        let l = loss(
            &mut tape,
            &p,
            x.select(ndarray::Axis(0), val_rows),
            y.select(ndarray::Axis(0), val_rows),
        )?;
        Ok(tape.scalar(l))
    };
    let mut report = TrainReport::default();
    let initial = eval(store)?;
    report.val_curve.push(initial);
    let mut stopper = EarlyStopping::new(initial, config.patience);
    let mut best = store.clone();
    let mut state = AdamState::new(store);
    let steps = batches_per_epoch(train_rows.len(), config.batch, config.max_steps_per_epoch);
    let mut order = train_rows.to_vec();
    for epoch in 1..=config.max_epochs {
        order.shuffle(rng);
        let mut total = 0.0;
        for chunk in order.chunks(config.batch.max(1)).take(steps) {
            let mut tape = Tape::new();
            let p = tape.bind(store);
            let l = loss(
                &mut tape,
                &p,
                x.select(ndarray::Axis(0), chunk),
                y.select(ndarray::Axis(0), chunk),
            )?;
            total += tape.scalar(l);
            let g = tape.backward(l)?.for_params(&p, store);
            adam_step(store, &g, &mut state, &config.optimizer);
        }
        report.train_curve.push(total / steps as f64);
        let v = eval(store)?;
        report.val_curve.push(v);
        if stopper.observe(epoch, v) {
            best = store.clone();
        }
        if stopper.should_stop() {
            break;
        }
    }
    *store = best;
    report.best_val = stopper.best;
    report.best_epoch = stopper.best_epoch;
    Ok(report)
}

/// Row indices of every transition, split by trajectory.
fn transition_split(dataset: &Dataset, val_frac: f64, rng: &mut SimRng) -> (Vec<usize>, Vec<usize>) {
    let mut offsets = Vec::with_capacity(dataset.trajectories.len());
    let mut acc = 0;
    for t in &dataset.trajectories {
        offsets.push(acc..acc + t.len());
        acc += t.len();
    }
    let (tr, va) = split_indices(dataset.trajectories.len(), val_frac, rng);
    let expand = |ids: &[usize]| ids.iter().flat_map(|&i| offsets[i].clone()).collect::<Vec<_>>();
    (expand(&tr), expand(&va))
}

/// Gaussian policy with a tanh-squashed mean.
#[derive(Debug, Clone)]
pub struct PriorPolicy {
    pub state_dim: usize,
    pub action_dim: usize,
    pub net: Mlp,
    pub store: ParamStore,
    pub normalizer: Normalizer,
}

impl PriorPolicy {
    pub fn new(state_dim: usize, action_dim: usize, hidden: &[usize], rng: &mut SimRng) -> Self {
        let mut store = ParamStore::new();
        let head = GaussianHead::new(action_dim);
        let net = Mlp::new(&mut store, "policy", MlpConfig::new(state_dim, hidden, head.raw_dim()), rng);
        Self {
            state_dim,
            action_dim,
            net,
            store,
            normalizer: Normalizer::identity(state_dim),
        }
    }

    fn head(&self) -> GaussianHead {
        GaussianHead::new(self.action_dim)
    }

    /// Squashed means and clamped log-variances for a batch of raw states.
    pub fn distribution(&self, states: &Array2<f64>) -> Result<(Array2<f64>, Array2<f64>)> {
        check_dim("policy state", self.state_dim, states.ncols())?;
        let raw = self.net.eval(&self.store, &self.normalizer.normalize(states))?;
        let d = self.action_dim;
        let mean = raw.slice(s![.., ..d]).mapv(f64::tanh);
        let lv = raw
            .slice(s![.., d..])
            .mapv(|v| v.clamp(diffnet::LOGVAR_MIN, diffnet::LOGVAR_MAX));
        Ok((mean, lv))
    }

    pub fn mean_action(&self, state: &[f64]) -> Result<Vec<f64>> {
        let (mean, _) = self.distribution(&crate::train::row_vec(state))?;
        Ok(mean.iter().copied().collect())
    }

    /// Policy draw plus `N(0, noise_sigma²)` exploration noise, clipped to `[−1, 1]`.
    pub fn sample_batch(&self, states: &Array2<f64>, noise_sigma: f64, rng: &mut SimRng) -> Result<Array2<f64>> {
        let (mut mean, lv) = self.distribution(states)?;
        for (a, l) in mean.iter_mut().zip(lv.iter()) {
            let policy_noise = (0.5 * l).exp() * std_normal(rng);
            let extra = noise_sigma * std_normal(rng);
            *a = clip_action(*a + policy_noise + extra);
        }
        Ok(mean)
    }

    pub fn sample_action(&self, state: &[f64], noise_sigma: f64, rng: &mut SimRng) -> Result<Vec<f64>> {
        Ok(self
            .sample_batch(&crate::train::row_vec(state), noise_sigma, rng)?
            .iter()
            .copied()
            .collect())
    }

    /// Mean negative log-likelihood of actions given normalized states.
    pub fn nll(&self, tape: &mut Tape, p: &Bound, states_norm: Array2<f64>, actions: Array2<f64>) -> Result<Var> {
        let x = tape.leaf(states_norm);
        let raw = self.net.forward(tape, p, x)?;
        let (mean, lv) = self.head().split(tape, raw);
        let mean = tape.tanh(mean);
        let a = tape.leaf(actions);
        let ld = tape.gaussian_log_density(a, mean, lv);
        let rs = tape.row_sum(ld);
        let m = tape.mean(rs);
        Ok(tape.scale(m, -1.0))
    }

    pub fn save(&self, stem: &Path) -> Result<()> {
        let meta = serde_json::json!({
            "kind": "policy",
            "state_dim": self.state_dim,
            "action_dim": self.action_dim,
            "hidden": self.net.config.hidden,
            "normalizer": self.normalizer,
        });
        save_checkpoint(stem, &self.store, None, meta)?;
        Ok(())
    }

    pub fn load(stem: &Path) -> Result<Self> {
        let (store, manifest) = load_checkpoint(stem)?;
        let e = &manifest.extra;
        let hidden: Vec<usize> = serde_json::from_value(e["hidden"].clone())?;
        let dim = |k: &str| e[k].as_u64().map(|v| v as usize).ok_or_else(|| Error::Format(format!("policy sidecar lacks {k}")));
        let mut p = Self::new(dim("state_dim")?, dim("action_dim")?, &hidden, &mut SimRng::seed_from_u64(0));
        if p.store.num_scalars() != store.num_scalars() {
            return Err(Error::Format("policy checkpoint does not match its architecture".into()));
        }
        p.store = store;
        p.normalizer = serde_json::from_value(e["normalizer"].clone())?;
        Ok(p)
    }
}

/// Acts with the squashed mean action.
///
/// # Panics
/// If `state` does not have `state_dim` entries.
impl Policy for PriorPolicy {
    fn id(&self) -> String {
        "bc_prior_mean".into()
    }

    fn action_dim(&self) -> usize {
        self.action_dim
    }

    fn state_dim(&self) -> Option<usize> {
        Some(self.state_dim)
    }

    fn act(&self, state: &[f64], _rng: &mut SimRng) -> Vec<f64> {
        self.mean_action(state).expect("state dimension matches the policy")
    }
}

/// Behaviour cloning by Gaussian maximum likelihood.
pub fn train_bc(dataset: &Dataset, config: &FitConfig) -> Result<(PriorPolicy, TrainReport)> {
    if dataset.is_empty() {
        return Err(Error::Empty("dataset"));
    }
    let mut rng = SimRng::seed_from_u64(config.seed);
    let mut policy = PriorPolicy::new(dataset.state_dim(), dataset.action_dim(), &config.hidden, &mut rng);
    let states: Vec<Vec<f64>> = dataset.transitions().map(|t| t.state.clone()).collect();
    let actions: Vec<Vec<f64>> = dataset.transitions().map(|t| t.action.clone()).collect();
    let x_raw = rows_to_array(&states, dataset.state_dim());
    policy.normalizer = Normalizer::fit(&x_raw);
    let x = policy.normalizer.normalize(&x_raw);
    let y = rows_to_array(&actions, dataset.action_dim());
    let (tr, va) = transition_split(dataset, config.val_frac, &mut rng);
    let net = policy.clone();
    let report = fit_rows(&mut policy.store, &x, &y, &tr, &va, config, &mut rng, |tape, p, xb, yb| {
        net.nll(tape, p, xb, yb)
    })?;
    Ok((policy, report))
}

/// Discounted returns-to-go `G_t = r_t + γ G_{t+1}` with `G` zero past the end.
pub fn mc_returns(traj: &Trajectory, gamma: f64) -> Vec<f64> {
    let mut out = vec![0.0; traj.len()];
    let mut g = 0.0;
    for (i, tr) in traj.transitions.iter().enumerate().rev() {
        g = tr.reward + gamma * g;
        out[i] = g;
    }
    out
}

/// State-value network `V(s)` with standardized inputs and targets.
#[derive(Debug, Clone)]
pub struct ValueFn {
    pub state_dim: usize,
    pub net: Mlp,
    pub store: ParamStore,
    pub normalizer: Normalizer,
    pub target_mean: f64,
    pub target_std: f64,
}

impl ValueFn {
    pub fn new(state_dim: usize, hidden: &[usize], rng: &mut SimRng) -> Self {
        let mut store = ParamStore::new();
        let net = Mlp::new(&mut store, "value", MlpConfig::new(state_dim, hidden, 1), rng);
        Self {
            state_dim,
            net,
            store,
            normalizer: Normalizer::identity(state_dim),
            target_mean: 0.0,
            target_std: 1.0,
        }
    }

    pub fn values(&self, states: &Array2<f64>) -> Result<Vec<f64>> {
        check_dim("value state", self.state_dim, states.ncols())?;
        let out = self.net.eval(&self.store, &self.normalizer.normalize(states))?;
        Ok(out.iter().map(|v| v * self.target_std + self.target_mean).collect())
    }

    pub fn value(&self, state: &[f64]) -> Result<f64> {
        Ok(self.values(&crate::train::row_vec(state))?[0])
    }

    /// Mean squared error against standardized targets.
    pub fn mse(&self, tape: &mut Tape, p: &Bound, states_norm: Array2<f64>, targets_std: Array2<f64>) -> Result<Var> {
        let x = tape.leaf(states_norm);
        let v = self.net.forward(tape, p, x)?;
        let t = tape.leaf(targets_std);
        let d = tape.sub(v, t);
        let sq = tape.mul(d, d);
        Ok(tape.mean(sq))
    }

    pub fn save(&self, stem: &Path) -> Result<()> {
        let meta = serde_json::json!({
            "kind": "value",
            "state_dim": self.state_dim,
            "hidden": self.net.config.hidden,
            "normalizer": self.normalizer,
            "target_mean": self.target_mean,
            "target_std": self.target_std,
        });
        save_checkpoint(stem, &self.store, None, meta)?;
        Ok(())
    }

    pub fn load(stem: &Path) -> Result<Self> {
        let (store, manifest) = load_checkpoint(stem)?;
        let e = &manifest.extra;
        let hidden: Vec<usize> = serde_json::from_value(e["hidden"].clone())?;
        let state_dim = e["state_dim"]
            .as_u64()
            .ok_or_else(|| Error::Format("value sidecar lacks state_dim".into()))? as usize;
        let mut v = Self::new(state_dim, &hidden, &mut SimRng::seed_from_u64(0));
        if v.store.num_scalars() != store.num_scalars() {
            return Err(Error::Format("value checkpoint does not match its architecture".into()));
        }
        v.store = store;
        v.normalizer = serde_json::from_value(e["normalizer"].clone())?;
        v.target_mean = serde_json::from_value(e["target_mean"].clone())?;
        v.target_std = serde_json::from_value(e["target_std"].clone())?;
        Ok(v)
    }
}

/// Least-squares regression of `V(s_t)` onto Monte-Carlo returns.
pub fn train_value_mc(dataset: &Dataset, gamma: f64, config: &FitConfig) -> Result<(ValueFn, TrainReport)> {
    if dataset.is_empty() {
        return Err(Error::Empty("dataset"));
    }
    if !(0.0..=1.0).contains(&gamma) {
        return Err(Error::InvalidArgument(format!("discount {gamma} outside [0, 1]")));
    }
    let mut rng = SimRng::seed_from_u64(config.seed);
    let mut value = ValueFn::new(dataset.state_dim(), &config.hidden, &mut rng);
    let states: Vec<Vec<f64>> = dataset.transitions().map(|t| t.state.clone()).collect();
    let targets: Vec<f64> = dataset.trajectories.iter().flat_map(|t| mc_returns(t, gamma)).collect();
    let x_raw = rows_to_array(&states, dataset.state_dim());
    value.normalizer = Normalizer::fit(&x_raw);
    let t_norm = Normalizer::fit(&Array2::from_shape_vec((targets.len(), 1), targets.clone()).expect("column"));
    value.target_mean = t_norm.mean[0];
    value.target_std = t_norm.std[0];
    let x = value.normalizer.normalize(&x_raw);
    let y = Array2::from_shape_fn((targets.len(), 1), |(i, _)| (targets[i] - value.target_mean) / value.target_std);
    let (tr, va) = transition_split(dataset, config.val_frac, &mut rng);
    let net = value.clone();
    let report = fit_rows(&mut value.store, &x, &y, &tr, &va, config, &mut rng, |tape, p, xb, yb| {
        net.mse(tape, p, xb, yb)
    })?;
    Ok((value, report))
}
