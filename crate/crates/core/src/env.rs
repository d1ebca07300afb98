//! Toy environments with latent dynamics parameters, task distributions
//! over those parameters, and hand-written behaviour policies.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::SimRng;

/// Result of one environment transition.
#[derive(Debug, Clone, PartialEq)]
pub struct Step {
    pub next_state: Vec<f64>,
    pub reward: f64,
}

/// A fully observed MDP instance. `step` must depend only on its arguments,
/// the instance's latent parameters and the supplied rng.
pub trait Environment: Send + Sync {
    fn id(&self) -> String;
    fn state_dim(&self) -> usize;
    fn action_dim(&self) -> usize;
    /// Episode length; episodes end (done) exactly here.
    fn horizon(&self) -> usize;
    fn gamma(&self) -> f64;
    fn latent_params(&self) -> Vec<f64>;
    fn reset(&self, rng: &mut SimRng) -> Vec<f64>;
    fn step(&self, state: &[f64], action: &[f64], rng: &mut SimRng) -> Step;
}

/// Distribution over environment instances (e.g. over latent parameters).
pub trait TaskDistribution: Send + Sync {
    type Env: Environment;
    fn id(&self) -> String;
    fn sample(&self, rng: &mut SimRng) -> Self::Env;
    fn state_dim(&self) -> usize;
    fn action_dim(&self) -> usize;
}

/// A single environment viewed as a degenerate task distribution.
#[derive(Debug, Clone)]
pub struct Fixed<E>(pub E);

impl<E: Environment + Clone> TaskDistribution for Fixed<E> {
    type Env = E;

    fn id(&self) -> String {
        self.0.id()
    }

    fn sample(&self, _rng: &mut SimRng) -> E {
        self.0.clone()
    }

    fn state_dim(&self) -> usize {
        self.0.state_dim()
    }

    fn action_dim(&self) -> usize {
        self.0.action_dim()
    }
}

pub fn clip_action(a: f64) -> f64 {
    a.clamp(-1.0, 1.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PointMassParams {
    pub drag: f64,
    pub wind: [f64; 2],
}

impl PointMassParams {
    pub const CALM: Self = Self {
        drag: 0.0,
        wind: [0.0, 0.0],
    };

    /// Test-time dynamics shift: drag doubled, both wind components +0.3.
    pub fn shifted(self) -> Self {
        Self {
            drag: (2.0 * self.drag).min(1.0),
            wind: [self.wind[0] + 0.3, self.wind[1] + 0.3],
        }
    }
}

/// Uniform box for initial positions (half-width `pos`) and velocities (half-width `vel`).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InitBox {
    pub pos: f64,
    pub vel: f64,
}

impl InitBox {
    pub fn widened(self, factor: f64) -> Self {
        Self {
            pos: self.pos * factor,
            vel: self.vel * factor,
        }
    }
}

/// 2-D point mass pushed towards `goal`.
///
/// State `(x, y, vx, vy)`, action a force in `[-1, 1]²`:
/// `v' = (1 − drag)·v + dt·a + dt·wind`, `p' = p + dt·v'`,
/// reward `−‖p' − goal‖² − 0.01‖a‖²`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PointMass2D {
    pub params: PointMassParams,
    pub goal: [f64; 2],
    pub dt: f64,
    pub horizon: usize,
    pub init: InitBox,
    pub gamma: f64,
}

impl Default for PointMass2D {
    fn default() -> Self {
        Self {
            params: PointMassParams::CALM,
            goal: [0.0, 0.0],
            dt: 0.1,
            horizon: 100,
            init: InitBox { pos: 1.0, vel: 0.0 },
            gamma: 0.95,
        }
    }
}

impl PointMass2D {
    pub fn with_params(mut self, params: PointMassParams) -> Self {
        self.params = params;
        self
    }

    pub fn with_init(mut self, init: InitBox) -> Self {
        self.init = init;
        self
    }
}

impl Environment for PointMass2D {
    fn id(&self) -> String {
        format!(
            "pointmass2d(drag={},wind=[{},{}])",
            self.params.drag, self.params.wind[0], self.params.wind[1]
        )
    }

    fn state_dim(&self) -> usize {
        4
    }

    fn action_dim(&self) -> usize {
        2
    }

    fn horizon(&self) -> usize {
        self.horizon
    }

    fn gamma(&self) -> f64 {
        self.gamma
    }

    fn latent_params(&self) -> Vec<f64> {
        vec![self.params.drag, self.params.wind[0], self.params.wind[1]]
    }

    fn reset(&self, rng: &mut SimRng) -> Vec<f64> {
        let mut draw = |half: f64| {
            if half > 0.0 {
                rng.random_range(-half..half)
            } else {
                0.0
            }
        };
        let (p, v) = (self.init.pos, self.init.vel);
        vec![draw(p), draw(p), draw(v), draw(v)]
    }

    fn step(&self, state: &[f64], action: &[f64], _rng: &mut SimRng) -> Step {
        let a = [clip_action(action[0]), clip_action(action[1])];
        let keep = 1.0 - self.params.drag;
        let mut next = vec![0.0; 4];
        let mut dist2 = 0.0;
        for i in 0..2 {
            let v = keep * state[2 + i] + self.dt * a[i] + self.dt * self.params.wind[i];
            let p = state[i] + self.dt * v;
            next[i] = p;
            next[2 + i] = v;
            dist2 += (p - self.goal[i]).powi(2);
        }
        let reward = -dist2 - 0.01 * (a[0] * a[0] + a[1] * a[1]);
        Step {
            next_state: next,
            reward,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LatentDistribution {
    Fixed { params: PointMassParams },
    /// Drag and each wind component drawn independently and uniformly.
    Uniform { drag: [f64; 2], wind: [f64; 2] },
    /// One of a finite set of parameter vectors, chosen uniformly.
    Modes { modes: Vec<PointMassParams> },
}

impl LatentDistribution {
    pub fn sample(&self, rng: &mut SimRng) -> PointMassParams {
        let uniform = |rng: &mut SimRng, r: [f64; 2]| {
            if r[1] > r[0] {
                rng.random_range(r[0]..r[1])
            } else {
                r[0]
            }
        };
        match self {
            LatentDistribution::Fixed { params } => *params,
            LatentDistribution::Uniform { drag, wind } => PointMassParams {
                drag: uniform(rng, *drag),
                wind: [uniform(rng, *wind), uniform(rng, *wind)],
            },
            LatentDistribution::Modes { modes } => modes[rng.random_range(0..modes.len())],
        }
    }

    pub fn map(&self, f: impl Fn(PointMassParams) -> PointMassParams) -> Self {
        match self {
            LatentDistribution::Fixed { params } => LatentDistribution::Fixed { params: f(*params) },
            LatentDistribution::Modes { modes } => LatentDistribution::Modes {
                modes: modes.iter().map(|m| f(*m)).collect(),
            },
            LatentDistribution::Uniform { drag, wind } => {
                let lo = f(PointMassParams {
                    drag: drag[0],
                    wind: [wind[0], wind[0]],
                });
                let hi = f(PointMassParams {
                    drag: drag[1],
                    wind: [wind[1], wind[1]],
                });
                LatentDistribution::Uniform {
                    drag: [lo.drag, hi.drag],
                    wind: [lo.wind[0], hi.wind[0]],
                }
            }
        }
    }
}

/// Point-mass environments whose `(drag, wind)` vary per episode.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PointMassFamily {
    pub base: PointMass2D,
    pub latent: LatentDistribution,
}

impl PointMassFamily {
    pub fn new(base: PointMass2D, latent: LatentDistribution) -> Self {
        Self { base, latent }
    }

    /// Two dynamics modes: calm (drag 0) and sluggish (drag 0.5), no wind.
    pub fn two_mode() -> Self {
        Self::new(
            PointMass2D::default(),
            LatentDistribution::Modes {
                modes: vec![
                    PointMassParams::CALM,
                    PointMassParams {
                        drag: 0.5,
                        wind: [0.0, 0.0],
                    },
                ],
            },
        )
    }

    /// Same family with initial states drawn from a box `factor`× wider.
    pub fn widened(&self, factor: f64) -> Self {
        let mut out = self.clone();
        out.base.init = out.base.init.widened(factor);
        out
    }

    /// Same family with every latent parameter vector shifted.
    pub fn shifted(&self) -> Self {
        Self {
            base: self.base.clone(),
            latent: self.latent.map(PointMassParams::shifted),
        }
    }
}

impl TaskDistribution for PointMassFamily {
    type Env = PointMass2D;

    fn id(&self) -> String {
        "pointmass2d-family".to_string()
    }

    fn sample(&self, rng: &mut SimRng) -> PointMass2D {
        self.base.clone().with_params(self.latent.sample(rng))
    }

    fn state_dim(&self) -> usize {
        4
    }

    fn action_dim(&self) -> usize {
        2
    }
}

/// Deterministic 1-D integrator `x' = x + step·a`, reward `−(x' − goal)²`.
/// Small enough for exhaustive search over discretised action sequences.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Integrator1D {
    pub start: f64,
    pub goal: f64,
    pub step_size: f64,
    pub horizon: usize,
}

impl Environment for Integrator1D {
    fn id(&self) -> String {
        "integrator1d".into()
    }

    fn state_dim(&self) -> usize {
        1
    }

    fn action_dim(&self) -> usize {
        1
    }

    fn horizon(&self) -> usize {
        self.horizon
    }

    fn gamma(&self) -> f64 {
        1.0
    }

    fn latent_params(&self) -> Vec<f64> {
        vec![]
    }

    fn reset(&self, _rng: &mut SimRng) -> Vec<f64> {
        vec![self.start]
    }

    fn step(&self, state: &[f64], action: &[f64], _rng: &mut SimRng) -> Step {
        let x = state[0] + self.step_size * clip_action(action[0]);
        Step {
            next_state: vec![x],
            reward: -(x - self.goal).powi(2),
        }
    }
}

/// A behaviour policy used to collect offline data.
pub trait Policy: Send + Sync {
    fn id(&self) -> String;
    fn action_dim(&self) -> usize;
    /// Required state dimension, if the policy reads the state.
    fn state_dim(&self) -> Option<usize>;
    fn act(&self, state: &[f64], rng: &mut SimRng) -> Vec<f64>;
}

#[derive(Debug, Clone)]
pub struct ZeroPolicy {
    pub action_dim: usize,
}

impl Policy for ZeroPolicy {
    fn id(&self) -> String {
        "zero".into()
    }

    fn action_dim(&self) -> usize {
        self.action_dim
    }

    fn state_dim(&self) -> Option<usize> {
        None
    }

    fn act(&self, _state: &[f64], _rng: &mut SimRng) -> Vec<f64> {
        vec![0.0; self.action_dim]
    }
}

#[derive(Debug, Clone)]
pub struct UniformRandomPolicy {
    pub action_dim: usize,
}

impl Policy for UniformRandomPolicy {
    fn id(&self) -> String {
        "uniform-random".into()
    }

    fn action_dim(&self) -> usize {
        self.action_dim
    }

    fn state_dim(&self) -> Option<usize> {
        None
    }

    fn act(&self, _state: &[f64], rng: &mut SimRng) -> Vec<f64> {
        (0..self.action_dim).map(|_| rng.random_range(-1.0..1.0)).collect()
    }
}

/// Noisy PD controller for the point mass: `a = clip(−kp·p − kd·v − ff + ε)`,
/// `ε ~ N(0, noise²)`, where `ff` is an optional wind feed-forward term.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProportionalController {
    pub kp: f64,
    pub kd: f64,
    pub noise: f64,
    #[serde(default)]
    pub feed_forward: [f64; 2],
}

impl ProportionalController {
    /// Open-loop push of `push` on both axes plus Gaussian noise of scale `noise`.
    pub fn constant_push(push: f64, noise: f64) -> Self {
        Self {
            kp: 0.0,
            kd: 0.0,
            noise,
            feed_forward: [-push, -push],
        }
    }

    /// Sluggish, noisy controller used to collect suboptimal data.
    pub fn suboptimal() -> Self {
        Self {
            kp: 0.6,
            kd: 0.3,
            noise: 0.3,
            feed_forward: [0.0, 0.0],
        }
    }

    /// Well-tuned controller that cancels the wind of `params` (reference "expert").
    pub fn expert(params: &PointMassParams) -> Self {
        Self {
            kp: 3.0,
            kd: 2.5,
            noise: 0.0,
            feed_forward: params.wind,
        }
    }

    pub fn mean_action(&self, state: &[f64]) -> Vec<f64> {
        (0..2)
            .map(|i| clip_action(-self.kp * state[i] - self.kd * state[2 + i] - self.feed_forward[i]))
            .collect()
    }
}

impl Policy for ProportionalController {
    fn id(&self) -> String {
        format!("pd(kp={},kd={},noise={})", self.kp, self.kd, self.noise)
    }

    fn action_dim(&self) -> usize {
        2
    }

    fn state_dim(&self) -> Option<usize> {
        Some(4)
    }

    fn act(&self, state: &[f64], rng: &mut SimRng) -> Vec<f64> {
        (0..2)
            .map(|i| {
                let eps: f64 = rng.sample(StandardNormal);
                clip_action(
                    -self.kp * state[i] - self.kd * state[2 + i] - self.feed_forward[i]
                        + self.noise * eps,
                )
            })
            .collect()
    }
}

/// Undiscounted return of one episode of `policy` in `env`.
pub fn rollout_policy(env: &dyn Environment, policy: &dyn Policy, rng: &mut SimRng) -> f64 {
    let mut s = env.reset(rng);
    let mut total = 0.0;
    for _ in 0..env.horizon() {
        let a = policy.act(&s, rng);
        let step = env.step(&s, &a, rng);
        total += step.reward;
        s = step.next_state;
    }
    total
}

/// Draw one standard normal.
pub(crate) fn std_normal(rng: &mut SimRng) -> f64 {
    StandardNormal.sample(rng)
}
