//! Bayesian offline model-based planning at desk scale.
//!
//! A recurrent variational encoder infers a posterior over latent
//! environment parameters from the current episode, a latent-conditioned
//! probabilistic ensemble predicts transitions, and a control-as-inference
//! planner improves an offline prior policy by re-weighting its sampled
//! plans, marginalizing over posterior latent draws.

pub mod belief;
pub mod data;
pub mod env;
pub mod error;
pub mod model;
pub mod oracle;
pub mod planner;
pub mod prior;
pub mod score;
pub mod train;

/// Random number generator used throughout; seeded for reproducibility.
pub type SimRng = rand_chacha::ChaCha8Rng;

pub use belief::{
    elbo, freeze_then_finetune, kl_gaussian, reconstruction_log_likelihood, train_vae, BeliefParams,
    BeliefTracker, ElboTerms, Encoder, EncoderConfig, LatentSample, VaeConfig, VaeReport,
};
pub use data::{
    generate_dataset, generate_task_dataset, subsample, Dataset, DatasetMeta, Trajectory, Transition,
};
pub use env::{
    Environment, Integrator1D, LatentDistribution, PointMass2D, PointMassFamily, PointMassParams,
    Policy, ProportionalController, TaskDistribution,
};
pub use error::{Error, Result};
pub use model::{
    select_elites, train_mle, validation_nll, EnsembleConfig, EnsembleModel, GaussianPrediction,
    MleConfig, MleReport,
};
pub use oracle::{
    belief_mdp_transition, dirichlet_update, exact_posterior_plan, posterior_predictive,
    DirichletBelief, ExactPlan, TabularMdp, TabularPolicy,
};
pub use planner::{
    generate_prior_plans, mpc_episode, plan_conditioned, refplan, rollout_return, softmax_weights,
    Agent, CandidatePlans, Components, PlanResult, PlannerConfig, PlannerKind,
};
pub use prior::{mc_returns, train_bc, train_value_mc, FitConfig, PriorPolicy, ValueFn};
pub use score::normalized_score;
