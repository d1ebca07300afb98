#![allow(dead_code)]

use refplan::{EncoderConfig, EnsembleConfig, FitConfig, MleConfig, VaeConfig};
use refplan_harness::config::{ExperimentConfig, PlannerGrid};

/// A configuration that trains and evaluates in a second or two.
pub fn tiny_config() -> ExperimentConfig {
    let mut c = ExperimentConfig {
        id: "tiny".into(),
        ..ExperimentConfig::default()
    };
    c.env.horizon = 12;
    c.dataset.episodes = 8;
    let fit = FitConfig {
        hidden: vec![16, 16],
        max_epochs: 2,
        max_steps_per_epoch: Some(5),
        ..FitConfig::default()
    };
    c.train.bc = fit.clone();
    c.train.value = fit;
    c.train.encoder = EncoderConfig {
        latent_dim: 2,
        state_embed: 4,
        action_embed: 4,
        reward_embed: 2,
        gru_hidden: 6,
    };
    c.train.ensemble = EnsembleConfig {
        n_members: 3,
        n_elites: 2,
        hidden: vec![16, 16],
        skip: true,
    };
    c.train.vae = VaeConfig {
        max_epochs: 2,
        steps_per_epoch: 3,
        batch_trajectories: 4,
        ..VaeConfig::default()
    };
    c.train.finetune = MleConfig {
        max_epochs: 2,
        max_steps_per_epoch: Some(3),
        ..MleConfig::default()
    };
    c.planner = PlannerGrid {
        horizon: vec![2],
        n_candidates: vec![16],
        n_latents: vec![2],
        ..PlannerGrid::default()
    };
    c.eval.seeds = vec![0, 1];
    c.eval.reference_episodes = 4;
    c.variance.repeats = 3;
    c.variance.horizon = 4;
    c.variance.seeds = vec![0];
    c
}
