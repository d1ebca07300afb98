use proptest::prelude::*;
use rand::{RngCore, SeedableRng};
use refplan::env::rollout_policy;
use refplan::planner::{
    episode_rngs, penalized_score, run_episode, sample_latents, EnvModel, FixedCandidateController,
    ZeroValue,
};
use refplan::{
    generate_prior_plans, mpc_episode, plan_conditioned, refplan, rollout_return, softmax_weights,
    Agent, BeliefParams, CandidatePlans, Components, Encoder, EncoderConfig, EnsembleConfig,
    EnsembleModel, Environment, Integrator1D, PlannerConfig, PlannerKind, PointMass2D, PriorPolicy,
    SimRng, ValueFn,
};

fn random_agent(seed: u64) -> Agent {
    let mut rng = SimRng::seed_from_u64(seed);
    let encoder = Encoder::new(4, 2, EncoderConfig::default(), &mut rng);
    let model = EnsembleModel::new(
        4,
        2,
        encoder.latent_dim(),
        EnsembleConfig {
            n_members: 3,
            n_elites: 2,
            hidden: vec![16, 16],
            skip: true,
        },
        &mut rng,
    )
    .unwrap();
    let policy = PriorPolicy::new(4, 2, &[16, 16], &mut rng);
    let value = ValueFn::new(4, &[16, 16], &mut rng);
    Agent {
        encoder,
        model,
        policy,
        value,
    }
}

fn small_config() -> PlannerConfig {
    PlannerConfig {
        horizon: 3,
        n_candidates: 32,
        n_latents: 4,
        kappa: 1.0,
        noise_sigma: 0.05,
        penalty: 0.5,
        gamma: 0.95,
        latent_scale: 1.0,
    }
}

/// A policy whose log-variance output sits at the clamp floor.
fn floor_variance_policy(seed: u64) -> PriorPolicy {
    let mut policy = PriorPolicy::new(4, 2, &[16, 16], &mut SimRng::seed_from_u64(seed));
    let bias = policy.net.layers.last().unwrap().bias;
    for coord in 2..4 {
        policy.store.set_scalar(bias, coord, -100.0);
    }
    policy
}

const STATE: [f64; 4] = [0.5, -0.3, 0.1, 0.2];

#[test]
fn softmax_examples() {
    let w = softmax_weights(&[1.0, 0.0], 1.0);
    assert!((w[0] - 0.7311).abs() < 1e-4 && (w[1] - 0.2689).abs() < 1e-4);
    let u = softmax_weights(&[3.0, 3.0, 3.0, 3.0], 5.0);
    assert!(u.iter().all(|x| (x - 0.25).abs() < 1e-15));
    let z = softmax_weights(&[1.0, -7.0, 300.0], 0.0);
    assert!(z.iter().all(|x| (x - 1.0 / 3.0).abs() < 1e-15));
    // Returns in the hundreds at κ = 10 would overflow without max subtraction.
    let big = softmax_weights(&[900.0, 899.0], 10.0);
    assert!(big.iter().all(|x| x.is_finite()));
}

#[test]
fn penalty_examples() {
    assert_eq!(penalized_score(&[2.5, 2.5, 2.5], 3.0).0, 2.5);
    assert_eq!(penalized_score(&[0.0, 2.0], 1.0).0, 0.0);
}

#[test]
fn zero_horizon_return_is_value() {
    let agent = random_agent(1);
    let comp = agent.components();
    let m = vec![0.3; agent.model.latent_dim];
    let mut rng = SimRng::seed_from_u64(0);
    let r = rollout_return(comp, &STATE, &[], &m, 0.9, 1.0, &mut rng).unwrap();
    assert_eq!(r, agent.value.value(&STATE).unwrap());
}

#[test]
fn prior_plans_shape_clip_and_determinism() {
    let agent = random_agent(2);
    let comp = agent.components();
    let config = PlannerConfig {
        noise_sigma: 0.5,
        ..small_config()
    };
    let mu = vec![0.0; agent.model.latent_dim];
    let gen = |seed| {
        generate_prior_plans(comp, &STATE, &mu, &config, config.horizon, true, &mut SimRng::seed_from_u64(seed))
            .unwrap()
    };
    let plans = gen(5);
    assert_eq!(plans.len(), config.n_candidates);
    assert_eq!(plans.horizon(), config.horizon);
    assert_eq!(plans.states.len(), config.horizon + 1);
    for a in &plans.actions {
        assert_eq!(a.dim(), (config.n_candidates, 2));
        assert!(a.iter().all(|x| (-1.0..=1.0).contains(x)));
    }
    assert_eq!(plans, gen(5));
    assert_ne!(plans, gen(6));
}

#[test]
fn degenerate_sampling_gives_identical_plans() {
    let policy = floor_variance_policy(3);
    let model = EnvModel(PointMass2D::default());
    let comp = Components {
        model: &model,
        prior: &policy,
        value: &ZeroValue,
    };
    let config = PlannerConfig {
        noise_sigma: 0.0,
        n_candidates: 256,
        ..small_config()
    };
    let plans = generate_prior_plans(comp, &STATE, &[], &config, 3, true, &mut SimRng::seed_from_u64(0)).unwrap();
    let first = plans.plan(0);
    let sd = (-5.0f64).exp();
    for n in 1..plans.len() {
        for (x, y) in plans.plan(n).iter().flatten().zip(first.iter().flatten()) {
            assert!((x - y).abs() <= 9.0 * sd, "plans differ by {}", (x - y).abs());
        }
    }
    // The squashed mean at the start state is reproduced within the policy noise.
    let mean = policy.mean_action(&STATE).unwrap();
    for n in 0..plans.len() {
        for (x, m) in plans.plan(n)[0].iter().zip(&mean) {
            assert!((x - m).abs() <= 4.5 * sd);
        }
    }
}

fn integrator_components(policy: &PriorPolicy) -> (EnvModel<Integrator1D>, &PriorPolicy) {
    let env = Integrator1D {
        start: 0.0,
        goal: 3.3,
        step_size: 1.0,
        horizon: 6,
    };
    (EnvModel(env), policy)
}

#[test]
fn conditioned_plan_limits() {
    let policy = PriorPolicy::new(1, 1, &[4], &mut SimRng::seed_from_u64(0));
    let (model, prior) = integrator_components(&policy);
    let comp = Components {
        model: &model,
        prior,
        value: &ZeroValue,
    };
    let seqs = vec![
        vec![vec![1.0], vec![1.0]],
        vec![vec![-1.0], vec![-1.0]],
        vec![vec![0.5], vec![0.0]],
        vec![vec![0.0], vec![-0.5]],
    ];
    let plans = CandidatePlans::from_sequences(&seqs, false).unwrap();
    let base = PlannerConfig {
        horizon: 2,
        gamma: 1.0,
        penalty: 0.0,
        ..small_config()
    };
    let mut rng = SimRng::seed_from_u64(0);

    let flat = plan_conditioned(comp, &[0.0], &[], &plans, &PlannerConfig { kappa: 0.0, ..base.clone() }, &mut rng).unwrap();
    let mean = plans.mean_plan();
    for (x, y) in flat.actions.iter().flatten().zip(mean.iter().flatten()) {
        assert!((x - y).abs() < 1e-12);
    }

    let sharp = plan_conditioned(comp, &[0.0], &[], &plans, &PlannerConfig { kappa: 100.0, ..base.clone() }, &mut rng).unwrap();
    for (x, y) in sharp.actions.iter().flatten().zip(seqs[0].iter().flatten()) {
        assert!((x - y).abs() < 1e-3);
    }

    let single = CandidatePlans::from_sequences(&seqs[2..3], false).unwrap();
    let one = plan_conditioned(comp, &[0.0], &[], &single, &base, &mut rng).unwrap();
    assert_eq!(one.actions, seqs[2]);
    assert_eq!(one.weights, vec![1.0]);
}

/// Replays refplan's rng schedule by hand with a collapsed posterior.
#[test]
fn collapsed_posterior_equals_conditioned_plan() {
    let agent = random_agent(4);
    let comp = agent.components();
    let mu: Vec<f64> = (0..agent.model.latent_dim).map(|i| 0.1 * i as f64 - 0.3).collect();
    let degenerate = BeliefParams {
        mu: mu.clone(),
        log_var: vec![f64::NEG_INFINITY; mu.len()],
        hidden: vec![],
    };
    for n_latents in [1, 3, 8] {
        let config = PlannerConfig {
            n_latents,
            ..small_config()
        };
        let out = refplan(comp, &STATE, &degenerate, &config, 100, &mut SimRng::seed_from_u64(9)).unwrap();

        let mut rng = SimRng::seed_from_u64(9);
        let latents = sample_latents(&degenerate, n_latents, 1.0, &mut rng);
        assert!(latents.iter().all(|m| *m == mu));
        let plans = generate_prior_plans(comp, &STATE, &mu, &config, config.horizon, true, &mut rng).unwrap();
        let mut eval = SimRng::seed_from_u64(rng.next_u64());
        let cond = plan_conditioned(comp, &STATE, &mu, &plans, &config, &mut eval).unwrap();
        assert_eq!(out.actions, cond.actions, "n̄ = {n_latents}");
    }

    // Zero latent scale is the same collapse with a non-degenerate posterior.
    let wide = BeliefParams::standard(agent.model.latent_dim);
    let config = PlannerConfig {
        n_latents: 1,
        latent_scale: 0.0,
        ..small_config()
    };
    let out = refplan(comp, &STATE, &wide, &config, 100, &mut SimRng::seed_from_u64(2)).unwrap();
    let mut rng = SimRng::seed_from_u64(2);
    let _ = sample_latents(&wide, 1, 0.0, &mut rng);
    let plans = generate_prior_plans(comp, &STATE, &wide.mu, &config, config.horizon, true, &mut rng).unwrap();
    let mut eval = SimRng::seed_from_u64(rng.next_u64());
    let cond = plan_conditioned(comp, &STATE, &wide.mu, &plans, &config, &mut eval).unwrap();
    assert_eq!(out.actions, cond.actions);
}

#[test]
fn kappa_zero_refplan_is_prior_mean() {
    let agent = random_agent(5);
    let comp = agent.components();
    let belief = BeliefParams::standard(agent.model.latent_dim);
    for n_latents in [1, 4, 16] {
        let config = PlannerConfig {
            kappa: 0.0,
            n_latents,
            ..small_config()
        };
        let out = refplan(comp, &STATE, &belief, &config, 100, &mut SimRng::seed_from_u64(n_latents as u64)).unwrap();
        let mean = out.plans.mean_plan();
        for (x, y) in out.actions.iter().flatten().zip(mean.iter().flatten()) {
            assert!((x - y).abs() < 1e-9);
        }
    }
}

#[test]
fn refplan_diagnostics_and_feasibility() {
    let agent = random_agent(6);
    let comp = agent.components();
    let belief = BeliefParams::standard(agent.model.latent_dim);
    let config = PlannerConfig {
        kappa: 5.0,
        noise_sigma: 0.8,
        ..small_config()
    };
    let out = refplan(comp, &STATE, &belief, &config, 100, &mut SimRng::seed_from_u64(1)).unwrap();
    assert_eq!(out.actions.len(), config.horizon);
    assert_eq!(out.latents.len(), config.n_latents);
    assert_eq!(out.weights.len(), config.n_latents);
    for w in &out.weights {
        assert_eq!(w.len(), config.n_candidates);
        assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-9);
    }
    assert!(out.return_variance.iter().flatten().all(|v| *v >= 0.0));
    assert!(out.actions.iter().flatten().all(|a| (-1.0..=1.0).contains(a)));
    let again = refplan(comp, &STATE, &belief, &config, 100, &mut SimRng::seed_from_u64(1)).unwrap();
    assert_eq!(out, again);

    // Near the end of the episode the horizon shrinks and the value is dropped.
    let late = refplan(comp, &STATE, &belief, &config, 2, &mut SimRng::seed_from_u64(1)).unwrap();
    assert_eq!(late.actions.len(), 2);
    assert!(!late.plans.terminal_value);
}

#[test]
fn prior_only_matches_direct_rollout() {
    let agent = random_agent(7);
    let env = PointMass2D::default();
    for seed in [0, 1, 2] {
        let log = mpc_episode(&env, PlannerKind::PriorOnly, &agent, &small_config(), seed).unwrap();
        let (mut env_rng, _) = episode_rngs(seed);
        let direct = rollout_policy(&env, &agent.policy, &mut env_rng);
        assert!((log.ret - direct).abs() <= 1e-12);
    }
}

#[test]
fn step_log_structure_and_determinism() {
    let agent = random_agent(8);
    let env = PointMass2D {
        horizon: 8,
        ..PointMass2D::default()
    };
    let config = PlannerConfig {
        n_candidates: 16,
        n_latents: 3,
        ..small_config()
    };
    for kind in PlannerKind::ALL {
        let log = mpc_episode(&env, kind, &agent, &config, 3).unwrap();
        assert_eq!(log.steps.len(), env.horizon());
        assert!(log.steps.iter().enumerate().all(|(t, s)| s.t == t));
        let ret: f64 = log.steps.iter().map(|s| s.reward).sum();
        assert!((ret - log.ret).abs() < 1e-12);
        let expected_entropies = match kind {
            PlannerKind::PriorOnly => 0,
            PlannerKind::Flat => 1,
            PlannerKind::Refplan => 3,
        };
        assert!(log.steps.iter().all(|s| s.entropies.len() == expected_entropies));
        let again = mpc_episode(&env, kind, &agent, &config, 3).unwrap();
        assert_eq!(log.ret, again.ret);
    }
}

#[test]
fn planner_kind_names_round_trip() {
    for kind in PlannerKind::ALL {
        assert_eq!(kind.to_string().parse::<PlannerKind>().unwrap(), kind);
    }
    assert!("loop".parse::<PlannerKind>().is_err());
}

fn all_sign_sequences(h: usize) -> Vec<Vec<Vec<f64>>> {
    (0..1usize << h)
        .map(|bits| (0..h).map(|i| vec![if bits >> i & 1 == 1 { 1.0 } else { -1.0 }]).collect())
        .collect()
}

#[test]
fn mpc_matches_exhaustive_search() {
    let env = Integrator1D {
        start: 0.0,
        goal: 3.3,
        step_size: 1.0,
        horizon: 6,
    };
    // Independent brute force over all 2^6 open-loop sign sequences.
    let best = all_sign_sequences(6)
        .iter()
        .map(|seq| {
            let mut x = env.start;
            seq.iter()
                .map(|a| {
                    x += env.step_size * a[0];
                    -(x - env.goal).powi(2)
                })
                .sum::<f64>()
        })
        .fold(f64::NEG_INFINITY, f64::max);
    assert!((best - -(5.29 + 1.69 + 0.09 + 0.49 + 0.09 + 0.49)).abs() < 1e-9);

    let model = EnvModel(env.clone());
    let policy = PriorPolicy::new(1, 1, &[4], &mut SimRng::seed_from_u64(0));
    let mut controller = FixedCandidateController {
        comp: Components {
            model: &model,
            prior: &policy,
            value: &ZeroValue,
        },
        config: PlannerConfig {
            horizon: 6,
            kappa: 100.0,
            penalty: 0.0,
            gamma: 1.0,
            n_latents: 1,
            ..PlannerConfig::default()
        },
        candidates: Box::new(all_sign_sequences),
    };
    let log = run_episode(&env, &mut controller, 0).unwrap();
    assert_eq!(log.steps.len(), 6);
    assert!((log.ret - best).abs() < 1e-9, "mpc {} vs exhaustive {best}", log.ret);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn softmax_shift_invariance_and_normalization(
        returns in prop::collection::vec(-50.0f64..50.0, 1..40),
        shift in -50.0f64..50.0,
        kappa in 0.0f64..10.0,
    ) {
        let w = softmax_weights(&returns, kappa);
        prop_assert!((w.iter().sum::<f64>() - 1.0).abs() <= 1e-9);
        let shifted: Vec<f64> = returns.iter().map(|r| r + shift).collect();
        for (a, b) in w.iter().zip(&softmax_weights(&shifted, kappa)) {
            prop_assert!((a - b).abs() <= 1e-12);
        }
    }

    #[test]
    fn dyadic_shift_is_bitwise_invariant(
        ticks in prop::collection::vec(-300_000i64..300_000, 1..40),
        shift in -1000i64..1000,
        kappa in 0.0f64..10.0,
    ) {
        // Multiples of 2^-10 plus an integer shift add exactly in f64.
        let returns: Vec<f64> = ticks.iter().map(|t| *t as f64 / 1024.0).collect();
        let shifted: Vec<f64> = returns.iter().map(|r| r + shift as f64).collect();
        prop_assert_eq!(softmax_weights(&returns, kappa), softmax_weights(&shifted, kappa));
    }

    #[test]
    fn constant_member_returns_have_no_penalty(c in -100.0f64..100.0, k in 1usize..8, p in 0.0f64..5.0) {
        let (score, var) = penalized_score(&vec![c; k], p);
        prop_assert!((score - c).abs() <= 1e-12 * c.abs().max(1.0));
        prop_assert!(var <= 1e-20);
    }
}
