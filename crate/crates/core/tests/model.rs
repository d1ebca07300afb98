use ndarray::Array2;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use refplan::env::{Step, UniformRandomPolicy};
use refplan::train::Normalizer;
use refplan::{
    generate_dataset, select_elites, train_mle, validation_nll, Dataset, Encoder, EncoderConfig,
    EnsembleConfig, EnsembleModel, Environment, Error, MleConfig, PointMass2D, SimRng,
};
use statrs::distribution::{ChiSquared, ContinuousCDF};

/// Noiseless `s' = s + 0.1·a` in two dimensions with reward `s₀`.
#[derive(Debug, Clone)]
struct LinearEnv;

impl Environment for LinearEnv {
    fn id(&self) -> String {
        "linear".into()
    }
    fn state_dim(&self) -> usize {
        2
    }
    fn action_dim(&self) -> usize {
        2
    }
    fn horizon(&self) -> usize {
        20
    }
    fn gamma(&self) -> f64 {
        1.0
    }
    fn latent_params(&self) -> Vec<f64> {
        vec![]
    }
    fn reset(&self, rng: &mut SimRng) -> Vec<f64> {
        vec![rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)]
    }
    fn step(&self, state: &[f64], action: &[f64], _rng: &mut SimRng) -> Step {
        Step {
            next_state: vec![state[0] + 0.1 * action[0], state[1] + 0.1 * action[1]],
            reward: state[0],
        }
    }
}

fn small_encoder(state_dim: usize, action_dim: usize, seed: u64) -> Encoder {
    let config = EncoderConfig {
        latent_dim: 2,
        state_embed: 8,
        action_embed: 4,
        reward_embed: 2,
        gru_hidden: 8,
    };
    Encoder::new(state_dim, action_dim, config, &mut SimRng::seed_from_u64(seed))
}

fn small_ensemble(d: &Dataset, encoder: &Encoder, seed: u64) -> EnsembleModel {
    let config = EnsembleConfig {
        n_members: 4,
        n_elites: 3,
        hidden: vec![32, 32],
        skip: true,
    };
    let mut m = EnsembleModel::new(
        d.state_dim(),
        d.action_dim(),
        encoder.latent_dim(),
        config,
        &mut SimRng::seed_from_u64(seed),
    )
    .unwrap();
    m.fit_normalizer(d);
    m
}

fn mle_config(epochs: usize) -> MleConfig {
    MleConfig {
        max_epochs: epochs,
        max_steps_per_epoch: Some(60),
        seed: 3,
        ..MleConfig::default()
    }
}

fn rmse(a: &[f64], b: &[f64]) -> f64 {
    (a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>() / a.len() as f64).sqrt()
}

#[test]
fn select_elites_examples() {
    assert_eq!(select_elites(&[3.0, 1.0, 2.0], 2).unwrap(), vec![1, 2]);
    assert_eq!(select_elites(&[3.0, 1.0, 2.0], 3).unwrap(), vec![1, 2, 0]);
    assert_eq!(select_elites(&[1.0, 1.0, 2.0], 1).unwrap(), vec![0]);
    assert!(matches!(select_elites(&[1.0], 0), Err(Error::InvalidArgument(_))));
    assert!(matches!(select_elites(&[1.0], 2), Err(Error::InvalidArgument(_))));
}

#[test]
fn linear_dynamics_are_learned() {
    let train = generate_dataset(&LinearEnv, &UniformRandomPolicy { action_dim: 2 }, 60, 1).unwrap();
    let encoder = small_encoder(2, 2, 0);
    let before = encoder.checksum();
    let mut model = small_ensemble(&train, &encoder, 1);
    let report = train_mle(&mut model, &train, &encoder, &mle_config(60)).unwrap();
    assert_eq!(encoder.checksum(), before);
    assert_eq!(report.elites, model.elites);
    assert_eq!(model.elites.len(), 3);
    for (best, curve) in report.val_losses.iter().zip(&report.val_curves) {
        assert!(*best <= curve[0]);
        assert_eq!(*best, curve.iter().cloned().fold(f64::INFINITY, f64::min));
    }

    // Held-out states and actions from a fresh seed.
    let test = generate_dataset(&LinearEnv, &UniformRandomPolicy { action_dim: 2 }, 10, 99).unwrap();
    let mut predicted = Vec::new();
    let mut truth = Vec::new();
    for traj in &test.trajectories {
        let beliefs = encoder.encode_trajectory(traj).unwrap();
        for (h, tr) in traj.transitions.iter().enumerate() {
            for &k in &model.elites {
                let pred = model.predict(&tr.state, &tr.action, &beliefs[h].mu, k).unwrap();
                predicted.extend(pred.next_state_mean(&tr.state));
                truth.extend(tr.next_state.iter().copied());
            }
        }
    }
    let err = rmse(&predicted, &truth);
    assert!(err <= 1e-2, "held-out next-state RMSE {err}");
}

#[test]
fn point_mass_rollouts_meet_quality_gate() {
    let env = PointMass2D::default();
    let behavior = refplan::ProportionalController::suboptimal();
    let train = generate_dataset(&env, &behavior, 30, 4).unwrap();
    let encoder = small_encoder(4, 2, 1);
    let mut model = small_ensemble(&train, &encoder, 2);
    train_mle(&mut model, &train, &encoder, &mle_config(80)).unwrap();

    let test = generate_dataset(&env, &behavior, 5, 77).unwrap();
    let mut sq = [0.0; 4];
    let mut count = 0usize;
    for traj in &test.trajectories {
        let beliefs = encoder.encode_trajectory(traj).unwrap();
        for start in (0..traj.len() - 4).step_by(7) {
            for &k in &model.elites {
                let mut s = traj.transitions[start].state.clone();
                for (h, acc) in sq.iter_mut().enumerate() {
                    let tr = &traj.transitions[start + h];
                    let pred = model.predict(&s, &tr.action, &beliefs[start].mu, k).unwrap();
                    s = pred.next_state_mean(&s);
                    *acc += s.iter().zip(&tr.next_state).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / 4.0;
                }
                count += 1;
            }
        }
    }
    for (h, total) in sq.iter().enumerate() {
        let err = (total / count as f64).sqrt();
        assert!(err <= 5e-2, "step {h} rollout RMSE {err}");
    }
}

#[test]
fn training_is_deterministic_and_validation_matches() {
    let d = generate_dataset(&LinearEnv, &UniformRandomPolicy { action_dim: 2 }, 12, 5).unwrap();
    let encoder = small_encoder(2, 2, 2);
    let run = || {
        let mut m = small_ensemble(&d, &encoder, 3);
        let r = train_mle(&mut m, &d, &encoder, &mle_config(4)).unwrap();
        (m, r)
    };
    let (m1, r1) = run();
    let (m2, r2) = run();
    assert_eq!(r1, r2);
    assert_eq!(m1.checksum(), m2.checksum());
    let recomputed = validation_nll(&m1, &d, &encoder, &mle_config(4)).unwrap();
    for (a, b) in recomputed.iter().zip(&r1.val_losses) {
        assert!((a - b).abs() < 1e-9);
    }
}

#[test]
fn zero_epochs_leave_model_untouched() {
    let d = generate_dataset(&LinearEnv, &UniformRandomPolicy { action_dim: 2 }, 4, 5).unwrap();
    let encoder = small_encoder(2, 2, 2);
    let mut m = small_ensemble(&d, &encoder, 3);
    let before = m.checksum();
    let elites = m.elites.clone();
    train_mle(&mut m, &d, &encoder, &mle_config(0)).unwrap();
    assert_eq!(m.checksum(), before);
    assert_eq!(m.elites, elites);
}

#[test]
fn training_errors() {
    let d = generate_dataset(&LinearEnv, &UniformRandomPolicy { action_dim: 2 }, 2, 5).unwrap();
    let encoder = small_encoder(2, 2, 2);
    let mut m = small_ensemble(&d, &encoder, 3);
    let too_long = MleConfig {
        horizon: 21,
        ..mle_config(1)
    };
    assert!(train_mle(&mut m, &d, &encoder, &too_long).is_err());
    let empty = refplan::data::subsample(&d, 0, 0);
    assert!(train_mle(&mut m, &empty, &encoder, &mle_config(1)).is_err());
}

#[test]
fn prediction_contracts() {
    let mut rng = SimRng::seed_from_u64(0);
    let mut m = EnsembleModel::new(3, 2, 1, EnsembleConfig::default(), &mut rng).unwrap();
    m.elites = vec![1, 4, 6];
    let s = [0.2, -0.1, 0.4];
    let a = [0.5, -0.5];
    let p1 = m.predict(&s, &a, &[0.3], 4).unwrap();
    assert_eq!(p1, m.predict(&s, &a, &[0.3], 4).unwrap());
    assert!(p1.log_var.iter().all(|l| (diffnet::LOGVAR_MIN..=diffnet::LOGVAR_MAX).contains(l)));
    assert!(m.predict(&s, &a, &[0.3], 0).is_err());
    assert!(m.predict(&s, &a, &[0.3, 0.1], 4).is_err());

    m.members[4].zero();
    let z = m.predict(&s, &a, &[0.3], 4).unwrap();
    assert_eq!(z.next_state_mean(&s), s.to_vec());
}

#[test]
fn floor_variance_samples_hug_the_mean() {
    let mut rng = SimRng::seed_from_u64(1);
    let mut m = EnsembleModel::new(2, 1, 0, EnsembleConfig::default(), &mut rng).unwrap();
    let out_bias = m.nets[0].layers.last().unwrap().bias;
    for k in 0..m.members.len() {
        for coord in 3..6 {
            m.members[k].set_scalar(out_bias, coord, -1e3);
        }
    }
    let sd = (0.5 * diffnet::LOGVAR_MIN).exp();
    let s = [0.1, 0.2];
    let a = [0.3];
    for _ in 0..200 {
        let (next, r, k) = m.sample_transition(&s, &a, &[], &mut rng).unwrap();
        let pred = m.predict(&s, &a, &[], k).unwrap();
        let mean = pred.next_state_mean(&s);
        assert!(next.iter().zip(&mean).all(|(x, y)| (x - y).abs() <= 4.5 * sd));
        assert!((r - pred.reward_mean()).abs() <= 4.5 * sd);
    }
    let draw = |seed| m.sample_transition(&s, &a, &[], &mut SimRng::seed_from_u64(seed)).unwrap();
    assert_eq!(draw(5), draw(5));
}

#[test]
fn member_frequencies_are_uniform_over_elites() {
    let mut rng = SimRng::seed_from_u64(2);
    let mut m = EnsembleModel::new(2, 1, 0, EnsembleConfig::default(), &mut rng).unwrap();
    m.elites = vec![0, 2, 3, 5, 6];
    let mut counts = [0usize; 7];
    for _ in 0..10_000 {
        let (_, _, k) = m.sample_transition(&[0.0, 0.0], &[0.0], &[], &mut rng).unwrap();
        counts[k] += 1;
    }
    assert_eq!(counts[1] + counts[4], 0);
    let expected = 10_000.0 / 5.0;
    let chi2: f64 = m
        .elites
        .iter()
        .map(|&k| (counts[k] as f64 - expected).powi(2) / expected)
        .sum();
    let p = 1.0 - ChiSquared::new(4.0).unwrap().cdf(chi2);
    assert!(p > 0.01, "chi-square {chi2}, p = {p}");
}

#[test]
fn checkpoint_round_trip() {
    let mut rng = SimRng::seed_from_u64(3);
    let mut m = EnsembleModel::new(3, 2, 2, EnsembleConfig::default(), &mut rng).unwrap();
    m.elites = vec![6, 0, 3, 1, 2];
    m.normalizer = Normalizer {
        mean: vec![0.1, 0.2, 0.3, 0.4, 0.5],
        std: vec![1.0, 2.0, 3.0, 4.0, 5.0],
    };
    let dir = tempfile::tempdir().unwrap();
    m.save(dir.path()).unwrap();
    let back = EnsembleModel::load(dir.path()).unwrap();
    assert_eq!(back.checksum(), m.checksum());
    assert_eq!(back.elites, m.elites);
    assert_eq!(back.normalizer, m.normalizer);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn elites_invariant_under_shift(losses in prop::collection::vec(-100.0f64..100.0, 1..20), k in 1usize..20, c in -1e3f64..1e3) {
        let k = k.min(losses.len());
        let shifted: Vec<f64> = losses.iter().map(|l| l + c).collect();
        let a = select_elites(&losses, k).unwrap();
        let b = select_elites(&shifted, k).unwrap();
        // Ranks can only differ where shifting creates or breaks an exact tie.
        let ties = |v: &[f64]| v.iter().enumerate().any(|(i, x)| v[i + 1..].contains(x));
        if !ties(&losses) && !ties(&shifted) {
            prop_assert_eq!(a, b);
        }
    }

    #[test]
    fn normalizer_round_trip(rows in prop::collection::vec(prop::collection::vec(-1e3f64..1e3, 3), 2..30)) {
        let n = rows.len();
        let x = Array2::from_shape_vec((n, 3), rows.concat()).unwrap();
        let norm = Normalizer::fit(&x);
        prop_assert!(norm.is_valid());
        prop_assert!(norm.std.iter().all(|s| *s >= 1e-8));
        let back = norm.denormalize(&norm.normalize(&x));
        for (a, b) in back.iter().zip(x.iter()) {
            prop_assert!((a - b).abs() <= 1e-12 * b.abs().max(1.0));
        }
    }
}
