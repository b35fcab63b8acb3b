use super::*;
use crate::worlds::PointMassWorld;
use rand::Rng;
use proptest::prelude::*;

fn pm() -> World {
    World::PointMass(PointMassWorld::default())
}

fn random_encoder(input_dim: usize, seed: u64) -> Encoder {
    Encoder::init(EncoderConfig {
        input_dim,
        hidden_widths: vec![16, 16],
        output_dim: 4,
        activation: Activation::Relu,
        init_seed: seed,
    })
    .unwrap()
}

#[test]
fn distance_examples() {
    let enc = Encoder::identity(2);
    let goal = GoalSpec::single(&enc, &[0.0, 0.0]).unwrap();
    assert_eq!(distance(&enc, &[3.0, 4.0], &goal).unwrap(), -5.0);
    assert_eq!(distance(&enc, &[0.0, 0.0], &goal).unwrap(), 0.0);
    let two = GoalSpec::new(&enc, vec![vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
    assert_eq!(two.embedding(), &[0.5, 0.5]);
    assert_eq!(distance(&enc, &[0.5, 0.5], &two).unwrap(), 0.0);
    assert!(matches!(GoalSpec::new(&enc, vec![]), Err(ControlError::EmptyGoal)));
    assert!(matches!(
        distance(&enc, &[1.0], &goal),
        Err(ControlError::DimMismatch { expected: 2, got: 1 })
    ));
}

#[test]
fn single_goal_frame_matches_plain_distance() {
    let enc = random_encoder(3, 4);
    let g = [0.2, -0.4, 0.9];
    let o = [0.5, 0.1, -0.3];
    let spec = GoalSpec::single(&enc, &g).unwrap();
    let plain = euclid(&enc.embed(&o).unwrap(), &enc.embed(&g).unwrap());
    assert_eq!(distance(&enc, &o, &spec).unwrap(), -plain);
}

#[test]
fn reward_examples() {
    let enc = Encoder::identity(2);
    let goal = GoalSpec::single(&enc, &[0.0, 0.0]).unwrap();
    assert_eq!(embedding_reward(&enc, &[0.3, 0.1], &[0.3, 0.1], &goal).unwrap(), 0.0);
    let r = embedding_reward(&enc, &[3.0, 4.0], &[0.0, 2.0], &goal).unwrap();
    assert_eq!(r, 3.0);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn rewards_telescope_and_shaped_form_agrees(
        seed in 0u64..10_000,
        frames in prop::collection::vec(prop::collection::vec(-2.0f64..2.0, 3), 2..20),
        gamma in 0.5f64..0.999,
    ) {
        let enc = random_encoder(3, seed);
        let goal = GoalSpec::single(&enc, &frames[frames.len() - 1]).unwrap();
        let mut total = 0.0;
        for w in frames.windows(2) {
            let r = embedding_reward(&enc, &w[0], &w[1], &goal).unwrap();
            let shaped = shaped_embedding_reward(&enc, &w[0], &w[1], &goal, gamma).unwrap();
            prop_assert!((r - shaped).abs() <= 1e-12);
            total += r;
        }
        let ends = distance(&enc, frames.last().unwrap(), &goal).unwrap()
            - distance(&enc, &frames[0], &goal).unwrap();
        prop_assert!((total - ends).abs() <= 1e-9);
    }

    #[test]
    fn mppi_weights_are_a_shift_invariant_distribution(
        scores in prop::collection::vec(-50.0f64..0.0, 2..40),
        shift in -100.0f64..100.0,
        temp in 0.01f64..2.0,
    ) {
        let w = mppi_weights(&scores, temp);
        prop_assert!(w.iter().all(|&v| v >= 0.0));
        prop_assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        let shifted: Vec<f64> = scores.iter().map(|s| s + shift).collect();
        for (a, b) in w.iter().zip(mppi_weights(&shifted, temp)) {
            prop_assert!((a - b).abs() < 1e-12);
        }
        let best = scores.iter().enumerate().max_by(|a, b| a.1.total_cmp(b.1)).unwrap().0;
        let heaviest = w.iter().copied().fold(0.0, f64::max);
        prop_assert_eq!(w[best], heaviest);
    }
}

#[test]
fn identical_samples_leave_the_mean_unchanged() {
    let world = pm();
    let enc = Encoder::identity(2);
    let goal = GoalSpec::single(&enc, &[0.9, 0.9]).unwrap();
    let config = MppiConfig {
        noise_fraction: 1e-300,
        warm_start: false,
        ..MppiConfig::default()
    };
    let mut planner = MppiPlanner::new(&world, config).unwrap();
    let mean = vec![vec![0.3, -0.2]; 12];
    planner.set_mean(mean.clone());
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let step = planner
        .plan(&world, &[0.5, 0.5], ObservationMode::RawState, &enc, &goal, &mut rng)
        .unwrap();
    assert!(step.weights.iter().all(|&w| (w - 1.0 / 32.0).abs() < 1e-15));
    for (a, m) in step.action.iter().zip(&mean[0]) {
        assert!((a - m).abs() < 1e-12);
    }
}

#[test]
fn terminal_score_equals_summed_rewards_plus_start() {
    let world = pm();
    let enc = random_encoder(2, 9);
    let goal = GoalSpec::single(&enc, &[0.8, 0.2]).unwrap();
    let mut s = vec![0.1, 0.6];
    let s0 = distance(&enc, &s, &goal).unwrap();
    let mut total = 0.0;
    for a in [[0.5, -0.2], [1.0, 1.0], [-0.3, 0.0], [0.2, -1.0]] {
        let next = world.step(&s, &a);
        total += embedding_reward(&enc, &s, &next, &goal).unwrap();
        s = next;
    }
    let terminal = distance(&enc, &s, &goal).unwrap();
    assert!((terminal - (s0 + total)).abs() < 1e-12);
}

#[test]
fn mppi_config_validation() {
    for cfg in [
        MppiConfig { horizon: 0, ..MppiConfig::default() },
        MppiConfig { samples: 1, ..MppiConfig::default() },
        MppiConfig { noise_fraction: 0.0, ..MppiConfig::default() },
        MppiConfig { temperature: -1.0, ..MppiConfig::default() },
    ] {
        assert!(cfg.validate().is_err());
    }
    assert_eq!(MppiConfig::default().sigma(&pm()), 0.2);
}

fn task_at_distance(rng: &mut ChaCha8Rng, d: f64) -> Task {
    loop {
        let goal = vec![rng.random::<f64>(), rng.random::<f64>()];
        let angle = rng.random_range(0.0..std::f64::consts::TAU);
        let start = vec![goal[0] + d * angle.cos(), goal[1] + d * angle.sin()];
        if start.iter().all(|v| (0.0..=1.0).contains(v)) {
            return Task { start, goal };
        }
    }
}

#[test]
fn identity_encoder_planner_reaches_goals() {
    let world = pm();
    let enc = Encoder::identity(2);
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let tasks: Vec<Task> = (0..100).map(|_| task_at_distance(&mut rng, 0.4)).collect();
    let results = mppi_evaluate(
        &world,
        &tasks,
        ObservationMode::RawState,
        &enc,
        &MppiConfig::default(),
        50,
        3,
    )
    .unwrap();
    let wins = results.iter().filter(|r| r.success).count();
    assert!(wins >= 95, "{wins}/100");
}

#[test]
fn episode_starting_at_goal_succeeds_immediately() {
    let world = pm();
    let enc = Encoder::identity(2);
    let goal = GoalSpec::single(&enc, &[0.4, 0.6]).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let r = mppi_episode(
        &world,
        &[0.4, 0.6],
        &[0.4, 0.6],
        ObservationMode::RawState,
        &enc,
        &goal,
        &MppiConfig::default(),
        50,
        &mut rng,
    )
    .unwrap();
    assert!(r.success);
    assert_eq!(r.first_success, Some(0));
    assert!(r.true_errors.iter().all(|&e| e <= world.tolerance()));
    assert_eq!(r.steps(), 0);
    let held = mppi_episode(
        &world,
        &[0.4, 0.6],
        &[0.4, 0.6],
        ObservationMode::RawState,
        &enc,
        &goal,
        &MppiConfig { stop_on_success: false, ..MppiConfig::default() },
        50,
        &mut rng,
    )
    .unwrap();
    assert_eq!(held.true_errors.len(), 51);
    assert_eq!(held.embedding_distances.len(), 51);
}

#[test]
fn mppi_is_deterministic_per_seed() {
    let world = pm();
    let enc = random_encoder(2, 1);
    let tasks = vec![
        Task { start: vec![0.1, 0.1], goal: vec![0.3, 0.2] },
        Task { start: vec![0.9, 0.5], goal: vec![0.7, 0.6] },
    ];
    let cfg = MppiConfig { stop_on_success: false, ..MppiConfig::default() };
    let a = mppi_evaluate(&world, &tasks, ObservationMode::RawState, &enc, &cfg, 20, 5).unwrap();
    let b = mppi_evaluate(&world, &tasks, ObservationMode::RawState, &enc, &cfg, 20, 5).unwrap();
    assert_eq!(a, b);
    let csv = episodes_csv(&a);
    assert!(csv.starts_with("episode,success,steps,final_error\n"));
    assert_eq!(csv.lines().count(), 3);
    let steps = step_errors_csv(&a);
    assert!(steps.starts_with("episode,step,true_error,embedding_distance\n"));
    assert_eq!(steps.lines().count(), 1 + 2 * 21);
}

#[test]
fn rwr_weight_examples() {
    assert!((rwr_weight(3.0, 0.1, 10.0) - 1.349_858_807_576_003).abs() < 1e-12);
    assert_eq!(rwr_weight(123.0, 0.0, 10.0), 1.0);
    assert_eq!(rwr_weight(1e6, 0.1, 10.0), 10f64.exp());
}

fn mixed_config() -> MixedDatasetConfig {
    MixedDatasetConfig {
        goal: vec![0.8, 0.8],
        decoys: vec![vec![0.2, 0.8]],
        start_center: vec![0.5, 0.2],
        start_radius: 0.1,
        num_demos: 4,
        num_failures: 6,
        noise: 0.1,
        max_len: 60,
    }
}

#[test]
fn mixed_dataset_has_tagged_demos_and_failures() {
    let world = pm();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let ds =
        generate_mixed_dataset(&world, &mixed_config(), ObservationMode::RawState, &mut rng).unwrap();
    assert_eq!(ds.len(), 10);
    let tags: Vec<&str> = ds.trajectories().iter().map(|t| t.meta().tag.as_str()).collect();
    assert_eq!(tags.iter().filter(|t| **t == "expert").count(), 4);
    assert_eq!(tags.iter().filter(|t| **t == "failure").count(), 6);
    for t in &ds.trajectories()[..4] {
        let last = t.states().unwrap().row(t.len() - 1).to_vec();
        assert!(world.reached(&last, &[0.8, 0.8]));
    }
    for t in &ds.trajectories()[4..] {
        let last = t.states().unwrap().row(t.len() - 1).to_vec();
        assert!(!world.reached(&last, &[0.8, 0.8]));
    }
}

fn tiny_rwr(seed: u64, temperature: f64) -> RwrConfig {
    RwrConfig {
        temperature,
        steps: 60,
        hidden_widths: vec![16, 16],
        seed,
        ..RwrConfig::default()
    }
}

#[test]
fn rwr_at_zero_temperature_is_bc() {
    let world = pm();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let ds =
        generate_mixed_dataset(&world, &mixed_config(), ObservationMode::RawState, &mut rng).unwrap();
    let enc = random_encoder(2, 3);
    let goal = GoalSpec::single(&enc, &[0.8, 0.8]).unwrap();
    let rwr = rwr_train(&ds, &enc, &goal, &tiny_rwr(7, 0.0)).unwrap();
    let bc = bc_train(&ds, &enc, &goal, &tiny_rwr(7, 0.1)).unwrap();
    assert!(rwr.weights.iter().all(|&w| w == 1.0));
    assert_eq!(rwr.losses, bc.losses);
    assert_eq!(rwr.policy.flat_parameters(), bc.policy.flat_parameters());
    let weighted = rwr_train(&ds, &enc, &goal, &tiny_rwr(7, 0.1)).unwrap();
    assert_ne!(weighted.policy.flat_parameters(), bc.policy.flat_parameters());
}

#[test]
fn bc_fits_a_linear_controller() {
    let world = pm();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let cfg = MixedDatasetConfig {
        num_demos: 20,
        num_failures: 0,
        noise: 0.0,
        ..mixed_config()
    };
    let ds = generate_mixed_dataset(&world, &cfg, ObservationMode::RawState, &mut rng).unwrap();
    let enc = Encoder::identity(2);
    let goal = GoalSpec::single(&enc, &[0.8, 0.8]).unwrap();
    let fit = bc_train(
        &ds,
        &enc,
        &goal,
        &RwrConfig {
            steps: 1500,
            hidden_widths: vec![32, 32],
            ..RwrConfig::default()
        },
    )
    .unwrap();
    let n = fit.losses.len();
    let head: f64 = fit.losses[..100].iter().sum::<f64>() / 100.0;
    let tail: f64 = fit.losses[n - 100..].iter().sum::<f64>() / 100.0;
    assert!(tail < head, "{head} -> {tail}");
    let starts: Vec<Vec<f64>> = (0..20).map(|_| cfg.sample_start(&world, &mut rng)).collect();
    let eval = eval_policy(
        &world,
        &fit.policy,
        &enc,
        ObservationMode::RawState,
        &starts,
        &[0.8, 0.8],
        &RolloutOptions::new(50, 0),
    )
    .unwrap();
    assert!(eval.success_rate >= 0.9, "{} {:?}", eval.success_rate, eval.episodes);
}

#[test]
fn rwr_needs_actions() {
    let frames = vec![vec![0.1, 0.2], vec![0.2, 0.2]];
    let t = Trajectory::new(frames, None, None, TrajectoryMeta::default()).unwrap();
    let ds = TrajectoryDataset::new(vec![t], ObservationMode::RawState, serde_json::json!({}))
        .unwrap();
    let enc = Encoder::identity(2);
    let goal = GoalSpec::single(&enc, &[0.0, 0.0]).unwrap();
    assert!(matches!(
        rwr_train(&ds, &enc, &goal, &tiny_rwr(0, 0.1)),
        Err(ControlError::MissingActions)
    ));
    assert!(RwrConfig { temperature: -0.1, ..RwrConfig::default() }.validate().is_err());
}

#[test]
fn expert_and_zero_policies_bracket_success() {
    let world = pm();
    let enc = Encoder::identity(2);
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let goal = vec![0.5, 0.5];
    let starts: Vec<Vec<f64>> = (0..100)
        .map(|_| {
            let a = rng.random_range(0.0..std::f64::consts::TAU);
            let r = rng.random_range(0.06..0.2);
            vec![0.5 + r * a.cos(), 0.5 + r * a.sin()]
        })
        .collect();
    let expert = ExpertPolicy { goal: goal.clone() };
    let good =
        eval_policy(&world, &expert, &enc, ObservationMode::RawState, &starts, &goal, &RolloutOptions::new(50, 1))
            .unwrap();
    assert!(good.success_rate >= 0.95);
    let zero = ZeroPolicy { action_dim: 2 };
    let bad =
        eval_policy(&world, &zero, &enc, ObservationMode::RawState, &starts, &goal, &RolloutOptions::new(50, 1))
            .unwrap();
    assert_eq!(bad.success_rate, 0.0);
    let again =
        eval_policy(&world, &expert, &enc, ObservationMode::RawState, &starts, &goal, &RolloutOptions::new(50, 1))
            .unwrap();
    assert_eq!(good, again);
    assert!(policy_eval_csv(&good).starts_with("episode,success,steps,final_error\n"));
}

#[test]
fn stochastic_evaluation_is_seeded() {
    let world = pm();
    let enc = Encoder::identity(2);
    let policy = GaussianPolicy::new(4, 2, vec![8], true, 3).unwrap();
    let starts = vec![vec![0.2, 0.2], vec![0.6, 0.1]];
    let run = |seed| {
        let opts = RolloutOptions { stochastic: true, ..RolloutOptions::new(10, seed) };
        eval_policy(&world, &policy, &enc, ObservationMode::RawState, &starts, &[0.5, 0.5], &opts)
            .unwrap()
    };
    assert_eq!(run(4), run(4));
    assert_ne!(run(4), run(5));
}

#[test]
fn policy_json_round_trip_is_exact() {
    let policy = GaussianPolicy::new(4, 2, vec![8], true, 3).unwrap();
    let back = GaussianPolicy::from_json(policy.to_json()).unwrap();
    assert_eq!(back, policy);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("policy.json");
    policy.save(&path).unwrap();
    assert_eq!(GaussianPolicy::load(&path).unwrap().flat_parameters(), policy.flat_parameters());
}
