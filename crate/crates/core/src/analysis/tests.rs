use super::*;
use crate::control::{mppi_evaluate, MppiConfig, Task};
use crate::encoder::{Activation, EncoderConfig};
use crate::trajstore::TrajectoryMeta;
use crate::worlds::{Difficulty, ObservationMode, PointMassWorld, World};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn pm() -> World {
    World::PointMass(PointMassWorld::default())
}

fn expert_dataset(n: usize, noise: f64, seed: u64) -> TrajectoryDataset {
    let world = pm();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let trajs = (0..n)
        .map(|_| {
            let (s, g) = world.sample_task(Difficulty::Hard, &mut rng);
            world.expert_rollout(&s, &g, noise, 200, ObservationMode::RawState, &mut rng).unwrap()
        })
        .collect();
    TrajectoryDataset::new(trajs, ObservationMode::RawState, serde_json::json!({})).unwrap()
}

fn frames_traj(frames: Vec<Vec<f64>>) -> Trajectory {
    Trajectory::new(frames, None, None, TrajectoryMeta::default()).unwrap()
}

fn random_encoder(seed: u64) -> Encoder {
    Encoder::init(EncoderConfig {
        input_dim: 2,
        hidden_widths: vec![16],
        output_dim: 3,
        activation: Activation::Relu,
        init_seed: seed,
    })
    .unwrap()
}

#[test]
fn bump_fraction_examples() {
    assert!((bump_fraction(&[1.0, 0.8, 0.9, 0.5]).unwrap() - 1.0 / 3.0).abs() < 1e-15);
    assert_eq!(bump_fraction(&[3.0, 2.0, 1.0, 0.0]).unwrap(), 0.0);
    assert_eq!(bump_fraction(&[1.0, 1.0, 1.0]).unwrap(), 0.0);
    assert!(matches!(bump_fraction(&[1.0]), Err(AnalysisError::CurveTooShort(1))));
}

proptest! {
    #[test]
    fn bumps_and_non_increasing_steps_partition(curve in prop::collection::vec(-5.0f64..5.0, 2..50)) {
        let bumps = bump_fraction(&curve).unwrap();
        let flat_or_down = curve.windows(2).filter(|w| w[1] <= w[0]).count() as f64
            / (curve.len() - 1) as f64;
        prop_assert_eq!(bumps + flat_or_down, 1.0);
        prop_assert!((0.0..=1.0).contains(&bumps));
    }

    #[test]
    fn bump_report_ignores_trajectory_order(seed in 0u64..500, rot in 1usize..7) {
        let ds = expert_dataset(8, 0.5, seed);
        let enc = random_encoder(seed);
        let order: Vec<usize> = (0..8).map(|i| (i + rot) % 8).collect();
        let shuffled = ds.subset(order).unwrap();
        let a = dataset_bump_report(&enc, &ds, None).unwrap();
        let b = dataset_bump_report(&enc, &shuffled, None).unwrap();
        prop_assert!((a.mean - b.mean).abs() < 1e-12);
        prop_assert!((a.std - b.std).abs() < 1e-12);
        let lo = a.fractions.iter().map(|f| f.1).fold(1.0, f64::min);
        let hi = a.fractions.iter().map(|f| f.1).fold(0.0, f64::max);
        prop_assert!(a.mean >= lo - 1e-12 && a.mean <= hi + 1e-12);
    }
}

#[test]
fn curves_normalize_and_flag_degenerate() {
    let ds = expert_dataset(5, 0.0, 1);
    let id = Encoder::identity(2);
    for (i, t) in ds.trajectories().iter().enumerate() {
        let c = distance_curve(&id, i, t, None, true).unwrap();
        assert_eq!(c.values[0], 1.0);
        assert!(c.normalized && !c.degenerate);
        assert!(c.values.windows(2).all(|w| w[1] < w[0]), "expert curve not decreasing");
        assert_eq!(c.values.len(), t.len());
    }
    let collapsed = Encoder::constant(2, 3);
    let c = distance_curve(&collapsed, 0, ds.get(0), None, true).unwrap();
    assert!(c.degenerate && !c.normalized);
    assert!(c.values.iter().all(|&v| v == 0.0));
}

#[test]
fn curve_with_explicit_goal_spec() {
    let id = Encoder::identity(2);
    let t = frames_traj(vec![vec![0.0, 0.0], vec![3.0, 0.0]]);
    let goal = GoalSpec::single(&id, &[3.0, 4.0]).unwrap();
    let c = distance_curve(&id, 7, &t, Some(&goal), false).unwrap();
    assert_eq!(c.values, vec![5.0, 4.0]);
    assert_eq!(c.traj_id, 7);
}

#[test]
fn bump_report_edge_cases() {
    let ds = expert_dataset(3, 0.0, 2);
    let id = Encoder::identity(2);
    let single = ds.subset([0]).unwrap();
    let r = dataset_bump_report(&id, &single, None).unwrap();
    assert_eq!((r.mean, r.std), (0.0, 0.0));
    assert!(matches!(
        dataset_bump_report(&id, &ds, Some(10_000)),
        Err(AnalysisError::NoQualifyingTrajectory(10_000))
    ));
    let shortest = ds.trajectories().iter().map(|t| t.len()).min().unwrap();
    let r = dataset_bump_report(&id, &ds, Some(shortest)).unwrap();
    assert_eq!(r.fractions.len(), 3);
    let one_frame = TrajectoryDataset::new(
        vec![frames_traj(vec![vec![0.1, 0.2]])],
        ObservationMode::RawState,
        serde_json::json!({}),
    )
    .unwrap();
    assert!(matches!(
        dataset_bump_report(&id, &one_frame, None),
        Err(AnalysisError::CurveTooShort(1))
    ));
}

#[test]
fn histogram_properties() {
    let ds = expert_dataset(6, 0.0, 3);
    let transitions: usize = ds.trajectories().iter().map(|t| t.len() - 1).sum();

    let collapsed = Encoder::constant(2, 3);
    let h = reward_histogram(&[&collapsed], &ds, 21, None).unwrap();
    assert_eq!(h.counts_a[10], transitions);
    assert_eq!(h.counts_a.iter().sum::<usize>(), transitions);

    let id = Encoder::identity(2);
    let h = reward_histogram(&[&id], &ds, 20, None).unwrap();
    assert_eq!(h.counts_a[..10].iter().sum::<usize>(), 0, "identity rewards must be positive");
    assert_eq!(h.edges.len(), 21);

    let enc = random_encoder(4);
    let h = reward_histogram(&[&enc, &enc], &ds, 15, None).unwrap();
    for (r, b) in h.ratios.as_ref().unwrap().iter().zip(h.counts_b.as_ref().unwrap()) {
        match r {
            Some(v) => assert_eq!(*v, 0.0),
            None => assert_eq!(*b, 0),
        }
    }
    assert_eq!(h.counts_a.iter().sum::<usize>(), transitions);
    assert!(matches!(reward_histogram(&[], &ds, 5, None), Err(AnalysisError::EncoderCount(0))));
    let csv = histogram_csv(&h);
    assert!(csv.starts_with("bin_lo,bin_hi,count_a,count_b,ratio\n"));
    assert_eq!(csv.lines().count(), 16);
}

#[test]
fn histogram_mass_per_trajectory() {
    let ds = expert_dataset(4, 0.5, 5);
    let enc = random_encoder(1);
    for t in ds.trajectories() {
        let one = TrajectoryDataset::new(vec![t.clone()], ObservationMode::RawState, serde_json::json!({}))
            .unwrap();
        let h = reward_histogram(&[&enc], &one, 9, None).unwrap();
        assert_eq!(h.counts_a.iter().sum::<usize>(), t.len() - 1);
    }
}

#[test]
fn ols_examples() {
    let r = ols(&[0.0, 1.0, 2.0], &[1.0, 3.0, 5.0]).unwrap();
    assert!((r.slope - 2.0).abs() < 1e-12 && (r.intercept - 1.0).abs() < 1e-12);
    assert!((r.r2 - 1.0).abs() < 1e-12);
    let r = ols(&[1.0, 1.0, 1.0], &[0.0, 1.0, 2.0]).unwrap();
    assert!(r.degenerate && r.r2 == 0.0);
    assert!(matches!(ols(&[1.0], &[1.0]), Err(AnalysisError::TooFewSamples(1))));
    // a known fit: x = 1..5, y = [2, 4, 5, 4, 5] has R² = 0.6
    let r = ols(&[1.0, 2.0, 3.0, 4.0, 5.0], &[2.0, 4.0, 5.0, 4.0, 5.0]).unwrap();
    assert!((r.r2 - 0.6).abs() < 1e-12);
    assert!((r.slope - 0.6).abs() < 1e-12 && (r.intercept - 2.2).abs() < 1e-12);
}

fn mppi_episodes(enc: &Encoder) -> (Vec<crate::control::EpisodeResult>, Vec<Task>) {
    let world = pm();
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let tasks: Vec<Task> = (0..6)
        .map(|_| {
            let (start, goal) = world.sample_task(Difficulty::Easy, &mut rng);
            Task { start, goal }
        })
        .collect();
    let eps = mppi_evaluate(&world, &tasks, ObservationMode::RawState, enc, &MppiConfig::default(), 50, 1)
        .unwrap();
    (eps, tasks)
}

#[test]
fn identity_encoder_correlates_perfectly() {
    let id = Encoder::identity(2);
    let (eps, tasks) = mppi_episodes(&id);
    let goals: Vec<GoalSpec> = tasks.iter().map(|t| GoalSpec::single(&id, &t.goal).unwrap()).collect();
    let rewards: Vec<Vec<f64>> = eps.iter().map(|e| e.true_rewards()).collect();
    let episodes: Vec<RewardEpisode> = eps
        .iter()
        .zip(&goals)
        .zip(&rewards)
        .map(|((e, g), r)| RewardEpisode {
            observations: &e.observations,
            true_rewards: r,
            goal: g,
        })
        .collect();
    let (pairs, report) = reward_correlation(&id, &episodes).unwrap();
    assert!(report.r2 >= 1.0 - 1e-9, "{report:?}");
    assert!((report.slope - 1.0).abs() < 1e-9 && report.intercept.abs() < 1e-9);
    assert_eq!(report.n, pairs.len());
    let csv = correlation_csv(&pairs);
    assert!(csv.starts_with("embedding_reward,true_reward\n"));
    assert_eq!(correlation_json(&report)["n"], pairs.len());

    let constant = Encoder::constant(2, 2);
    let goals: Vec<GoalSpec> =
        tasks.iter().map(|t| GoalSpec::single(&constant, &t.goal).unwrap()).collect();
    let episodes: Vec<RewardEpisode> = eps
        .iter()
        .zip(&goals)
        .zip(&rewards)
        .map(|((e, g), r)| RewardEpisode {
            observations: &e.observations,
            true_rewards: r,
            goal: g,
        })
        .collect();
    let (_, report) = reward_correlation(&constant, &episodes).unwrap();
    assert!(report.degenerate && report.r2 == 0.0);
}

#[test]
fn prop2_examples() {
    let ds = expert_dataset(10, 0.0, 7);
    let id = Encoder::identity(2);
    let r = prop2_check(&id, ds.trajectories()).unwrap();
    assert_eq!(r.fraction, 1.0);
    assert_eq!(r.steps, ds.trajectories().iter().map(|t| t.len() - 1).sum::<usize>());
    let r = prop2_check(&Encoder::constant(2, 4), ds.trajectories()).unwrap();
    assert_eq!(r.fraction, 0.0);
}

#[test]
fn csv_writers() {
    let curves = vec![DistanceCurve {
        traj_id: 3,
        values: vec![1.0, 0.5],
        normalized: true,
        degenerate: false,
    }];
    assert_eq!(curves_csv(&curves), "traj_id,step,distance\n3,0,1e0\n3,1,5e-1\n");
    let report = BumpReport {
        fractions: vec![(0, 0.25), (2, 0.0)],
        mean: 0.125,
        std: 0.125,
        skipped_short: vec![],
        degenerate: vec![1],
    };
    assert_eq!(
        bumps_csv(&report),
        "traj_id,bump_fraction\n0,2.5e-1\n2,0e0\nmean,1.25e-1\nstd,1.25e-1\n"
    );
}
