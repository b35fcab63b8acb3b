use super::check::finite_difference_check;
use super::*;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.5..1.5)).collect())
}

#[test]
fn primitive_examples() {
    let mut g = Graph::new();
    let x = g.leaf(Tensor::vector(vec![3.0, 4.0]));
    let n = g.l2norm(x, 1e-300).unwrap();
    assert_eq!(g.value(n).item(), 5.0);

    let r = g.leaf(Tensor::vector(vec![-1.0, 2.0]));
    let r = g.relu(r);
    assert_eq!(g.value(r).data(), &[0.0, 2.0]);

    let m = g.leaf(Tensor::vector(vec![1.0, 2.0, 3.0]));
    let m = g.mean(m).unwrap();
    assert_eq!(g.value(m).item(), 2.0);
}

#[test]
fn l2norm_is_smoothed_at_zero() {
    let mut g = Graph::new();
    let x = g.leaf(Tensor::vector(vec![0.0, 0.0]));
    let n = g.l2norm(x, DEFAULT_NORM_EPS).unwrap();
    assert_eq!(g.value(n).item(), 1e-6);
    let grads = g.backward(n).unwrap();
    assert!(grads.wrt(x).data().iter().all(|v| v.is_finite()));
    assert!(g.l2norm(x, 0.0).is_err());
}

#[test]
fn shape_mismatch_names_both_shapes() {
    let mut g = Graph::new();
    let a = g.leaf(Tensor::vector(vec![1.0, 2.0]));
    let b = g.leaf(Tensor::vector(vec![1.0, 2.0, 3.0]));
    let err = g.add(a, b).unwrap_err();
    assert_eq!(
        err,
        GradError::ShapeMismatch {
            op: "add",
            left: vec![2],
            right: vec![3]
        }
    );
    let msg = err.to_string();
    assert!(msg.contains("[2]") && msg.contains("[3]"), "{msg}");

    let w = g.leaf(Tensor::zeros(&[2, 4]));
    assert!(g.matvec(w, b).is_err());
}

#[test]
fn log_mean_exp_examples() {
    let mut g = Graph::new();
    for c in [-3.5, 0.0, 7.25] {
        let x = g.leaf(Tensor::vector(vec![c; 3]));
        let l = g.log_mean_exp(x).unwrap();
        assert!((g.value(l).item() - c).abs() < 1e-15);
    }
    let z = g.leaf(Tensor::vector(vec![0.0, 0.0]));
    let l = g.log_mean_exp(z).unwrap();
    assert_eq!(g.value(l).item(), 0.0);
    // 1000 + log((e^0 + e^0) / 2) evaluated by hand
    let big = g.leaf(Tensor::vector(vec![1000.0, 1000.0]));
    let l = g.log_mean_exp(big).unwrap();
    assert_eq!(g.value(l).item(), 1000.0);

    let empty = g.leaf(Tensor::vector(vec![]));
    assert_eq!(g.log_mean_exp(empty), Err(GradError::EmptyInput("log_mean_exp")));
}

#[test]
fn backward_examples() {
    let mut g = Graph::new();
    let x = g.leaf(Tensor::vector(vec![3.0, 4.0]));
    let n = g.l2norm(x, 1e-300).unwrap();
    let grads = g.backward(n).unwrap();
    // central differences at h = 1e-5 give 0.6, 0.8 to ~1e-11
    let fd: Vec<f64> = (0..2)
        .map(|i| {
            let h = 1e-5;
            let mut p = [3.0, 4.0];
            let mut q = [3.0, 4.0];
            p[i] += h;
            q[i] -= h;
            let f = |v: [f64; 2]| (v[0] * v[0] + v[1] * v[1]).sqrt();
            (f(p) - f(q)) / (2.0 * h)
        })
        .collect();
    for (a, n) in grads.wrt(x).data().iter().zip(&fd) {
        assert!((a - n).abs() < 1e-9);
    }
    assert!((grads.wrt(x).data()[0] - 0.6).abs() < 1e-12);
    assert!((grads.wrt(x).data()[1] - 0.8).abs() < 1e-12);

    let mut g = Graph::new();
    let x = g.leaf(Tensor::vector(vec![1.0; 4]));
    let m = g.mean(x).unwrap();
    let grads = g.backward(m).unwrap();
    assert_eq!(grads.wrt(x).data(), &[0.25; 4]);

    let mut g = Graph::new();
    let x = g.leaf(Tensor::vector(vec![2.0]));
    let l = g.log(x);
    let e = g.exp(l);
    let s = g.sum(e);
    let grads = g.backward(s).unwrap();
    assert!((grads.wrt(x).data()[0] - 1.0).abs() < 1e-15);
}

#[test]
fn non_scalar_root_is_rejected() {
    let mut g = Graph::new();
    let x = g.leaf(Tensor::vector(vec![1.0, 2.0]));
    assert_eq!(g.backward(x).unwrap_err(), GradError::NonScalarRoot(vec![2]));
}

#[test]
fn every_primitive_matches_finite_differences() {
    let eps = DEFAULT_NORM_EPS;
    for seed in 0..10 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let params = vec![
            random(&[3, 4], &mut rng),
            random(&[4], &mut rng),
            random(&[3], &mut rng),
            random(&[5, 4], &mut rng),
        ];
        // positive inputs for log
        let pos = Tensor::vector((0..4).map(|_| rng.random_range(0.5..2.0)).collect());
        let check = finite_difference_check(&params, 1e-5, |g, v| {
            let (w, x, b, xs) = (v[0], v[1], v[2], v[3]);
            let mv = g.matvec(w, x)?;
            let mv = g.add(mv, b)?;
            let t = g.tanh(mv);
            let lin = g.linear(xs, w, b)?;
            let sq = g.square(lin);
            let sq = g.scale(sq, 0.25);
            let rn = g.row_l2norm(sq, eps)?;
            let picked = g.gather_rows(lin, &[4, 1, 4])?;
            let picked = g.rows(picked, 1, 2)?;
            let top = g.rows(lin, 1, 2)?;
            let top = g.add(top, picked)?;
            let bt = g.broadcast_rows(t, 2)?;
            let prod = g.mul(top, bt)?;
            let ab = g.tanh(prod);
            let ex = g.exp(t);
            let p = g.leaf(pos.clone());
            let lg = g.log(p);
            let lx = g.mul(lg, x)?;
            let parts = [g.sum(ab), g.l2norm(ex, eps)?, g.log_mean_exp(rn)?, g.mean(lx)?];
            let cat = g.concat(&parts)?;
            let shifted = g.add_scalar(cat, 0.3);
            let scaled = g.scale(shifted, -0.7);
            let diff = g.sub(scaled, cat)?;
            let t = g.tanh(diff);
            g.mean(t)
        })
        .unwrap();
        assert!(check.max_rel_error <= 1e-4, "seed {seed}: {check:?}");
    }
}

#[test]
fn relu_matches_finite_differences_away_from_kinks() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut w = random(&[6, 3], &mut rng);
    // keep preactivations well away from zero so the central difference never
    // straddles the kink
    let x = Tensor::vector(vec![0.4, -0.2, 0.9]);
    let pre = affine_forward(x.data(), 1, 3, w.data(), None, 6);
    for (j, p) in pre.iter().enumerate() {
        if p.abs() < 0.05 {
            w.data_mut()[j * 3] += 0.5;
        }
    }
    let check = finite_difference_check(&[w, x], 1e-5, |g, v| {
        let h = g.matvec(v[0], v[1])?;
        let r = g.relu(h);
        let s = g.square(r);
        Ok(g.sum(s))
    })
    .unwrap();
    assert!(check.max_rel_error <= 1e-4, "{check:?}");
}

#[test]
fn abs_matches_finite_differences_away_from_zero() {
    let x = Tensor::vector(vec![-0.7, 0.3, 1.2, -2.0]);
    let check = finite_difference_check(&[x], 1e-5, |g, v| {
        let a = g.abs(v[0]);
        let s = g.square(a);
        let t = g.add(s, a)?;
        g.mean(t)
    })
    .unwrap();
    assert!(check.max_rel_error <= 1e-4, "{check:?}");
}

#[test]
fn backward_is_linear_in_the_root() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let p = random(&[5], &mut rng);
    let grad_of = |which: u8| {
        let mut g = Graph::new();
        let x = g.leaf(p.clone());
        let t = g.tanh(x);
        let a = g.l2norm(t, DEFAULT_NORM_EPS).unwrap();
        let e = g.exp(x);
        let b = g.mean(e).unwrap();
        let root = match which {
            0 => a,
            1 => b,
            _ => {
                let c = g.concat(&[a, b]).unwrap();
                g.sum(c)
            }
        };
        g.backward(root).unwrap().wrt(x).clone()
    };
    let (ga, gb, gs) = (grad_of(0), grad_of(1), grad_of(2));
    for i in 0..5 {
        assert!((ga.data()[i] + gb.data()[i] - gs.data()[i]).abs() < 1e-14);
    }
}

#[test]
fn backward_visits_each_node_once() {
    // a node consumed twice must receive both contributions exactly once
    let mut g = Graph::new();
    let x = g.leaf(Tensor::scalar(3.0));
    let y = g.mul(x, x).unwrap();
    let z = g.add(y, y).unwrap();
    let grads = g.backward(z).unwrap();
    assert_eq!(grads.wrt(x).item(), 12.0);
    // running backward again gives the same answer rather than accumulating
    let grads = g.backward(z).unwrap();
    assert_eq!(grads.wrt(x).item(), 12.0);
    assert_eq!(g.node(y).grad().len(), g.node(y).shape().iter().product::<usize>().max(1));
}

#[test]
fn adam_zero_gradient_leaves_params() {
    let mut p = Tensor::vector(vec![1.0, -2.0]);
    let mut s = AdamState::new(2);
    s.first_moment = vec![0.5, 0.5];
    s.second_moment = vec![0.25, 0.25];
    s.step = 3;
    let before = p.clone();
    adam_step("w", &mut p, &Tensor::vector(vec![0.0, 0.0]), &mut s, 0.1).unwrap();
    assert_eq!(s.step, 4);
    assert!(s.first_moment.iter().all(|&m| m < 0.5 && m > 0.0));
    assert!(s.second_moment.iter().all(|&v| v < 0.25 && v > 0.0));
    // with nonzero historic moments the bias-corrected step is nonzero; a
    // fresh state must leave the parameters exactly where they were
    let mut fresh = AdamState::new(2);
    let mut q = before.clone();
    adam_step("w", &mut q, &Tensor::vector(vec![0.0, 0.0]), &mut fresh, 0.1).unwrap();
    assert_eq!(q, before);
    assert_ne!(p, before);
}

#[test]
fn adam_first_step_hand_evaluation() {
    // m = 0.1, v = 0.001; m̂ = 1, v̂ = 1; Δ = -0.1 · 1 / (1 + 1e-8)
    let mut p = Tensor::scalar(0.0);
    let mut s = AdamState::new(1);
    adam_step("theta", &mut p, &Tensor::scalar(1.0), &mut s, 0.1).unwrap();
    let expected = -0.1 / (1.0 + 1e-8);
    assert!((p.item() - expected).abs() < 1e-15);
    assert_eq!(s.step, 1);
}

#[test]
fn adam_is_deterministic_and_rejects_nan() {
    let run = || {
        let mut p = Tensor::vector(vec![0.3, -0.1]);
        let mut s = AdamState::new(2);
        for k in 0..5 {
            let g = Tensor::vector(vec![k as f64 * 0.1, -0.2]);
            adam_step("w", &mut p, &g, &mut s, 1e-3).unwrap();
        }
        (p, s)
    };
    assert_eq!(run(), run());

    let mut p = Tensor::vector(vec![0.0]);
    let mut s = AdamState::new(1);
    let err = adam_step("layer0.w", &mut p, &Tensor::vector(vec![f64::NAN]), &mut s, 1e-3);
    assert_eq!(err, Err(GradError::NonFinite("layer0.w".into())));
    assert_eq!(s.step, 0);
}

proptest! {
    #[test]
    fn log_mean_exp_is_permutation_invariant(
        xs in proptest::collection::vec(-50.0f64..50.0, 1..20),
        seed in 0u64..1000,
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut ys = xs.clone();
        for i in (1..ys.len()).rev() {
            ys.swap(i, rng.random_range(0..=i));
        }
        prop_assert!((log_mean_exp(&xs) - log_mean_exp(&ys)).abs() <= 1e-12);
        let m = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lme = log_mean_exp(&xs);
        prop_assert!(lme <= m + 1e-12);
        prop_assert!(lme >= m - (xs.len() as f64).ln() - 1e-12);
    }
}
