use mtldyn_core::benefit::benefit_bounds_sample;
use mtldyn_core::linalg::{argmax_labels, gaussian_matrix, max_principal_angle, svd};
use mtldyn_core::student::{
    init_student, label_losses, loss_gradients, train, train_loss, Activation, Init, Student, StudentArch, TrainConfig,
};
use mtldyn_core::tadynamics::{integrate_multitask, integrate_ta, rank1_rhs};
use mtldyn_core::teacher::{
    make_related_pair, make_teacher, perturb_teacher, relatedness, sample_dataset, Dataset, LabelSharpness, TeacherSpec,
};
use mtldyn_core::{Matrix, RngSeed};
use proptest::prelude::*;

fn matrix(rows: usize, cols: usize, scale: f64, seed: RngSeed) -> Matrix {
    gaussian_matrix(rows, cols, scale * scale, seed).unwrap()
}

fn random_dataset(n1: usize, c: usize, n: usize, seed: RngSeed) -> Dataset {
    let x = matrix(n1, n, 1.0, seed.derive("x"));
    let labels = argmax_labels(&matrix(c, n, 1.0, seed.derive("y"))).unwrap();
    Dataset {
        x,
        clean_labels: labels.clone(),
        noisy_labels: labels,
        input_covariance: Matrix::identity(n1, n1),
        n_classes: c,
        soft_targets: None,
    }
}

fn random_student(widths: &[usize], act: Activation, seed: RngSeed) -> Student {
    let arch = StudentArch { layer_widths: widths.to_vec(), activation: act, init: Init::Random { scale: 1.0 } };
    init_student(&arch, None, seed).unwrap()
}

/// Smallest |pre-activation| over every hidden unit and sample.
fn min_preactivation(s: &Student, x: &Matrix) -> f64 {
    let mut h = x.clone();
    let mut min = f64::INFINITY;
    for (l, w) in s.layers.iter().enumerate() {
        h = w * h;
        if l + 1 < s.layers.len() {
            min = min.min(h.amin());
            h.apply(|v| *v = v.max(0.0));
        }
    }
    min
}

fn widths_strategy() -> impl Strategy<Value = Vec<usize>> {
    (1usize..=8, prop::collection::vec(1usize..=6, 1..=2), 2usize..=5).prop_map(|(n1, hidden, c)| {
        let mut w = vec![n1];
        w.extend(hidden);
        w.push(c);
        w
    })
}

/// Task-A and task-B composites of the shared-trunk ODE, both starting at `s0`.
fn shared_trunk(s0: f64, s_hat_a: f64, s_hat_b: f64, r: f64) -> (Vec<f64>, Vec<f64>) {
    let g = |s: f64| 0.25 / (1.0 + 0.6 * s * s).sqrt();
    let head = (s0 / (1.0 + r).sqrt()).sqrt();
    let (a, b) = integrate_multitask(&[head], &[head], &[s_hat_a], &[s_hat_b], r, 1e-2, 1500, 50, &g, &g).unwrap();
    (a.leading(), b.leading())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn gradients_match_central_differences(widths in widths_strategy(), relu in any::<bool>(), seed in any::<u64>()) {
        let seed = RngSeed(seed);
        let act = if relu { Activation::Relu } else { Activation::Linear };
        let n1 = widths[0];
        let c = *widths.last().unwrap();
        let d = random_dataset(n1, c, 5, seed.derive("data"));
        let s = random_student(&widths, act, seed.derive("student"));
        if relu {
            prop_assume!(min_preactivation(&s, &d.x) > 1e-3);
        }
        let (_, grads) = loss_gradients(&s, &d).unwrap();
        let eps = 1e-5;
        for (l, g) in grads.iter().enumerate() {
            for idx in 0..g.len() {
                let mut plus = s.clone();
                plus.layers[l][idx] += eps;
                let mut minus = s.clone();
                minus.layers[l][idx] -= eps;
                let fd = (train_loss(&plus, &d).unwrap() - train_loss(&minus, &d).unwrap()) / (2.0 * eps);
                prop_assert!((fd - g[idx]).abs() < 1e-6, "layer {l} entry {idx}: {fd} vs {}", g[idx]);
            }
        }
    }

    #[test]
    fn constant_logit_shift_leaves_loss_unchanged(widths in widths_strategy(), seed in any::<u64>()) {
        let seed = RngSeed(seed);
        let c = *widths.last().unwrap();
        let d = random_dataset(widths[0], c, 7, seed.derive("data"));
        let s = random_student(&widths, Activation::Linear, seed.derive("student"));
        let v = matrix(1, widths[widths.len() - 2], 1.0, seed.derive("shift"));
        let mut shifted = s.clone();
        *shifted.layers.last_mut().unwrap() += Matrix::from_element(c, 1, 1.0) * v;
        let (a, b) = (train_loss(&s, &d).unwrap(), train_loss(&shifted, &d).unwrap());
        prop_assert!((a - b).abs() < 1e-12, "{a} vs {b}");
    }

    #[test]
    fn sample_bounds_sandwich_sample_benefit(c in 2usize..6, n1 in 1usize..8, scale in 0.1f64..5.0, seed in any::<u64>()) {
        let seed = RngSeed(seed);
        let w_a = matrix(c, n1, scale, seed.derive("a"));
        let w_t = matrix(c, n1, scale, seed.derive("t"));
        let d = random_dataset(n1, c, 50, seed.derive("data"));
        let mean = |w: &Matrix| {
            let l = label_losses(&(w * &d.x), &d.noisy_labels);
            l.iter().sum::<f64>() / l.len() as f64
        };
        let mt = mean(&w_t) - mean(&w_a);
        let (lower, upper) = benefit_bounds_sample(&w_a, &w_t, &d.x, &d.noisy_labels).unwrap();
        prop_assert!(lower <= mt + 1e-12 && mt <= upper + 1e-12, "{lower} <= {mt} <= {upper}");
    }

    #[test]
    fn related_pairs_have_exact_overlap(r in 0f64..=1.0, k in 1usize..4, extra in 0usize..20, c in 4usize..8, seed in any::<u64>()) {
        let n1 = 2 * k + extra;
        let spec = TeacherSpec::uniform(n1, c, k, 3.0, 1.0);
        let (a, b) = make_related_pair(&spec, &spec, r, RngSeed(seed)).unwrap();
        let overlap = relatedness(&a, &b).unwrap();
        let err = (overlap - Matrix::identity(k, k) * r).amax();
        prop_assert!(err < 1e-8, "max deviation {err}");
    }

    #[test]
    fn rhs_vanishes_at_teacher_value(s_hat in 1e-3f64..50.0, a in 0.05f64..2.0) {
        let g = move |s: f64| 0.25 / (1.0 + a * s * s).sqrt();
        prop_assert_eq!(rank1_rhs(s_hat, s_hat, &g).unwrap(), 0.0);
    }

    // Both tasks start below their teacher values, as in every experiment,
    // and the auxiliary task does not saturate first. A weaker auxiliary
    // task that settles early then shrinks the trunk and can slow task A.
    #[test]
    fn relatedness_speeds_growth_from_below(
        s_hat_a in 0.5f64..10.0, ratio in 1f64..10.0, frac in 0.05f64..0.95, r in 0.05f64..=1.0,
    ) {
        let s_hat_b = ratio * s_hat_a;
        let s0 = frac * s_hat_a;
        let single = shared_trunk(s0, s_hat_a, s_hat_b, 0.0).0;
        let multi = shared_trunk(s0, s_hat_a, s_hat_b, r).0;
        for (t, (s, m)) in single.iter().zip(&multi).enumerate() {
            prop_assert!(*m >= s - 1e-6, "record {t}: {m} < {s}");
        }
    }

    // Monotone in r while both tasks are still below their teacher values.
    // Past that point the auxiliary pull can overshoot or shrink the trunk
    // and curves for different r may cross.
    #[test]
    fn growth_is_monotone_in_relatedness(s_hat_a in 0.5f64..10.0, s_hat_b in 0.5f64..50.0, frac in 0.05f64..0.95) {
        let s0 = frac * s_hat_a.min(s_hat_b);
        let runs: Vec<(Vec<f64>, Vec<f64>)> =
            [0.0, 0.25, 0.5, 0.75, 1.0].into_iter().map(|r| shared_trunk(s0, s_hat_a, s_hat_b, r)).collect();
        for pair in runs.windows(2) {
            let growing = |t: usize| pair.iter().all(|(a, b)| a[t] < s_hat_a && b[t] < s_hat_b);
            for t in (0..pair[0].0.len()).take_while(|&t| growing(t)) {
                let (lo, hi) = (pair[0].0[t], pair[1].0[t]);
                prop_assert!(hi >= lo - 1e-6, "record {t}: {hi} < {lo}");
            }
        }
    }
}

#[test]
fn euler_error_is_first_order_in_step() {
    let g = |s: f64| 0.25 / (1.0 + 0.6 * s * s).sqrt();
    let time = 20.0;
    let at = |eta: f64| {
        let steps = (time / eta).round() as usize;
        *integrate_ta(&[0.05], &[4.0], eta, steps, steps, &g).unwrap().leading().last().unwrap()
    };
    let (a, b, c) = (at(0.04), at(0.02), at(0.01));
    let ratio = (a - b).abs() / (b - c).abs();
    assert!((1.6..2.4).contains(&ratio), "error ratio {ratio}");
}

#[test]
fn tiny_noise_keeps_teacher_direction() {
    let t = make_teacher(&TeacherSpec::uniform(30, 4, 1, 3.0, 0.0), RngSeed(3)).unwrap();
    let nt = perturb_teacher(&t, 1e-13, RngSeed(4)).unwrap();
    let top = |m: &Matrix| m.columns(0, 1).into_owned();
    assert!(max_principal_angle(&top(&nt.svd.v), &top(&t.svd.v)) < 1e-5);
    let moved = perturb_teacher(&t, 1.0, RngSeed(4)).unwrap();
    assert_ne!(moved.svd.s[0], t.svd.s[0]);
}

#[test]
fn datasets_are_pure_functions_of_their_inputs() {
    let t = make_teacher(&TeacherSpec::uniform(12, 3, 1, 3.0, 1.0), RngSeed(5)).unwrap();
    let nt = perturb_teacher(&t, 1.0, RngSeed(6)).unwrap();
    let cx = Matrix::identity(12, 12);
    let a = sample_dataset(&nt, &t, 40, &cx, RngSeed(7)).unwrap();
    let b = sample_dataset(&nt, &t, 40, &cx, RngSeed(7)).unwrap();
    assert_eq!(a, b);
    let c = sample_dataset(&nt, &t, 40, &cx, RngSeed(8)).unwrap();
    assert_ne!(a.x, c.x);
}

#[test]
fn training_aligned_run_keeps_its_frames() {
    let (n1, c) = (8, 2);
    let spec = TeacherSpec::uniform(n1, c, 1, 3.0, 1.0).with_sharpness(LabelSharpness::Beta(1.0));
    let t = make_teacher(&spec, RngSeed(21)).unwrap();
    let nt = perturb_teacher(&t, 1.0, RngSeed(22)).unwrap();
    let d = sample_dataset(&nt, &t, 20_000, &Matrix::identity(n1, n1), RngSeed(23)).unwrap();
    let arch = StudentArch {
        layer_widths: vec![n1, 1, c],
        activation: Activation::Linear,
        init: Init::TrainingAligned { s0: vec![0.5] },
    };
    let s = init_student(&arch, Some(&nt.aligned_svd), RngSeed(24)).unwrap();
    let mut cfg = TrainConfig::new(1e-3, 5000);
    cfg.record_every = 500;
    cfg.n_test = 100;
    let traj = train(&s, &d, &t, &cfg).unwrap();
    let frame = |m: &Matrix| m.columns(0, 1).into_owned();
    for w in &traj.composites {
        let f = svd(w).unwrap();
        let du = max_principal_angle(&frame(&f.u), &frame(&nt.aligned_svd.u));
        let dv = max_principal_angle(&frame(&f.v), &frame(&nt.aligned_svd.v));
        assert!(du < 1e-2 && dv < 1e-2, "angles {du} {dv}");
    }
}

#[test]
fn multitask_zero_relatedness_matches_single_task_exactly() {
    let g = |s: f64| 0.25 / (1.0 + 0.6 * s * s).sqrt();
    let (a, _) = integrate_multitask(&[0.3, 0.2], &[0.4, 0.1], &[3.0, 1.0], &[9.0, 2.0], 0.0, 1e-2, 700, 7, &g, &g).unwrap();
    let single = integrate_ta(&[0.09, 0.04], &[3.0, 1.0], 1e-2, 700, 7, &g).unwrap();
    assert_eq!(a.states, single.states);
}
