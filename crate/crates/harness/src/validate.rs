//! Invariant checks shared by `mtldyn validate` and the acceptance suite.

use mtldyn_core::gmatrix::{estimate_g, quadrature_g, GFunction};
use mtldyn_core::linalg::random_frame;
use mtldyn_core::student::{
    init_student, loss_gradients, sgd_step, train_loss, Activation, Init, Student, StudentArch, TrainConfig,
};
use mtldyn_core::tadynamics::{integrate_multitask, integrate_ta};
use mtldyn_core::teacher::{make_teacher, perturb_teacher, sample_dataset, Dataset, TeacherSpec};
use mtldyn_core::{Matrix, RngSeed};
use rand::Rng;
use serde::Serialize;

use crate::Result;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Check {
    pub name: &'static str,
    pub passed: bool,
    /// Worst observed value of the checked quantity.
    pub value: f64,
    pub threshold: f64,
    pub detail: String,
}

impl std::fmt::Display for Check {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let tag = if self.passed { "PASS" } else { "FAIL" };
        write!(f, "{tag} {}: {:.3e} (limit {:.3e}) {}", self.name, self.value, self.threshold, self.detail)
    }
}

fn problem(n1: usize, c: usize, n: usize, seed: RngSeed) -> Result<Dataset> {
    let t = make_teacher(&TeacherSpec::uniform(n1, c, 1, 3.0, 1.0), seed.derive("teacher"))?;
    let nt = perturb_teacher(&t, 1.0, seed.derive("noise"))?;
    Ok(sample_dataset(&nt, &t, n, &Matrix::identity(n1, n1), seed.derive("data"))?)
}

fn random_widths(rng: &mut impl Rng, max_c: usize, max_n1: usize, depth: (usize, usize)) -> Vec<usize> {
    let layers = rng.random_range(depth.0..=depth.1);
    let mut w = vec![rng.random_range(2..=max_n1)];
    for _ in 1..layers {
        w.push(rng.random_range(2..=6));
    }
    w.push(rng.random_range(2..=max_c));
    w
}

/// Smallest |pre-activation| at any hidden unit of a ReLU student.
fn min_preactivation(s: &Student, x: &Matrix) -> f64 {
    let mut h = x.clone();
    let mut m = f64::INFINITY;
    for w in &s.layers[..s.layers.len() - 1] {
        let z = w * &h;
        m = z.iter().fold(m, |a, v| a.min(v.abs()));
        h = z.map(|v| v.max(0.0));
    }
    m
}

/// Analytic gradients against central differences. ReLU instances with a
/// pre-activation inside the probe width of a kink are redrawn.
pub fn gradient_check(instances: usize, eps: f64, seed: RngSeed) -> Result<Check> {
    let mut rng = seed.derive("gradient-check").rng();
    let mut worst: f64 = 0.0;
    let mut redrawn = 0;
    let mut done = 0;
    let mut attempt = 0u64;
    while done < instances {
        attempt += 1;
        let activation = if done % 2 == 0 { Activation::Linear } else { Activation::Relu };
        let widths = random_widths(&mut rng, 5, 8, (2, 4));
        let (n1, c) = (widths[0], *widths.last().unwrap());
        let s_seed = seed.derive_indexed("instance", attempt);
        let d = problem(n1, c, rng.random_range(3..=12), s_seed)?;
        let arch = StudentArch { layer_widths: widths, activation, init: Init::Random { scale: 1.5 } };
        let mut s = init_student(&arch, None, s_seed.derive("init"))?;
        if activation == Activation::Relu && min_preactivation(&s, &d.x) < 1e-3 {
            redrawn += 1;
            continue;
        }
        let (_, grads) = loss_gradients(&s, &d)?;
        for l in 0..s.layers.len() {
            for k in 0..s.layers[l].len() {
                let orig = s.layers[l][k];
                s.layers[l][k] = orig + eps;
                let up = train_loss(&s, &d)?;
                s.layers[l][k] = orig - eps;
                let down = train_loss(&s, &d)?;
                s.layers[l][k] = orig;
                worst = worst.max(((up - down) / (2.0 * eps) - grads[l][k]).abs());
            }
        }
        done += 1;
    }
    Ok(Check {
        name: "gradient",
        passed: worst < 1e-6,
        value: worst,
        threshold: 1e-6,
        detail: format!("{instances} instances, {redrawn} near-kink draws replaced"),
    })
}

/// Monte Carlo `G` against Gauss-Hermite quadrature on rank <= 2 weights,
/// in units of the estimate's standard error, plus the exact `W = 0` case.
pub fn g_check(instances: usize, n_samples: usize, seed: RngSeed) -> Result<Check> {
    let mut rng = seed.derive("g-check").rng();
    let mut worst_z: f64 = 0.0;
    let mut worst_zero: f64 = 0.0;
    for i in 0..instances {
        let c = rng.random_range(2..=5);
        let n1 = rng.random_range(2..=6);
        let rank = rng.random_range(1..=2usize.min(c).min(n1));
        let u = random_frame(c, rank, &mut rng);
        let v = random_frame(n1, rank, &mut rng);
        let mut w = Matrix::zeros(c, n1);
        for k in 0..rank {
            w += u.column(k) * v.column(k).transpose() * rng.random_range(0.3..4.0);
        }
        let c_x = Matrix::identity(n1, n1);
        let est = estimate_g(&w, &c_x, n_samples, seed.derive_indexed("g-instance", i as u64))?;
        let exact = quadrature_g(&w, &c_x, 80)?;
        for ((m, q), se) in est.g.iter().zip(exact.iter()).zip(est.std_err.iter()) {
            let z = (m - q).abs() / se.max(1e-300);
            worst_z = worst_z.max(z);
        }
        let zero = estimate_g(&Matrix::zeros(c, n1), &c_x, 10, RngSeed(i as u64))?;
        let cf = c as f64;
        for r in 0..c {
            for k in 0..c {
                let want = if r == k { 1.0 / cf } else { 0.0 } - 1.0 / (cf * cf);
                worst_zero = worst_zero.max((zero.g[(r, k)] - want).abs());
            }
        }
    }
    Ok(Check {
        name: "g-matrix",
        passed: worst_z <= 3.0 && worst_zero == 0.0,
        value: worst_z,
        threshold: 3.0,
        detail: format!("{instances} instances, {n_samples} samples, W = 0 max error {worst_zero:e}"),
    })
}

fn random_linear(seed: RngSeed, rng: &mut impl Rng) -> Result<(Student, Dataset)> {
    let widths = random_widths(rng, 4, 8, (2, 3));
    let (n1, c) = (widths[0], *widths.last().unwrap());
    let d = problem(n1, c, 20, seed)?;
    let arch = StudentArch { layer_widths: widths, activation: Activation::Linear, init: Init::Random { scale: 1.0 } };
    Ok((init_student(&arch, None, seed.derive("init"))?, d))
}

fn balance_drift(a: &Student, b: &Student) -> f64 {
    let imbalance = |s: &Student, l: usize| {
        let (lo, hi) = (&s.layers[l], &s.layers[l + 1]);
        hi.transpose() * hi - lo * lo.transpose()
    };
    (0..a.layers.len() - 1).map(|l| (imbalance(b, l) - imbalance(a, l)).norm()).fold(0.0, f64::max)
}

fn drift_after(s0: &Student, d: &Dataset, eta: f64, steps: usize) -> Result<f64> {
    let cfg = TrainConfig::new(eta, steps);
    let mut s = s0.clone();
    for _ in 0..steps {
        s = sgd_step(&s, d, &cfg)?;
    }
    Ok(balance_drift(s0, &s))
}

/// Drift of `W_{l+1}ᵀ W_{l+1} − W_l W_lᵀ` under gradient descent at `eta`,
/// and the reduction when the same training time is covered at `eta / 10`.
pub fn conservation_check(runs: usize, eta: f64, steps: usize, seed: RngSeed) -> Result<Check> {
    let mut rng = seed.derive("conservation").rng();
    let mut worst: f64 = 0.0;
    let mut worst_ratio = f64::INFINITY;
    for i in 0..runs {
        let (s0, d) = random_linear(seed.derive_indexed("conservation-run", i as u64), &mut rng)?;
        let coarse = drift_after(&s0, &d, eta, steps)?;
        let fine = drift_after(&s0, &d, eta / 10.0, steps * 10)?;
        worst = worst.max(coarse);
        worst_ratio = worst_ratio.min(coarse / fine.max(1e-300));
    }
    Ok(Check {
        name: "conservation",
        passed: worst < 1e-2 && worst_ratio >= 5.0,
        value: worst,
        threshold: 1e-2,
        detail: format!("{runs} runs, smallest shrink factor at eta/10: {worst_ratio:.1}"),
    })
}

/// Full-batch training loss never increases from one step to the next.
pub fn descent_check(instances: usize, eta: f64, steps: usize, seed: RngSeed) -> Result<Check> {
    let mut rng = seed.derive("descent").rng();
    let cfg = TrainConfig::new(eta, steps);
    let mut worst: f64 = f64::NEG_INFINITY;
    let mut violations = 0;
    for i in 0..instances {
        let (mut s, d) = random_linear(seed.derive_indexed("descent-run", i as u64), &mut rng)?;
        let mut prev = train_loss(&s, &d)?;
        for _ in 0..steps {
            s = sgd_step(&s, &d, &cfg)?;
            let cur = train_loss(&s, &d)?;
            worst = worst.max(cur - prev);
            if cur > prev {
                violations += 1;
            }
            prev = cur;
        }
    }
    Ok(Check {
        name: "descent",
        passed: violations == 0,
        value: worst,
        threshold: 0.0,
        detail: format!("{instances} instances x {steps} steps, {violations} increases"),
    })
}

/// The shared-trunk singular-value ODE at zero relatedness against the
/// single-task ODE. The coupling relation is enforced inside the integrator.
pub fn ode_check(seed: RngSeed) -> Result<Check> {
    let g = |s: f64| 0.25 / (1.0 + 0.6 * s * s).sqrt();
    let mut rng = seed.derive("ode").rng();
    let mut worst: f64 = 0.0;
    for _ in 0..10 {
        let k = rng.random_range(1..=4);
        let s0: Vec<f64> = (0..k).map(|_| rng.random_range(0.05..2.0)).collect();
        let s_a: Vec<f64> = (0..k).map(|_| rng.random_range(0.5..5.0)).collect();
        let s_b: Vec<f64> = (0..k).map(|_| rng.random_range(0.01..50.0)).collect();
        let heads: Vec<f64> = s0.iter().map(|s| s.sqrt()).collect();
        let single = integrate_ta(&s0, &s_a, 1e-2, 2000, 10, &g)?;
        let gd: &dyn GFunction = &g;
        let (multi, _) = integrate_multitask(&heads, &heads, &s_a, &s_b, 0.0, 1e-2, 2000, 10, gd, gd)?;
        for (x, y) in single.states.iter().zip(&multi.states) {
            for (a, b) in x.iter().zip(y) {
                worst = worst.max((a - b).abs());
            }
        }
    }
    Ok(Check {
        name: "ode-consistency",
        passed: worst <= 1e-8,
        value: worst,
        threshold: 1e-8,
        detail: "10 random mode sets at r = 0".into(),
    })
}

/// Reduced-size versions of every check, for the CLI.
pub fn quick_suite(seed: RngSeed) -> Result<Vec<Check>> {
    Ok(vec![
        gradient_check(10, 1e-5, seed)?,
        g_check(5, 50_000, seed)?,
        conservation_check(3, 1e-3, 500, seed)?,
        descent_check(10, 1e-3, 200, seed)?,
        ode_check(seed)?,
    ])
}

