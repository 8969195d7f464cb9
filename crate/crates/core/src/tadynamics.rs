//! Training-aligned singular-value dynamics.
//!
//! With aligned frames, gradient descent only moves the singular values. The
//! integrators step the balanced per-layer factor `ℓ = √s` of a two-layer
//! student with the same explicit Euler rule as the gradient-descent trainer,
//! so step `k` of a theory curve lines up with step `k` of an empirical run:
//!
//! `ℓ ← ℓ + η ℓ (ŝ g(ŝ) − s g(s))`, which gives `ds/dt = 2 s (ŝ g(ŝ) − s g(s))`.

use crate::error::{Error, Result};
use crate::gmatrix::GFunction;
use crate::linalg::Matrix;
use crate::student::TestSet;

/// `ds/dt = 2 s (ŝ g(ŝ) − s g(s))`.
pub fn rank1_rhs(s: f64, s_hat: f64, g: &dyn GFunction) -> Result<f64> {
    Ok(2.0 * s * (g.drive(s_hat)? - s * g.g(s)?))
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct TaTrajectory {
    pub times: Vec<usize>,
    pub states: Vec<Vec<f64>>,
    pub gen_loss: Vec<f64>,
    pub gen_loss_stderr: Vec<f64>,
}

impl TaTrajectory {
    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    pub fn final_state(&self) -> Option<&[f64]> {
        self.states.last().map(|s| s.as_slice())
    }

    /// Top singular value at each recorded step.
    pub fn leading(&self) -> Vec<f64> {
        self.states.iter().map(|s| s[0]).collect()
    }

    /// Fill in the generalization loss of `W(t) = Û diag(s(t)) V̂ᵀ`.
    pub fn attach_gen_loss(&mut self, u: &Matrix, v: &Matrix, test: &TestSet) -> Result<()> {
        self.gen_loss.clear();
        self.gen_loss_stderr.clear();
        for s in &self.states {
            let k = s.len();
            if u.ncols() < k || v.ncols() < k {
                return Err(Error::invalid("frames have fewer columns than the state"));
            }
            let mut w = Matrix::zeros(u.nrows(), v.nrows());
            for (j, &sj) in s.iter().enumerate() {
                w += u.column(j) * v.column(j).transpose() * sj;
            }
            let est = test.loss_of_composite(&w)?;
            self.gen_loss.push(est.mean);
            self.gen_loss_stderr.push(est.stderr);
        }
        Ok(())
    }

    fn push(&mut self, step: usize, state: Vec<f64>) {
        self.times.push(step);
        self.states.push(state);
    }
}

fn check_rate(eta: f64, record_every: usize) -> Result<()> {
    if !(eta > 0.0 && eta.is_finite()) {
        return Err(Error::invalid(format!("learning rate must be > 0, got {eta}")));
    }
    if record_every == 0 {
        return Err(Error::invalid("record_every must be >= 1"));
    }
    Ok(())
}

fn records(step: usize, steps: usize, every: usize) -> bool {
    step % every == 0 || step == steps
}

pub fn integrate_rank1(
    s0: f64,
    s_hat: f64,
    eta: f64,
    steps: usize,
    record_every: usize,
    g: &dyn GFunction,
) -> Result<TaTrajectory> {
    if !(s0 > 0.0) {
        return Err(Error::invalid(format!("s0 must be > 0, got {s0}")));
    }
    integrate_ta(&[s0], &[s_hat], eta, steps, record_every, g)
}

/// Vector form, each mode driven by its own teacher value. Modes with
/// `ŝ = 0` only decay.
pub fn integrate_ta(
    s0: &[f64],
    s_hat: &[f64],
    eta: f64,
    steps: usize,
    record_every: usize,
    g: &dyn GFunction,
) -> Result<TaTrajectory> {
    check_rate(eta, record_every)?;
    if s0.len() != s_hat.len() || s0.is_empty() {
        return Err(Error::invalid("s0 and s_hat must be non-empty and of equal length"));
    }
    if s0.iter().chain(s_hat).any(|x| !(*x >= 0.0 && x.is_finite())) {
        return Err(Error::invalid("singular values must be finite and >= 0"));
    }
    let drive: Vec<f64> = s_hat.iter().map(|&sh| g.drive(sh)).collect::<Result<_>>()?;
    let mut l: Vec<f64> = s0.iter().map(|s| s.sqrt()).collect();
    let mut traj = TaTrajectory::default();
    for step in 0..=steps {
        let s: Vec<f64> = l.iter().map(|x| x * x).collect();
        if records(step, steps, record_every) {
            traj.push(step, s.clone());
        }
        if step == steps {
            break;
        }
        for ((li, si), di) in l.iter_mut().zip(&s).zip(&drive) {
            let gs = g.g(*si)?;
            *li = *li + eta * *li * (di - si * gs);
        }
    }
    Ok(traj)
}

/// Two teachers sharing a trunk with scalar relatedness `r`.
///
/// State is the per-mode head factor of each task; the trunk factor follows
/// from `s21² = a² + r b²`. Task composites are `a s21` and `b s21`; the
/// former is the task-A singular value `s_A(r)`.
#[allow(clippy::too_many_arguments)]
pub fn integrate_multitask(
    head_a0: &[f64],
    head_b0: &[f64],
    s_hat_a: &[f64],
    s_hat_b: &[f64],
    r: f64,
    eta: f64,
    steps: usize,
    record_every: usize,
    g_a: &dyn GFunction,
    g_b: &dyn GFunction,
) -> Result<(TaTrajectory, TaTrajectory)> {
    check_rate(eta, record_every)?;
    let k = head_a0.len();
    if k == 0 || head_b0.len() != k || s_hat_a.len() != k || s_hat_b.len() != k {
        return Err(Error::invalid("multitask state vectors must be non-empty and of equal length"));
    }
    if !(0.0..=1.0).contains(&r) {
        return Err(Error::invalid(format!("relatedness must lie in [0, 1], got {r}")));
    }
    let drive_a: Vec<f64> = s_hat_a.iter().map(|&s| g_a.drive(s)).collect::<Result<_>>()?;
    let drive_b: Vec<f64> = s_hat_b.iter().map(|&s| g_b.drive(s)).collect::<Result<_>>()?;
    let mut a = head_a0.to_vec();
    let mut b = head_b0.to_vec();
    let (mut ta, mut tb) = (TaTrajectory::default(), TaTrajectory::default());
    for step in 0..=steps {
        let mut s21 = vec![0.0; k];
        for i in 0..k {
            let sq = a[i] * a[i] + r * b[i] * b[i];
            s21[i] = sq.sqrt();
            let resid = s21[i] * s21[i] - sq;
            if !(resid.abs() <= 1e-10 * sq.max(1.0)) {
                return Err(Error::Consistency(format!(
                    "trunk coupling off by {resid:e} in mode {i} at step {step}"
                )));
            }
        }
        let ca: Vec<f64> = a.iter().zip(&s21).map(|(x, t)| x * t).collect();
        let cb: Vec<f64> = b.iter().zip(&s21).map(|(x, t)| x * t).collect();
        if records(step, steps, record_every) {
            ta.push(step, ca.clone());
            tb.push(step, cb.clone());
        }
        if step == steps {
            break;
        }
        for i in 0..k {
            let ga = g_a.g(ca[i])?;
            a[i] = a[i] + eta * s21[i] * (drive_a[i] - ca[i] * ga);
            if r != 0.0 {
                let gb = g_b.g(cb[i])?;
                b[i] = b[i] + eta * r * s21[i] * (drive_b[i] - cb[i] * gb);
            }
        }
    }
    Ok((ta, tb))
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Smooth decreasing stand-in with the qualitative shape of `g`.
    fn g_model(s: f64) -> f64 {
        0.5 / (1.0 + 0.4 * s * s).sqrt()
    }

    #[test]
    fn rhs_fixed_points() {
        assert_eq!(rank1_rhs(2.0, 2.0, &g_model).unwrap(), 0.0);
        assert_eq!(rank1_rhs(0.0, 2.0, &g_model).unwrap(), 0.0);
        assert!(rank1_rhs(0.5, 2.0, &g_model).unwrap() > 0.0);
    }

    #[test]
    fn constant_at_fixed_point() {
        let t = integrate_rank1(1.5, 1.5, 1e-2, 200, 10, &g_model).unwrap();
        for s in t.leading() {
            assert!((s - 1.5).abs() < 1e-12);
        }
    }

    #[test]
    fn monotone_approach() {
        let t = integrate_rank1(0.1, 3.0, 1e-2, 3000, 10, &g_model).unwrap();
        let s = t.leading();
        assert!(s.windows(2).all(|w| w[1] >= w[0]));
        assert!(*s.last().unwrap() <= 3.0 + 1e-12);
    }

    #[test]
    fn step_halving_converges() {
        let a = integrate_rank1(0.1, 3.0, 1e-3, 2000, 2000, &g_model).unwrap();
        let b = integrate_rank1(0.1, 3.0, 5e-4, 4000, 4000, &g_model).unwrap();
        let diff = (a.leading().last().unwrap() - b.leading().last().unwrap()).abs();
        assert!(diff < 1e-3, "{diff}");
    }

    #[test]
    fn zero_teacher_modes_decay() {
        let t = integrate_ta(&[0.5, 0.5, 0.5], &[3.0, 0.0, 0.0], 1e-2, 2000, 10, &g_model).unwrap();
        for m in 1..3 {
            let series: Vec<f64> = t.states.iter().map(|s| s[m]).collect();
            assert!(series.windows(2).all(|w| w[1] < w[0]));
        }
        assert!(t.final_state().unwrap()[0] > 0.5);
    }

    #[test]
    fn equal_modes_stay_equal() {
        let t = integrate_ta(&[0.2; 10], &[3.0; 10], 1e-2, 500, 50, &g_model).unwrap();
        for s in &t.states {
            assert!(s.iter().all(|&x| x == s[0]));
        }
    }

    #[test]
    fn multitask_at_zero_relatedness_is_single_task() {
        let single = integrate_ta(&[0.1], &[3.0], 1e-2, 1000, 10, &g_model).unwrap();
        let (a, _) =
            integrate_multitask(&[0.1f64.sqrt()], &[0.3], &[3.0], &[10.0], 0.0, 1e-2, 1000, 10, &g_model, &g_model)
                .unwrap();
        assert_eq!(a.states, single.states);
    }

    #[test]
    fn identical_tasks_at_full_relatedness() {
        let (a, b) = integrate_multitask(&[0.3], &[0.3], &[3.0], &[3.0], 1.0, 1e-2, 500, 10, &g_model, &g_model).unwrap();
        assert_eq!(a.states, b.states);
    }

    #[test]
    fn relatedness_enhances_growth() {
        let base = integrate_multitask(&[0.3], &[0.3], &[3.0], &[10.0], 0.0, 1e-2, 1000, 10, &g_model, &g_model).unwrap().0;
        let rel = integrate_multitask(&[0.3], &[0.3], &[3.0], &[10.0], 0.5, 1e-2, 1000, 10, &g_model, &g_model).unwrap().0;
        for (x, y) in base.leading().iter().zip(rel.leading()) {
            assert!(y >= *x - 1e-6);
        }
    }

    #[test]
    fn bad_inputs_rejected() {
        assert!(integrate_rank1(0.0, 1.0, 1e-3, 10, 1, &g_model).is_err());
        assert!(integrate_ta(&[1.0], &[1.0, 2.0], 1e-3, 10, 1, &g_model).is_err());
        assert!(integrate_multitask(&[1.0], &[1.0], &[1.0], &[1.0], 1.5, 1e-3, 10, 1, &g_model, &g_model).is_err());
    }
}
