//! Multitask benefit `MT = min_t L̃_A − min_t L_{A|B}` and its convexity bounds.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::gmatrix::{estimate_g, isotropic_approx, GEstimate, GFunction};
use crate::linalg::{argmax_labels, mul_wide, softmax_in_place, Matrix, RngSeed};
use crate::student::Trajectory;
use crate::tadynamics::TaTrajectory;
use crate::teacher::sample_inputs;

/// Anything with a recorded generalization-loss curve.
pub trait LossCurve {
    fn steps(&self) -> &[usize];
    fn gen_loss(&self) -> &[f64];
    fn gen_loss_stderr(&self) -> &[f64];
}

impl LossCurve for Trajectory {
    fn steps(&self) -> &[usize] {
        &self.times
    }
    fn gen_loss(&self) -> &[f64] {
        &self.gen_loss
    }
    fn gen_loss_stderr(&self) -> &[f64] {
        &self.gen_loss_stderr
    }
}

impl LossCurve for TaTrajectory {
    fn steps(&self) -> &[usize] {
        &self.times
    }
    fn gen_loss(&self) -> &[f64] {
        &self.gen_loss
    }
    fn gen_loss_stderr(&self) -> &[f64] {
        &self.gen_loss_stderr
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenefitReport {
    pub min_loss_single: f64,
    pub min_loss_multi: f64,
    pub mt_benefit: f64,
    /// Step of the minimum and its index among the recorded points.
    pub argmin_single: usize,
    pub argmin_multi: usize,
    pub index_single: usize,
    pub index_multi: usize,
    pub stderr_single: f64,
    pub stderr_multi: f64,
    pub bound_lower: Option<f64>,
    pub bound_upper: Option<f64>,
    pub bound_sigma: Option<f64>,
    pub metadata: BTreeMap<String, String>,
}

impl BenefitReport {
    /// Standard error of `mt_benefit` treating the two minima as independent.
    pub fn loss_stderr(&self) -> f64 {
        self.stderr_single.hypot(self.stderr_multi)
    }

    /// Combined uncertainty of the loss difference and the bound estimates.
    pub fn combined_sigma(&self) -> f64 {
        self.loss_stderr().hypot(self.bound_sigma.unwrap_or(0.0))
    }

    pub fn with_bounds(mut self, b: &BoundEstimate) -> Self {
        self.bound_lower = Some(b.lower);
        self.bound_upper = Some(b.upper);
        self.bound_sigma = Some(b.sigma);
        self
    }
}

fn argmin(curve: &dyn LossCurve) -> Result<usize> {
    let loss = curve.gen_loss();
    if loss.is_empty() || curve.steps().len() != loss.len() {
        return Err(Error::invalid("trajectory has no recorded generalization loss"));
    }
    let mut best = 0;
    for (i, &l) in loss.iter().enumerate() {
        if l < loss[best] {
            best = i;
        }
    }
    if !loss[best].is_finite() {
        return Err(Error::invalid("generalization loss is not finite"));
    }
    Ok(best)
}

/// Minima over the recorded points of both curves. Bounds are left unset.
pub fn multitask_benefit(single: &dyn LossCurve, multi_a: &dyn LossCurve) -> Result<BenefitReport> {
    let i = argmin(single)?;
    let j = argmin(multi_a)?;
    let se = |c: &dyn LossCurve, k: usize| c.gen_loss_stderr().get(k).copied().unwrap_or(0.0);
    let (ls, lm) = (single.gen_loss()[i], multi_a.gen_loss()[j]);
    Ok(BenefitReport {
        min_loss_single: ls,
        min_loss_multi: lm,
        mt_benefit: ls - lm,
        argmin_single: single.steps()[i],
        argmin_multi: multi_a.steps()[j],
        index_single: i,
        index_multi: j,
        stderr_single: se(single, i),
        stderr_multi: se(multi_a, j),
        bound_lower: None,
        bound_upper: None,
        bound_sigma: None,
        metadata: BTreeMap::new(),
    })
}

/// Which `G` enters the student terms of the bounds.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GMode {
    Isotropic,
    Full,
}

/// The teacher term `G(W̄_A) W̄_A C_X`, either for the softmax teacher or in
/// its one-hot limit `E[e_ȳ Xᵀ]` with `ȳ = argmax W̄_A X`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TeacherTerm {
    Softmax,
    HardLabels,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BoundOptions {
    pub mode: GMode,
    pub teacher: TeacherTerm,
    pub n_samples: usize,
    pub seed: RngSeed,
}

impl Default for BoundOptions {
    fn default() -> Self {
        BoundOptions { mode: GMode::Isotropic, teacher: TeacherTerm::HardLabels, n_samples: 200_000, seed: RngSeed(0) }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BoundEstimate {
    pub lower: f64,
    pub upper: f64,
    /// Conservative Monte Carlo error of the bounds.
    pub sigma: f64,
    pub mode: GMode,
    /// The other `G` mode, present when it moves either bound by more than 10%.
    pub alternate: Option<(f64, f64)>,
}

/// `Tr(G M)` and a conservative error from the per-entry standard errors.
fn g_term(est: &GEstimate, g: &Matrix, m: &Matrix) -> (f64, f64) {
    let value = (g * m).trace();
    let err = est.std_err.iter().zip(m.transpose().iter()).map(|(s, x)| s * x.abs()).sum();
    (value, err)
}

fn teacher_term(w_bar: &Matrix, delta: &Matrix, c_x: &Matrix, opts: &BoundOptions) -> Result<(f64, f64)> {
    match opts.teacher {
        TeacherTerm::Softmax => {
            let est = estimate_g(w_bar, c_x, opts.n_samples, opts.seed.derive("teacher-g"))?;
            let m = w_bar * c_x * delta.transpose();
            let g = match opts.mode {
                GMode::Full => est.g.clone(),
                GMode::Isotropic => isotropic_approx(w_bar, est.trace().max(0.0))?,
            };
            Ok(g_term(&est, &g, &m))
        }
        TeacherTerm::HardLabels => {
            // Tr(E[e_ȳ Xᵀ] Δᵀ) = E[(Δ X)_ȳ], averaged sample by sample.
            let n1 = w_bar.ncols();
            let mut vals = Vec::with_capacity(opts.n_samples);
            let chunk = 16_384;
            let mut b = 0u64;
            while vals.len() < opts.n_samples {
                let len = chunk.min(opts.n_samples - vals.len());
                let x = sample_inputs(n1, len, c_x, opts.seed.derive_indexed("teacher-x", b))?;
                let labels = argmax_labels(&mul_wide(w_bar, &x))?;
                let dx = mul_wide(delta, &x);
                vals.extend(labels.iter().enumerate().map(|(j, &y)| dx[(y, j)]));
                b += 1;
            }
            let n = vals.len() as f64;
            let mean = vals.iter().sum::<f64>() / n;
            let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0).max(1.0);
            Ok((mean, (var / n).sqrt()))
        }
    }
}

/// Convexity bounds on the multitask benefit for general weights:
/// `lower = Tr([T − G(W_A)W_A C_X](W_A − W̃_A)ᵀ)` and the same with `W̃_A` in
/// the student term for `upper`, where `T` is the teacher term.
pub fn benefit_bounds_general(
    w_a: &Matrix,
    w_a_tilde: &Matrix,
    w_bar_a: &Matrix,
    c_x: &Matrix,
    opts: &BoundOptions,
) -> Result<BoundEstimate> {
    let shape = w_bar_a.shape();
    if w_a.shape() != shape || w_a_tilde.shape() != shape {
        return Err(Error::invalid(format!(
            "weights must all be {shape:?}, got {:?} and {:?}",
            w_a.shape(),
            w_a_tilde.shape()
        )));
    }
    if c_x.shape() != (shape.1, shape.1) {
        return Err(Error::invalid("input covariance does not match the weights"));
    }
    if opts.n_samples < 2 {
        return Err(Error::invalid("bounds need at least 2 Monte Carlo samples"));
    }
    let delta = w_a - w_a_tilde;
    if delta.iter().all(|&x| x == 0.0) {
        return Ok(BoundEstimate { lower: 0.0, upper: 0.0, sigma: 0.0, mode: opts.mode, alternate: None });
    }
    let (t_val, t_err) = teacher_term(w_bar_a, &delta, c_x, opts)?;
    let student = |w: &Matrix| -> Result<((f64, f64), (f64, f64))> {
        let est = estimate_g(w, c_x, opts.n_samples, opts.seed.derive("student-g"))?;
        let m = w * c_x * delta.transpose();
        let full = g_term(&est, &est.g, &m);
        let iso = g_term(&est, &isotropic_approx(w, est.trace().max(0.0))?, &m);
        Ok((full, iso))
    };
    let (full_a, iso_a) = student(w_a)?;
    let (full_t, iso_t) = student(w_a_tilde)?;
    let full = (t_val - full_a.0, t_val - full_t.0);
    let iso = (t_val - iso_a.0, t_val - iso_t.0);
    let (primary, other, errs) = match opts.mode {
        GMode::Full => (full, iso, (full_a.1, full_t.1)),
        GMode::Isotropic => (iso, full, (iso_a.1, iso_t.1)),
    };
    let differs = |x: f64, y: f64| (x - y).abs() > 0.1 * x.abs().max(y.abs());
    let alternate = (differs(primary.0, other.0) || differs(primary.1, other.1)).then_some(other);
    let sigma = t_err + errs.0.max(errs.1);
    Ok(BoundEstimate { lower: primary.0, upper: primary.1, sigma, mode: opts.mode, alternate })
}

/// Bounds evaluated on a fixed labelled sample, with the per-sample losses
/// of that sample. By convexity of each sample's loss these sandwich the
/// benefit measured on the same sample exactly.
pub fn benefit_bounds_sample(w_a: &Matrix, w_a_tilde: &Matrix, x: &Matrix, labels: &[usize]) -> Result<(f64, f64)> {
    if w_a.shape() != w_a_tilde.shape() || w_a.ncols() != x.nrows() || labels.len() != x.ncols() {
        return Err(Error::invalid("weights, inputs and labels disagree"));
    }
    let delta = w_a - w_a_tilde;
    let dx = mul_wide(&delta, x);
    let term = |w: &Matrix| {
        let mut p = mul_wide(w, x);
        softmax_in_place(&mut p);
        let mut total = 0.0;
        for (j, &y) in labels.iter().enumerate() {
            let pd: f64 = p.column(j).dot(&dx.column(j));
            total += dx[(y, j)] - pd;
        }
        total / labels.len().max(1) as f64
    };
    Ok((term(w_a), term(w_a_tilde)))
}

/// `lower = (s_A − s̃_A)(s̄_A g(s̄_A) − s_A g(s_A))`, `upper` with `s̃_A`.
pub fn benefit_bounds_rank1(s_a: f64, s_a_tilde: f64, s_bar_a: f64, g: &dyn GFunction) -> Result<(f64, f64)> {
    let d = s_a - s_a_tilde;
    if d == 0.0 {
        return Ok((0.0, 0.0));
    }
    let teacher = g.drive(s_bar_a)?;
    Ok((d * (teacher - s_a * g.g(s_a)?), d * (teacher - s_a_tilde * g.g(s_a_tilde)?)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::{random_centered_frame, random_frame};

    fn curve(loss: &[f64]) -> TaTrajectory {
        TaTrajectory {
            times: (0..loss.len()).map(|i| i * 10).collect(),
            states: vec![vec![0.0]; loss.len()],
            gen_loss: loss.to_vec(),
            gen_loss_stderr: vec![0.01; loss.len()],
        }
    }

    #[test]
    fn identical_curves_have_zero_benefit() {
        let c = curve(&[0.7, 0.5, 0.6]);
        let r = multitask_benefit(&c, &c).unwrap();
        assert_eq!(r.mt_benefit, 0.0);
        assert_eq!(r.argmin_single, 10);
    }

    #[test]
    fn benefit_is_difference_of_minima() {
        let r = multitask_benefit(&curve(&[0.7, 0.5, 0.6]), &curve(&[0.6, 0.45, 0.4])).unwrap();
        assert_eq!(r.mt_benefit, 0.5 - 0.4);
        assert_eq!(r.argmin_multi, 20);
        assert!(multitask_benefit(&curve(&[]), &curve(&[1.0])).is_err());
    }

    fn rank1(seed: u64) -> (Matrix, Matrix) {
        let mut rng = RngSeed(seed).rng();
        (random_centered_frame(3, 1, &mut rng), random_frame(5, 1, &mut rng))
    }

    #[test]
    fn equal_weights_give_zero_bounds() {
        let (u, v) = rank1(1);
        let w = &u * v.transpose();
        let b = benefit_bounds_general(&w, &w, &(&w * 2.0), &Matrix::identity(5, 5), &BoundOptions::default()).unwrap();
        assert_eq!((b.lower, b.upper), (0.0, 0.0));
    }

    #[test]
    fn swapping_weights_negates_and_swaps() {
        let (u, v) = rank1(2);
        let w = &u * v.transpose();
        let opts = BoundOptions { n_samples: 20_000, mode: GMode::Full, teacher: TeacherTerm::Softmax, ..Default::default() };
        let c_x = Matrix::identity(5, 5);
        let ab = benefit_bounds_general(&(&w * 1.5), &(&w * 0.5), &(&w * 3.0), &c_x, &opts).unwrap();
        let ba = benefit_bounds_general(&(&w * 0.5), &(&w * 1.5), &(&w * 3.0), &c_x, &opts).unwrap();
        assert!((ab.lower + ba.upper).abs() < 1e-12);
        assert!((ab.upper + ba.lower).abs() < 1e-12);
    }

    #[test]
    fn rank1_form_matches_general_form() {
        let (u, v) = rank1(3);
        let c_x = Matrix::identity(5, 5);
        let opts = BoundOptions { n_samples: 20_000, mode: GMode::Full, teacher: TeacherTerm::Softmax, seed: RngSeed(9) };
        let w = |s: f64| &u * v.transpose() * s;
        let general = benefit_bounds_general(&w(1.2), &w(0.8), &w(2.5), &c_x, &opts).unwrap();
        let g_student = |s: f64| {
            let est = estimate_g(&w(s), &c_x, opts.n_samples, opts.seed.derive("student-g")).unwrap();
            (u.transpose() * est.g * &u)[(0, 0)]
        };
        struct Split<'a, F: Fn(f64) -> f64 + Sync> {
            student: &'a F,
            teacher: f64,
        }
        impl<F: Fn(f64) -> f64 + Sync> GFunction for Split<'_, F> {
            fn g(&self, s: f64) -> Result<f64> {
                Ok((self.student)(s))
            }
            fn drive(&self, _: f64) -> Result<f64> {
                Ok(self.teacher)
            }
        }
        let est_bar = estimate_g(&w(2.5), &c_x, opts.n_samples, opts.seed.derive("teacher-g")).unwrap();
        let teacher = 2.5 * (u.transpose() * est_bar.g * &u)[(0, 0)];
        let (lo, hi) = benefit_bounds_rank1(1.2, 0.8, 2.5, &Split { student: &g_student, teacher }).unwrap();
        assert!((lo - general.lower).abs() < 1e-10, "{lo} vs {}", general.lower);
        assert!((hi - general.upper).abs() < 1e-10);
    }

    #[test]
    fn rank1_zero_gap() {
        assert_eq!(benefit_bounds_rank1(1.0, 1.0, 3.0, &|_s: f64| 0.3).unwrap(), (0.0, 0.0));
    }

    #[test]
    fn sample_bounds_sandwich_sample_benefit() {
        let mut rng = RngSeed(4).rng();
        let u = random_centered_frame(3, 1, &mut rng);
        let v = random_frame(6, 1, &mut rng);
        let w_bar = &u * v.transpose() * 3.0;
        let x = sample_inputs(6, 500, &Matrix::identity(6, 6), RngSeed(5)).unwrap();
        let labels = argmax_labels(&(&w_bar * &x)).unwrap();
        let w_a = crate::linalg::gaussian_matrix(3, 6, 0.5, RngSeed(6)).unwrap();
        let w_t = crate::linalg::gaussian_matrix(3, 6, 0.5, RngSeed(7)).unwrap();
        let loss = |w: &Matrix| {
            crate::student::label_losses(&(w * &x), &labels).iter().sum::<f64>() / 500.0
        };
        let mt = loss(&w_t) - loss(&w_a);
        let (lo, hi) = benefit_bounds_sample(&w_a, &w_t, &x, &labels).unwrap();
        assert!(lo <= mt + 1e-12 && mt <= hi + 1e-12, "{lo} {mt} {hi}");
    }

    #[test]
    fn dimension_mismatch() {
        let a = Matrix::zeros(2, 3);
        let b = Matrix::zeros(2, 4);
        assert!(benefit_bounds_general(&a, &b, &a, &Matrix::identity(3, 3), &BoundOptions::default()).is_err());
    }
}
