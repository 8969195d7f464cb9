//! The softmax-gradient matrix `G(W) = E[diag P − P Pᵀ]` over Gaussian inputs,
//! its scalar projections, and a cached lookup of `g(s)` along a fixed frame.

use nalgebra::{DVector, SymmetricEigen};
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::linalg::{
    argmax, axpy, ensure_finite, is_identity, mul_tr, mul_wide, psd_sqrt, softmax_in_place, svd, Matrix, RngSeed,
};
use crate::teacher::one_hot;

const BLOCK: usize = 8192;

#[derive(Debug, Clone, PartialEq)]
pub struct GEstimate {
    pub g: Matrix,
    pub n_samples: usize,
    /// Per-entry standard error of the Monte Carlo mean.
    pub std_err: Matrix,
}

impl GEstimate {
    pub fn max_std_err(&self) -> f64 {
        self.std_err.amax()
    }

    pub fn trace(&self) -> f64 {
        self.g.trace()
    }
}

/// The logits `W X` for `X ~ N(0, C_X)` are `A ξ` with `ξ ~ N(0, I_r)`,
/// where `W C_X^{1/2} = U S Vᵀ`, `A = U_r S_r` and `r` its numerical rank.
fn logit_factor(w: &Matrix, c_x: &Matrix) -> Result<Matrix> {
    ensure_finite(w, "weight")?;
    if c_x.shape() != (w.ncols(), w.ncols()) {
        return Err(Error::invalid(format!(
            "covariance is {:?}, weight has {} columns",
            c_x.shape(),
            w.ncols()
        )));
    }
    let m = if is_identity(c_x) { w.clone() } else { w * psd_sqrt(c_x)? };
    let t = svd(&m)?;
    let top = t.s.first().copied().unwrap_or(0.0);
    let r = t.s.iter().filter(|&&s| s > 1e-13 * top.max(1e-300) && s > 0.0).count();
    let mut a = t.u.columns(0, r).into_owned();
    for k in 0..r {
        a.column_mut(k).scale_mut(t.s[k]);
    }
    Ok(a)
}

fn uniform_g(c: usize) -> Matrix {
    let cf = c as f64;
    Matrix::from_fn(c, c, |i, j| if i == j { 1.0 / cf - 1.0 / (cf * cf) } else { -1.0 / (cf * cf) })
}

/// Add `diag p − p pᵀ` and its entrywise square to the accumulators.
fn accumulate(p: &[f64], sum: &mut Matrix, sq: &mut Matrix) {
    let c = p.len();
    for j in 0..c {
        for i in 0..c {
            let v = if i == j { p[i] - p[i] * p[i] } else { -p[i] * p[j] };
            sum[(i, j)] += v;
            sq[(i, j)] += v * v;
        }
    }
}

/// Monte Carlo estimate of `G(W)` with `n_samples` Gaussian inputs.
pub fn estimate_g(w: &Matrix, c_x: &Matrix, n_samples: usize, seed: RngSeed) -> Result<GEstimate> {
    if n_samples == 0 {
        return Err(Error::invalid("n_samples must be >= 1"));
    }
    let c = w.nrows();
    let a = logit_factor(w, c_x)?;
    let r = a.ncols();
    if r == 0 {
        return Ok(GEstimate { g: uniform_g(c), n_samples, std_err: Matrix::zeros(c, c) });
    }
    let n_blocks = n_samples.div_ceil(BLOCK);
    let partial: Vec<(Matrix, Matrix)> = (0..n_blocks)
        .into_par_iter()
        .map(|b| {
            let len = BLOCK.min(n_samples - b * BLOCK);
            let mut rng = seed.derive_indexed("g-block", b as u64).rng();
            let mut sum = Matrix::zeros(c, c);
            let mut sq = Matrix::zeros(c, c);
            let mut xi = DVector::<f64>::zeros(r);
            for _ in 0..len {
                xi.iter_mut().for_each(|x| *x = rng.sample(StandardNormal));
                let mut z = Matrix::from_column_slice(c, 1, (&a * &xi).as_slice());
                softmax_in_place(&mut z);
                accumulate(z.as_slice(), &mut sum, &mut sq);
            }
            (sum, sq)
        })
        .collect();
    let mut sum = Matrix::zeros(c, c);
    let mut sq = Matrix::zeros(c, c);
    for (s, q) in &partial {
        sum += s;
        sq += q;
    }
    let n = n_samples as f64;
    let g = &sum / n;
    let std_err = Matrix::from_fn(c, c, |i, j| {
        if n_samples < 2 {
            return 0.0;
        }
        let var = ((sq[(i, j)] / n - g[(i, j)].powi(2)) * n / (n - 1.0)).max(0.0);
        (var / n).sqrt()
    });
    let g = (&g + g.transpose()) * 0.5;
    Ok(GEstimate { g, n_samples, std_err })
}

/// Probabilists' Gauss–Hermite rule (weight `e^{-x²/2}/√(2π)`) by Golub–Welsch.
pub fn gauss_hermite(order: usize) -> (Vec<f64>, Vec<f64>) {
    let mut jac = Matrix::zeros(order, order);
    for k in 1..order {
        let b = (k as f64).sqrt();
        jac[(k, k - 1)] = b;
        jac[(k - 1, k)] = b;
    }
    let eig = SymmetricEigen::new(jac);
    let mut pairs: Vec<(f64, f64)> = (0..order)
        .map(|i| (eig.eigenvalues[i], eig.eigenvectors[(0, i)].powi(2)))
        .collect();
    pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
    pairs.into_iter().unzip()
}

/// Gauss–Hermite evaluation of `G(W)` when `W C_X^{1/2}` has rank at most 2.
pub fn quadrature_g(w: &Matrix, c_x: &Matrix, order: usize) -> Result<Matrix> {
    let c = w.nrows();
    let a = logit_factor(w, c_x)?;
    let r = a.ncols();
    if r > 2 {
        return Err(Error::invalid(format!("quadrature supports rank <= 2, got {r}")));
    }
    if r == 0 {
        return Ok(uniform_g(c));
    }
    let (nodes, weights) = gauss_hermite(order);
    let mut g = Matrix::zeros(c, c);
    let mut scratch = Matrix::zeros(c, c);
    let mut add = |xi: DVector<f64>, wt: f64, g: &mut Matrix| {
        let mut z = Matrix::from_column_slice(c, 1, (&a * xi).as_slice());
        softmax_in_place(&mut z);
        let mut one = Matrix::zeros(c, c);
        scratch.fill(0.0);
        accumulate(z.as_slice(), &mut one, &mut scratch);
        axpy(g, wt, &one);
    };
    if r == 1 {
        for (x, wt) in nodes.iter().zip(&weights) {
            add(DVector::from_vec(vec![*x]), *wt, &mut g);
        }
    } else {
        for (x, wx) in nodes.iter().zip(&weights) {
            for (y, wy) in nodes.iter().zip(&weights) {
                add(DVector::from_vec(vec![*x, *y]), wx * wy, &mut g);
            }
        }
    }
    Ok(g)
}

/// `Tr G(U diag(s) Vᵀ)`.
pub fn trace_g(s: &[f64], u: &Matrix, v: &Matrix, c_x: &Matrix, n_samples: usize, seed: RngSeed) -> Result<f64> {
    Ok(estimate_g(&compose(s, u, v)?, c_x, n_samples, seed)?.trace())
}

/// `diag(Ûᵀ G(U diag(s) Vᵀ) Û)`: the per-mode `g` seen in the student's own frame.
pub fn projected_g(s: &[f64], u: &Matrix, v: &Matrix, c_x: &Matrix, n_samples: usize, seed: RngSeed) -> Result<Vec<f64>> {
    let est = estimate_g(&compose(s, u, v)?, c_x, n_samples, seed)?;
    let proj = u.transpose() * &est.g * u;
    Ok(proj.diagonal().iter().copied().collect())
}

fn compose(s: &[f64], u: &Matrix, v: &Matrix) -> Result<Matrix> {
    let k = s.len();
    if u.ncols() < k || v.ncols() < k {
        return Err(Error::invalid(format!("{k} singular values but frames have {} and {} columns", u.ncols(), v.ncols())));
    }
    let mut us = u.columns(0, k).into_owned();
    for (j, &sj) in s.iter().enumerate() {
        us.column_mut(j).scale_mut(sj);
    }
    Ok(us * v.columns(0, k).transpose())
}

/// `(trace/(C−1)) (I − 11ᵀ/C)`.
pub fn isotropic_approx(w: &Matrix, trace: f64) -> Result<Matrix> {
    let c = w.nrows();
    if c < 2 {
        return Err(Error::invalid("isotropic approximation needs at least 2 classes"));
    }
    if !(trace >= 0.0) {
        return Err(Error::invalid(format!("trace must be >= 0, got {trace}")));
    }
    let cf = c as f64;
    let k = trace / (cf - 1.0);
    Ok(Matrix::from_fn(c, c, |i, j| k * (if i == j { 1.0 } else { 0.0 } - 1.0 / cf)))
}

/// Relative Frobenius distance between an estimate and its isotropic
/// approximation.
pub fn isotropic_error(est: &GEstimate) -> Result<f64> {
    let iso = isotropic_approx(&est.g, est.trace().max(0.0))?;
    Ok((&iso - &est.g).norm() / est.g.norm().max(1e-300))
}

/// `(1/N) Σ_μ softmax(W X^μ) X^μᵀ`.
pub fn cross_cov_student(w: &Matrix, x: &Matrix) -> Result<Matrix> {
    if w.ncols() != x.nrows() {
        return Err(Error::invalid("weight and inputs disagree"));
    }
    let mut p = mul_wide(w, x);
    ensure_finite(&p, "logits")?;
    softmax_in_place(&mut p);
    cross_cov_targets(&p, x)
}

/// `(1/N) Σ_μ e_{y_μ} X^μᵀ`.
pub fn cross_cov_labels(labels: &[usize], n_classes: usize, x: &Matrix) -> Result<Matrix> {
    if labels.len() != x.ncols() {
        return Err(Error::invalid("label count and input count differ"));
    }
    if labels.iter().any(|&l| l >= n_classes) {
        return Err(Error::invalid("label out of range"));
    }
    cross_cov_targets(&one_hot(labels, n_classes), x)
}

pub fn cross_cov_targets(t: &Matrix, x: &Matrix) -> Result<Matrix> {
    if t.ncols() != x.ncols() {
        return Err(Error::invalid("target count and input count differ"));
    }
    Ok(mul_tr(t, x) / x.ncols().max(1) as f64)
}

/// Scalar function `g(s)` consumed by the training-aligned ODEs.
pub trait GFunction: Sync {
    fn g(&self, s: f64) -> Result<f64>;

    /// Teacher term `ŝ g(ŝ)` of the ODE.
    fn drive(&self, s_hat: f64) -> Result<f64> {
        Ok(s_hat * self.g(s_hat)?)
    }
}

impl<F: Fn(f64) -> f64 + Sync> GFunction for F {
    fn g(&self, s: f64) -> Result<f64> {
        Ok(self(s))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GCacheOptions {
    pub spacing: f64,
    pub s_max: f64,
    pub n_samples: usize,
    pub refine_tol: f64,
    pub max_refine: usize,
    pub seed: u64,
}

impl Default for GCacheOptions {
    fn default() -> Self {
        GCacheOptions { spacing: 0.05, s_max: 10.0, n_samples: 200_000, refine_tol: 0.02, max_refine: 4, seed: 0 }
    }
}

pub const GCACHE_VERSION: u32 = 1;

/// `g(s) = ûᵀ G(s û v̂ᵀ) û` tabulated on a grid in `s` with linear
/// interpolation. All grid points share one set of Gaussian samples.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GCache {
    pub version: u32,
    pub key: String,
    pub options: GCacheOptions,
    pub u: Vec<f64>,
    /// `sqrt(v̂ᵀ C_X v̂)`.
    pub input_scale: f64,
    pub grid: Vec<f64>,
    pub values: Vec<f64>,
    /// `lim_{s→∞} s g(s)`, the teacher term for one-hot labels.
    pub hard_limit: f64,
}

pub fn cache_key(u: &[f64], v: &[f64], c_x: &Matrix, opts: &GCacheOptions) -> String {
    let mut h = Sha256::new();
    h.update(b"gcache-v1");
    h.update((u.len() as u64).to_le_bytes());
    for x in u.iter().chain(v) {
        h.update(x.to_le_bytes());
    }
    let mut hc = Sha256::new();
    for x in c_x.iter() {
        hc.update(x.to_le_bytes());
    }
    h.update(hc.finalize());
    h.update((opts.n_samples as u64).to_le_bytes());
    h.update(opts.seed.to_le_bytes());
    h.update(opts.spacing.to_le_bytes());
    h.update(opts.s_max.to_le_bytes());
    h.update(opts.refine_tol.to_le_bytes());
    h.update((opts.max_refine as u64).to_le_bytes());
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

fn projected_rank1(u: &[f64], a: f64, z: &[f64]) -> f64 {
    let c = u.len();
    let mut p = vec![0.0; c];
    let mut total = 0.0;
    for &zi in z {
        let mut max = f64::NEG_INFINITY;
        for (pc, &uc) in p.iter_mut().zip(u) {
            *pc = a * uc * zi;
            max = max.max(*pc);
        }
        let mut norm = 0.0;
        for pc in p.iter_mut() {
            *pc = (*pc - max).exp();
            norm += *pc;
        }
        let (mut up, mut uup) = (0.0, 0.0);
        for (&pc, &uc) in p.iter().zip(u) {
            let q = pc / norm;
            up += uc * q;
            uup += uc * uc * q;
        }
        total += uup - up * up;
    }
    total / z.len() as f64
}

impl GCache {
    /// Tabulate `g` along the rank-one frame `(û, v̂)`.
    pub fn build(u: &[f64], v: &[f64], c_x: &Matrix, opts: &GCacheOptions) -> Result<GCache> {
        let c = u.len();
        if c < 2 || v.len() != c_x.nrows() || !c_x.is_square() {
            return Err(Error::invalid("frame and covariance shapes are inconsistent"));
        }
        if !(opts.spacing > 0.0 && opts.s_max > 0.0 && opts.n_samples > 0) {
            return Err(Error::invalid("g-cache needs positive spacing, s_max and n_samples"));
        }
        let norm = |x: &[f64]| x.iter().map(|a| a * a).sum::<f64>().sqrt();
        if (norm(u) - 1.0).abs() > 1e-8 || (norm(v) - 1.0).abs() > 1e-8 {
            return Err(Error::invalid("g-cache frame vectors must be unit length"));
        }
        let vv = DVector::from_column_slice(v);
        let input_scale = (vv.transpose() * c_x * &vv)[(0, 0)].max(0.0).sqrt();

        let mut rng = RngSeed(opts.seed).derive("gcache").rng();
        let z: Vec<f64> = (0..opts.n_samples).map(|_| rng.sample(StandardNormal)).collect();
        let eval = |s: f64| projected_rank1(u, s * input_scale, &z);

        let n = (opts.s_max / opts.spacing).ceil() as usize;
        let mut grid: Vec<f64> = (0..=n).map(|i| i as f64 * opts.spacing).collect();
        let mut values: Vec<f64> = grid.par_iter().map(|&s| eval(s)).collect();
        for _ in 0..opts.max_refine {
            let mids: Vec<f64> = (0..grid.len() - 1)
                .filter(|&i| (values[i + 1] - values[i]).abs() > opts.refine_tol * values[i].abs().max(1e-12))
                .map(|i| 0.5 * (grid[i] + grid[i + 1]))
                .collect();
            if mids.is_empty() {
                break;
            }
            let mid_vals: Vec<f64> = mids.par_iter().map(|&s| eval(s)).collect();
            let mut merged: Vec<(f64, f64)> = grid.into_iter().zip(values).chain(mids.into_iter().zip(mid_vals)).collect();
            merged.sort_by(|a, b| a.0.total_cmp(&b.0));
            (grid, values) = merged.into_iter().unzip();
        }

        let hard_limit = if input_scale > 0.0 {
            z.iter().map(|&zi| u[argmax(u.iter().map(|&uc| uc * zi).collect::<Vec<_>>().iter())] * zi).sum::<f64>()
                / z.len() as f64
                / input_scale
        } else {
            0.0
        };
        Ok(GCache {
            version: GCACHE_VERSION,
            key: cache_key(u, v, c_x, opts),
            options: opts.clone(),
            u: u.to_vec(),
            input_scale,
            grid,
            values,
            hard_limit,
        })
    }

    pub fn range(&self) -> (f64, f64) {
        (self.grid[0], *self.grid.last().expect("non-empty grid"))
    }
}

impl GFunction for GCache {
    fn g(&self, s: f64) -> Result<f64> {
        let (lo, hi) = self.range();
        if !(s >= lo && s <= hi) {
            return Err(Error::Range { value: s, lo, hi });
        }
        let i = self.grid.partition_point(|&x| x <= s).clamp(1, self.grid.len() - 1);
        let (x0, x1) = (self.grid[i - 1], self.grid[i]);
        let t = if x1 > x0 { (s - x0) / (x1 - x0) } else { 0.0 };
        Ok(self.values[i - 1] + t * (self.values[i] - self.values[i - 1]))
    }
}

/// Replaces the teacher term by its one-hot limit `lim s g(s)`.
#[derive(Debug, Clone, Copy)]
pub struct HardLabels<'a>(pub &'a GCache);

impl GFunction for HardLabels<'_> {
    fn g(&self, s: f64) -> Result<f64> {
        self.0.g(s)
    }

    fn drive(&self, s_hat: f64) -> Result<f64> {
        Ok(if s_hat > 0.0 { self.0.hard_limit } else { 0.0 })
    }
}
