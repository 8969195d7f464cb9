//! Shared numerical primitives: column softmax, argmax labelling, sorted SVD
//! with a fixed sign convention, and seeded Gaussian sampling.
//!
//! Matrices follow the convention used throughout the crate: one column per
//! data point, one row per class (outputs) or feature (inputs).

use nalgebra::{DMatrix, SymmetricEigen};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub type Matrix = DMatrix<f64>;

/// Explicit seed for every random stream. Identical seed and identical call
/// sequence give a bit-identical stream on every platform (ChaCha8).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct RngSeed(pub u64);

impl RngSeed {
    pub fn rng(self) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(self.0)
    }

    /// Child seed for a named sub-stream. Children with distinct tags are
    /// independent of each other and of the parent stream.
    pub fn derive(self, tag: &str) -> RngSeed {
        let mut h = Sha256::new();
        h.update(self.0.to_le_bytes());
        h.update(tag.as_bytes());
        let digest = h.finalize();
        let mut bytes = [0u8; 8];
        bytes.copy_from_slice(&digest[..8]);
        RngSeed(u64::from_le_bytes(bytes))
    }

    pub fn derive_indexed(self, tag: &str, index: u64) -> RngSeed {
        self.derive(&format!("{tag}#{index}"))
    }
}

impl From<u64> for RngSeed {
    fn from(v: u64) -> Self {
        RngSeed(v)
    }
}

/// Thin SVD `m = u * diag(s) * v^T` with `s` sorted non-increasing.
#[derive(Debug, Clone, PartialEq)]
pub struct SvdTriple {
    pub u: Matrix,
    pub s: Vec<f64>,
    pub v: Matrix,
}

impl SvdTriple {
    pub fn reconstruct(&self) -> Matrix {
        let mut us = self.u.clone();
        for (k, &sk) in self.s.iter().enumerate() {
            us.column_mut(k).scale_mut(sk);
        }
        us * self.v.transpose()
    }

    /// Keep the leading `k` singular triplets.
    pub fn truncate(&self, k: usize) -> SvdTriple {
        let k = k.min(self.s.len());
        SvdTriple {
            u: self.u.columns(0, k).into_owned(),
            s: self.s[..k].to_vec(),
            v: self.v.columns(0, k).into_owned(),
        }
    }

    pub fn numerical_rank(&self, tol: f64) -> usize {
        let top = self.s.first().copied().unwrap_or(0.0);
        self.s.iter().filter(|&&x| x > tol * top.max(1.0)).count()
    }
}

pub(crate) fn ensure_finite(m: &Matrix, what: &str) -> Result<()> {
    if m.iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(Error::invalid(format!("{what} contains non-finite entries")))
    }
}

/// `y += a x`.
pub(crate) fn axpy(y: &mut Matrix, a: f64, x: &Matrix) {
    y.zip_apply(x, |yi, xi| *yi += a * xi);
}

/// `a b` for a short, wide `b` (features by samples). Computed as
/// `(bᵀ aᵀ)ᵀ`, which nalgebra runs several times faster on this layout.
pub fn mul_wide(a: &Matrix, b: &Matrix) -> Matrix {
    b.tr_mul(&a.transpose()).transpose()
}

/// `a bᵀ` without materializing `bᵀ`.
pub fn mul_tr(a: &Matrix, b: &Matrix) -> Matrix {
    (b * a.transpose()).transpose()
}

/// Column-wise softmax with per-column max subtraction.
pub fn softmax_columns(logits: &Matrix) -> Result<Matrix> {
    ensure_finite(logits, "logits")?;
    let mut out = logits.clone();
    softmax_in_place(&mut out);
    Ok(out)
}

/// In-place variant for hot loops; the caller guarantees finiteness.
pub(crate) fn softmax_in_place(m: &mut Matrix) {
    for mut col in m.column_iter_mut() {
        let max = col.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for x in col.iter_mut() {
            *x = (*x - max).exp();
            sum += *x;
        }
        col.unscale_mut(sum);
    }
}

/// `ln sum_c exp(z_c)` for one column, shift-stable.
pub(crate) fn log_sum_exp<'a>(col: impl Iterator<Item = &'a f64> + Clone) -> f64 {
    let max = col.clone().copied().fold(f64::NEG_INFINITY, f64::max);
    let sum: f64 = col.map(|&z| (z - max).exp()).sum();
    max + sum.ln()
}

/// Row index of each column's maximum; ties go to the lowest index.
pub fn argmax_labels(scores: &Matrix) -> Result<Vec<usize>> {
    if scores.nrows() == 0 || scores.ncols() == 0 {
        return Err(Error::invalid("argmax of an empty matrix"));
    }
    ensure_finite(scores, "scores")?;
    Ok(scores.column_iter().map(|c| argmax(c.iter())).collect())
}

pub(crate) fn argmax<'a>(values: impl Iterator<Item = &'a f64>) -> usize {
    let mut best = 0;
    let mut best_val = f64::NEG_INFINITY;
    for (i, &v) in values.enumerate() {
        if v > best_val {
            best = i;
            best_val = v;
        }
    }
    best
}

fn to_faer(m: &Matrix) -> faer::Mat<f64> {
    faer::Mat::from_fn(m.nrows(), m.ncols(), |i, j| m[(i, j)])
}

fn from_faer(m: faer::MatRef<'_, f64>) -> Matrix {
    Matrix::from_fn(m.nrows(), m.ncols(), |i, j| m[(i, j)])
}

/// Thin SVD, singular values non-increasing, and each column of `u` flipped
/// so its largest-magnitude entry is positive (the matching `v` column flips
/// with it).
pub fn svd(m: &Matrix) -> Result<SvdTriple> {
    ensure_finite(m, "svd input")?;
    let k = m.nrows().min(m.ncols());
    if k == 0 {
        return Ok(SvdTriple {
            u: Matrix::zeros(m.nrows(), 0),
            s: vec![],
            v: Matrix::zeros(m.ncols(), 0),
        });
    }
    // nalgebra's bidiagonal SVD returns wrong factors for some rank-deficient
    // inputs, which student composites always are.
    let dec = to_faer(m).thin_svd().map_err(|e| Error::Numerical {
        op: "svd",
        detail: format!("{e:?} for a {}x{} matrix (frobenius norm {:.3e})", m.nrows(), m.ncols(), m.norm()),
    })?;
    let u_raw = from_faer(dec.U());
    let v_raw = from_faer(dec.V());
    let sv: Vec<f64> = dec.S().column_vector().iter().copied().collect();
    let mut order: Vec<usize> = (0..k).collect();
    order.sort_by(|&a, &b| sv[b].total_cmp(&sv[a]));

    let mut u = Matrix::zeros(m.nrows(), k);
    let mut v = Matrix::zeros(m.ncols(), k);
    let mut s = Vec::with_capacity(k);
    for (dst, &src) in order.iter().enumerate() {
        let mut ucol = u_raw.column(src).into_owned();
        let mut vcol = v_raw.column(src).into_owned();
        let pivot = argmax(ucol.iter().map(|x| x.abs()).collect::<Vec<_>>().iter());
        if ucol[pivot] < 0.0 {
            ucol.neg_mut();
            vcol.neg_mut();
        }
        u.set_column(dst, &ucol);
        v.set_column(dst, &vcol);
        s.push(sv[src].max(0.0));
    }
    Ok(SvdTriple { u, s, v })
}

pub(crate) fn standard_normal_matrix<R: Rng>(rows: usize, cols: usize, rng: &mut R) -> Matrix {
    Matrix::from_fn(rows, cols, |_, _| rng.sample::<f64, _>(StandardNormal))
}

/// I.i.d. `N(0, variance)` entries, reproducible from `seed`.
pub fn gaussian_matrix(rows: usize, cols: usize, variance: f64, seed: RngSeed) -> Result<Matrix> {
    if !(variance >= 0.0) || !variance.is_finite() {
        return Err(Error::invalid(format!("variance must be finite and >= 0, got {variance}")));
    }
    let mut rng = seed.rng();
    let mut m = standard_normal_matrix(rows, cols, &mut rng);
    m *= variance.sqrt();
    Ok(m)
}

/// Haar-distributed `n x k` matrix with orthonormal columns.
pub fn random_frame<R: Rng>(n: usize, k: usize, rng: &mut R) -> Matrix {
    assert!(k <= n, "frame with {k} columns in dimension {n}");
    orthonormalize(standard_normal_matrix(n, k, rng))
}

/// Orthonormal `n x k` frame whose columns each sum to zero, i.e. a random
/// frame inside the complement of the all-ones vector.
pub fn random_centered_frame<R: Rng>(n: usize, k: usize, rng: &mut R) -> Matrix {
    assert!(k < n, "centered frame needs k < n (k = {k}, n = {n})");
    orthonormalize(center_rows(&standard_normal_matrix(n, k, rng)))
}

fn orthonormalize(g: Matrix) -> Matrix {
    let qr = g.qr();
    let r = qr.r();
    let mut q = qr.q();
    for j in 0..q.ncols() {
        if r[(j, j)] < 0.0 {
            q.column_mut(j).neg_mut();
        }
    }
    q
}

/// Project every column onto the sum-zero subspace: `(I - 11^T/n) m`.
/// Adding a constant to all logits of a column leaves the softmax unchanged,
/// so this removes only the unidentifiable part of a weight matrix.
pub fn center_rows(m: &Matrix) -> Matrix {
    let n = m.nrows() as f64;
    let mut out = m.clone();
    for mut col in out.column_iter_mut() {
        let mean = col.sum() / n;
        col.add_scalar_mut(-mean);
    }
    out
}

/// Symmetric PSD square root. Rejects asymmetric or indefinite input.
pub fn psd_sqrt(c: &Matrix) -> Result<Matrix> {
    if c.nrows() != c.ncols() {
        return Err(Error::invalid("covariance must be square"));
    }
    ensure_finite(c, "covariance")?;
    let scale = c.amax().max(1.0);
    if (c - c.transpose()).amax() > 1e-10 * scale {
        return Err(Error::invalid("covariance is not symmetric"));
    }
    if is_identity(c) {
        return Ok(c.clone());
    }
    let eig = SymmetricEigen::new(c.clone());
    let min = eig.eigenvalues.min();
    if min < -1e-10 * scale {
        return Err(Error::invalid(format!(
            "covariance is not positive semi-definite (min eigenvalue {min:.3e})"
        )));
    }
    let sqrt_vals = eig.eigenvalues.map(|x| x.max(0.0).sqrt());
    let q = &eig.eigenvectors;
    Ok(q * Matrix::from_diagonal(&sqrt_vals) * q.transpose())
}

pub(crate) fn is_identity(c: &Matrix) -> bool {
    c.is_square() && c.iter().enumerate().all(|(i, &x)| {
        let (r, col) = (i % c.nrows(), i / c.nrows());
        x == if r == col { 1.0 } else { 0.0 }
    })
}

/// Largest principal angle (radians) between the column spans of two
/// orthonormal frames with the same number of columns.
pub fn max_principal_angle(a: &Matrix, b: &Matrix) -> f64 {
    let overlap = a.transpose() * b;
    let min = match svd(&overlap) {
        Ok(t) => t.s.last().copied().unwrap_or(1.0).clamp(0.0, 1.0),
        Err(_) => return f64::NAN,
    };
    min.acos()
}
