//! Low-rank teachers, noisy teachers, relatedness-controlled teacher pairs and
//! Gaussian datasets labelled by them.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{
    argmax_labels, center_rows, gaussian_matrix, is_identity, mul_wide, psd_sqrt, random_centered_frame,
    random_frame, softmax_columns, svd, Matrix, RngSeed, SvdTriple,
};

/// How sharply teacher logits are turned into training targets.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "SharpnessRepr", into = "SharpnessRepr")]
pub enum LabelSharpness {
    /// One-hot argmax labels.
    ExactArgmax,
    /// Soft targets `softmax(beta * logits)`.
    Beta(f64),
}

impl Default for LabelSharpness {
    fn default() -> Self {
        LabelSharpness::ExactArgmax
    }
}

impl fmt::Display for LabelSharpness {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            LabelSharpness::ExactArgmax => f.write_str("exact-argmax"),
            LabelSharpness::Beta(b) => write!(f, "{b}"),
        }
    }
}

#[derive(Serialize, Deserialize)]
#[serde(untagged)]
enum SharpnessRepr {
    Name(String),
    Beta(f64),
}

impl TryFrom<SharpnessRepr> for LabelSharpness {
    type Error = String;
    fn try_from(r: SharpnessRepr) -> std::result::Result<Self, String> {
        match r {
            SharpnessRepr::Name(n) if n == "exact-argmax" => Ok(LabelSharpness::ExactArgmax),
            SharpnessRepr::Name(n) => Err(format!("unknown label sharpness {n:?}")),
            SharpnessRepr::Beta(b) if b > 0.0 && b.is_finite() => Ok(LabelSharpness::Beta(b)),
            SharpnessRepr::Beta(b) => Err(format!("label sharpness must be positive, got {b}")),
        }
    }
}

impl From<LabelSharpness> for SharpnessRepr {
    fn from(l: LabelSharpness) -> Self {
        match l {
            LabelSharpness::ExactArgmax => SharpnessRepr::Name("exact-argmax".into()),
            LabelSharpness::Beta(b) => SharpnessRepr::Beta(b),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TeacherSpec {
    pub n_features: usize,
    pub n_classes: usize,
    pub rank: usize,
    pub singular_values: Vec<f64>,
    pub noise_sigma: f64,
    #[serde(default)]
    pub label_sharpness: LabelSharpness,
}

impl TeacherSpec {
    /// Teacher whose `rank` singular values all equal `s_bar`.
    pub fn uniform(n_features: usize, n_classes: usize, rank: usize, s_bar: f64, noise_sigma: f64) -> Self {
        TeacherSpec {
            n_features,
            n_classes,
            rank,
            singular_values: vec![s_bar; rank],
            noise_sigma,
            label_sharpness: LabelSharpness::ExactArgmax,
        }
    }

    pub fn with_sharpness(mut self, sharpness: LabelSharpness) -> Self {
        self.label_sharpness = sharpness;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidSpec(m));
        if self.n_features == 0 || self.n_classes < 2 {
            return bad(format!(
                "need n_features >= 1 and n_classes >= 2, got {} and {}",
                self.n_features, self.n_classes
            ));
        }
        if self.rank == 0 || self.rank > self.n_features.min(self.n_classes) {
            return bad(format!(
                "rank {} must lie in 1..=min(n_features, n_classes) = {}",
                self.rank,
                self.n_features.min(self.n_classes)
            ));
        }
        if self.singular_values.len() != self.rank {
            return bad(format!(
                "{} singular values given for rank {}",
                self.singular_values.len(),
                self.rank
            ));
        }
        if let Some(s) = self.singular_values.iter().find(|s| !(**s > 0.0 && s.is_finite())) {
            return bad(format!("singular values must be positive and finite, got {s}"));
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return bad(format!("noise_sigma must be >= 0, got {}", self.noise_sigma));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Teacher {
    pub spec: TeacherSpec,
    pub w_bar: Matrix,
    /// Construction factors, sorted by singular value. Signs are kept as
    /// drawn so that relatedness between teacher pairs is preserved.
    pub svd: SvdTriple,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NoisyTeacher {
    pub sigma_hat: Matrix,
    pub noise: Matrix,
    pub svd: SvdTriple,
    /// SVD of the row-centred noisy teacher. Its frames are the ones a
    /// softmax student can actually align to, since a constant added to every
    /// logit is invisible to the loss.
    pub aligned_svd: SvdTriple,
    pub label_sharpness: LabelSharpness,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub x: Matrix,
    pub noisy_labels: Vec<usize>,
    pub clean_labels: Vec<usize>,
    pub input_covariance: Matrix,
    pub n_classes: usize,
    /// Present for finite label sharpness; one-hot labels are used otherwise.
    pub soft_targets: Option<Matrix>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.x.ncols()
    }

    pub fn is_empty(&self) -> bool {
        self.x.ncols() == 0
    }

    /// Training targets, one column per sample.
    pub fn targets(&self) -> Matrix {
        match &self.soft_targets {
            Some(t) => t.clone(),
            None => one_hot(&self.noisy_labels, self.n_classes),
        }
    }

    pub fn label_flip_rate(&self) -> f64 {
        if self.is_empty() {
            return 0.0;
        }
        let flips = self
            .noisy_labels
            .iter()
            .zip(&self.clean_labels)
            .filter(|(a, b)| a != b)
            .count();
        flips as f64 / self.len() as f64
    }
}

pub fn one_hot(labels: &[usize], n_classes: usize) -> Matrix {
    let mut m = Matrix::zeros(n_classes, labels.len());
    for (j, &l) in labels.iter().enumerate() {
        m[(l, j)] = 1.0;
    }
    m
}

fn output_frame(n_classes: usize, rank: usize, rng: &mut impl rand::Rng) -> Matrix {
    if rank < n_classes {
        random_centered_frame(n_classes, rank, rng)
    } else {
        random_frame(n_classes, rank, rng)
    }
}

fn assemble(spec: &TeacherSpec, u: Matrix, v: Matrix) -> Teacher {
    let mut order: Vec<usize> = (0..spec.rank).collect();
    order.sort_by(|&a, &b| spec.singular_values[b].total_cmp(&spec.singular_values[a]));
    let s: Vec<f64> = order.iter().map(|&i| spec.singular_values[i]).collect();
    let u = Matrix::from_columns(&order.iter().map(|&i| u.column(i)).collect::<Vec<_>>());
    let v = Matrix::from_columns(&order.iter().map(|&i| v.column(i)).collect::<Vec<_>>());
    let svd = SvdTriple { u, s, v };
    Teacher { spec: spec.clone(), w_bar: svd.reconstruct(), svd }
}

/// `W̄ = Ū diag(s̄) V̄ᵀ` with random orthonormal frames. When the rank is below
/// the class count, `Ū` is drawn orthogonal to the all-ones vector.
pub fn make_teacher(spec: &TeacherSpec, seed: RngSeed) -> Result<Teacher> {
    spec.validate()?;
    let mut rng = seed.rng();
    let u = output_frame(spec.n_classes, spec.rank, &mut rng);
    let v = random_frame(spec.n_features, spec.rank, &mut rng);
    Ok(assemble(spec, u, v))
}

/// Teachers with `V̄_Bᵀ V̄_A = r I` and independent output frames.
pub fn make_related_pair(
    spec_a: &TeacherSpec,
    spec_b: &TeacherSpec,
    r: f64,
    seed: RngSeed,
) -> Result<(Teacher, Teacher)> {
    spec_a.validate()?;
    spec_b.validate()?;
    if !(0.0..=1.0).contains(&r) {
        return Err(Error::InvalidSpec(format!("relatedness must lie in [0, 1], got {r}")));
    }
    if spec_a.rank != spec_b.rank || spec_a.n_features != spec_b.n_features {
        return Err(Error::InvalidSpec("paired teachers need equal rank and n_features".into()));
    }
    let k = spec_a.rank;
    if 2 * k > spec_a.n_features {
        return Err(Error::InvalidSpec(format!(
            "rank {k} leaves no orthogonal complement in {} features",
            spec_a.n_features
        )));
    }
    let mut rng = seed.rng();
    let q = random_frame(spec_a.n_features, 2 * k, &mut rng);
    let v_a = q.columns(0, k).into_owned();
    let v_b = &v_a * r + q.columns(k, k) * (1.0 - r * r).sqrt();
    let u_a = output_frame(spec_a.n_classes, k, &mut rng);
    let u_b = output_frame(spec_b.n_classes, k, &mut rng);
    Ok((assemble(spec_a, u_a, v_a), assemble(spec_b, u_b, v_b)))
}

/// `Σ̂ = W̄ + ξ` with `ξ` entries i.i.d. `N(0, σ̂²/N̄₁)`.
pub fn perturb_teacher(t: &Teacher, sigma_hat: f64, seed: RngSeed) -> Result<NoisyTeacher> {
    if !(sigma_hat >= 0.0 && sigma_hat.is_finite()) {
        return Err(Error::invalid(format!("sigma_hat must be >= 0, got {sigma_hat}")));
    }
    let (c, n1) = t.w_bar.shape();
    let noise = gaussian_matrix(c, n1, sigma_hat * sigma_hat / n1 as f64, seed)?;
    let sigma_hat_m = &t.w_bar + &noise;
    Ok(NoisyTeacher {
        svd: svd(&sigma_hat_m)?,
        aligned_svd: svd(&center_rows(&sigma_hat_m))?,
        sigma_hat: sigma_hat_m,
        noise,
        label_sharpness: t.spec.label_sharpness,
    })
}

/// `X` columns i.i.d. `N(0, C_X)`, labelled by the noisy and the clean teacher.
pub fn sample_dataset(
    nt: &NoisyTeacher,
    t: &Teacher,
    n_data: usize,
    c_x: &Matrix,
    seed: RngSeed,
) -> Result<Dataset> {
    let n1 = t.w_bar.ncols();
    if c_x.shape() != (n1, n1) {
        return Err(Error::invalid(format!(
            "input covariance is {:?}, expected {n1}x{n1}",
            c_x.shape()
        )));
    }
    if nt.sigma_hat.shape() != t.w_bar.shape() {
        return Err(Error::invalid("noisy teacher and teacher shapes differ"));
    }
    let x = sample_inputs(n1, n_data, c_x, seed)?;
    let (noisy_labels, clean_labels, soft_targets) = if n_data == 0 {
        (vec![], vec![], None)
    } else {
        let noisy_logits = mul_wide(&nt.sigma_hat, &x);
        let soft = match nt.label_sharpness {
            LabelSharpness::ExactArgmax => None,
            LabelSharpness::Beta(b) => Some(softmax_columns(&(noisy_logits.clone() * b))?),
        };
        (argmax_labels(&noisy_logits)?, argmax_labels(&mul_wide(&t.w_bar, &x))?, soft)
    };
    Ok(Dataset {
        x,
        noisy_labels,
        clean_labels,
        input_covariance: c_x.clone(),
        n_classes: t.w_bar.nrows(),
        soft_targets,
    })
}

/// `n` samples from `N(0, C_X)` as columns.
pub fn sample_inputs(n_features: usize, n: usize, c_x: &Matrix, seed: RngSeed) -> Result<Matrix> {
    let z = gaussian_matrix(n_features, n, 1.0, seed)?;
    if is_identity(c_x) {
        Ok(z)
    } else {
        Ok(psd_sqrt(c_x)? * z)
    }
}

/// `r_AB = V̄_Bᵀ V̄_A`, shape `rank_B x rank_A`.
pub fn relatedness(a: &Teacher, b: &Teacher) -> Result<Matrix> {
    if a.w_bar.ncols() != b.w_bar.ncols() {
        return Err(Error::invalid(format!(
            "teachers have {} and {} features",
            a.w_bar.ncols(),
            b.w_bar.ncols()
        )));
    }
    Ok(b.svd.v.transpose() * &a.svd.v)
}
