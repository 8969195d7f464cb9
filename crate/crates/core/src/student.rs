//! Deep linear (optionally ReLU) students with a softmax read-out, their
//! cross-entropy losses and full-batch gradient descent, for one task or for
//! two tasks sharing a trunk.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{
    argmax_labels, axpy, ensure_finite, gaussian_matrix, log_sum_exp, mul_tr, mul_wide, softmax_in_place, svd, Matrix,
    RngSeed, SvdTriple,
};
use crate::teacher::{sample_inputs, Dataset, Teacher};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    #[default]
    Linear,
    Relu,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum Init {
    /// Entries of layer `l` i.i.d. `N(0, scale²/N_{l-1})`.
    Random { scale: f64 },
    /// Composite `Û diag(s0) V̂ᵀ` from the noisy teacher's frames, with equal
    /// singular values `s0^(1/L)` in every layer.
    TrainingAligned { s0: Vec<f64> },
}

impl Default for Init {
    fn default() -> Self {
        Init::Random { scale: 0.01 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StudentArch {
    /// `N_0 = N̄₁, N_1, ..., N_L = N̄₃`.
    pub layer_widths: Vec<usize>,
    #[serde(default)]
    pub activation: Activation,
    #[serde(default)]
    pub init: Init,
}

impl StudentArch {
    pub fn validate(&self) -> Result<()> {
        if self.layer_widths.len() < 3 {
            return Err(Error::invalid(format!(
                "a student needs at least 2 weight layers, got widths {:?}",
                self.layer_widths
            )));
        }
        if self.layer_widths.contains(&0) {
            return Err(Error::invalid("layer widths must be positive"));
        }
        match &self.init {
            Init::Random { scale } if !(*scale >= 0.0 && scale.is_finite()) => {
                Err(Error::invalid(format!("init scale must be >= 0, got {scale}")))
            }
            Init::TrainingAligned { s0 } if s0.is_empty() || s0.iter().any(|s| !(*s >= 0.0)) => {
                Err(Error::invalid("training-aligned init needs non-negative s0 values"))
            }
            _ => Ok(()),
        }
    }

    pub fn depth(&self) -> usize {
        self.layer_widths.len() - 1
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Student {
    /// `layers[l]` maps width `N_l` to `N_{l+1}`.
    pub layers: Vec<Matrix>,
    pub arch: StudentArch,
}

impl Student {
    pub fn n_features(&self) -> usize {
        self.layers[0].ncols()
    }

    pub fn n_classes(&self) -> usize {
        self.layers.last().map_or(0, |w| w.nrows())
    }

    /// `W = W⁽ᴸ⁾ ··· W⁽¹⁾`.
    pub fn composite(&self) -> Matrix {
        composite(&self.layers.iter().collect::<Vec<_>>())
    }

    pub fn logits(&self, x: &Matrix) -> Result<Matrix> {
        let layers: Vec<&Matrix> = self.layers.iter().collect();
        check_input(&layers, x)?;
        Ok(chain_logits(&layers, self.arch.activation, x))
    }

    pub fn singular_values(&self) -> Result<Vec<f64>> {
        Ok(svd(&self.composite())?.s)
    }
}

fn composite(layers: &[&Matrix]) -> Matrix {
    let mut w = layers[0].clone();
    for l in &layers[1..] {
        w = *l * w;
    }
    w
}

fn check_input(layers: &[&Matrix], x: &Matrix) -> Result<()> {
    if x.nrows() != layers[0].ncols() {
        return Err(Error::invalid(format!(
            "input has {} rows, student expects {}",
            x.nrows(),
            layers[0].ncols()
        )));
    }
    Ok(())
}

fn relu_in_place(m: &mut Matrix) {
    m.apply(|x| *x = x.max(0.0));
}

fn chain_logits(layers: &[&Matrix], act: Activation, x: &Matrix) -> Matrix {
    match act {
        Activation::Linear => mul_wide(&composite(layers), x),
        Activation::Relu => {
            let mut h = mul_wide(layers[0], x);
            for l in &layers[1..] {
                relu_in_place(&mut h);
                h = mul_wide(l, &h);
            }
            h
        }
    }
}

/// Mean cross-entropy `-(1/N) Σ_μ Σ_c T_cμ ln softmax(z_μ)_c`.
pub fn cross_entropy(logits: &Matrix, targets: &Matrix) -> f64 {
    let n = logits.ncols();
    if n == 0 {
        return 0.0;
    }
    let mut total = 0.0;
    for (z, t) in logits.column_iter().zip(targets.column_iter()) {
        let lse = log_sum_exp(z.iter());
        total += t.iter().zip(z.iter()).map(|(&tc, &zc)| if tc == 0.0 { 0.0 } else { tc * (lse - zc) }).sum::<f64>();
    }
    total / n as f64
}

/// Per-sample losses `-ln softmax(z_μ)_{y_μ}`.
pub fn label_losses(logits: &Matrix, labels: &[usize]) -> Vec<f64> {
    logits
        .column_iter()
        .zip(labels)
        .map(|(z, &y)| log_sum_exp(z.iter()) - z[y])
        .collect()
}

/// Loss and its gradient with respect to every layer. Linear chains use the
/// composite form `W>ᵀ (P − T)Xᵀ/N W<ᵀ`; ReLU chains use backpropagation.
fn chain_gradients(layers: &[&Matrix], act: Activation, x: &Matrix, targets: &Matrix) -> (f64, Vec<Matrix>) {
    let n = x.ncols().max(1) as f64;
    match act {
        Activation::Linear => {
            let l = layers.len();
            // below[i] = W_{i-1} ... W_0 (identity-free: None for i = 0)
            let mut below: Vec<Option<Matrix>> = vec![None; l];
            for i in 1..l {
                below[i] = Some(match &below[i - 1] {
                    None => layers[0].clone(),
                    Some(b) => layers[i - 1] * b,
                });
            }
            let w = match &below[l - 1] {
                None => layers[0].clone(),
                Some(b) => layers[l - 1] * b,
            };
            let z = mul_wide(&w, x);
            let loss = cross_entropy(&z, targets);
            let mut p = z;
            softmax_in_place(&mut p);
            p -= targets;
            let d = mul_tr(&p, x) / n;
            let mut grads = vec![Matrix::zeros(0, 0); l];
            // above = W_{L-1} ... W_{i+1}
            let mut above: Option<Matrix> = None;
            for i in (0..l).rev() {
                let left = match &above {
                    None => d.clone(),
                    Some(a) => a.transpose() * &d,
                };
                grads[i] = match &below[i] {
                    None => left,
                    Some(b) => left * b.transpose(),
                };
                above = Some(match above {
                    None => layers[i].clone(),
                    Some(a) => a * layers[i],
                });
            }
            (loss, grads)
        }
        Activation::Relu => {
            let l = layers.len();
            let mut pre = Vec::with_capacity(l);
            let mut acts = Vec::with_capacity(l);
            acts.push(x.clone());
            for (i, w) in layers.iter().enumerate() {
                let a = mul_wide(w, &acts[i]);
                if i + 1 < l {
                    let mut h = a.clone();
                    relu_in_place(&mut h);
                    acts.push(h);
                }
                pre.push(a);
            }
            let z = pre.pop().expect("at least one layer");
            let loss = cross_entropy(&z, targets);
            let mut delta = z;
            softmax_in_place(&mut delta);
            delta -= targets;
            delta /= n;
            let mut grads = vec![Matrix::zeros(0, 0); l];
            for i in (0..l).rev() {
                grads[i] = mul_tr(&delta, &acts[i]);
                if i > 0 {
                    let mut back = layers[i].tr_mul(&delta);
                    back.zip_apply(&pre[i - 1], |g, a| {
                        if a <= 0.0 {
                            *g = 0.0
                        }
                    });
                    delta = back;
                }
            }
            (loss, grads)
        }
    }
}

/// Build a student. Training-aligned init needs the (row-centred) noisy
/// teacher SVD.
pub fn init_student(arch: &StudentArch, teacher_svd: Option<&SvdTriple>, seed: RngSeed) -> Result<Student> {
    arch.validate()?;
    let w = &arch.layer_widths;
    let depth = arch.depth();
    let layers = match &arch.init {
        Init::Random { scale } => (0..depth)
            .map(|l| {
                let var = scale * scale / w[l] as f64;
                gaussian_matrix(w[l + 1], w[l], var, seed.derive_indexed("layer", l as u64))
            })
            .collect::<Result<Vec<_>>>()?,
        Init::TrainingAligned { s0 } => {
            let t = teacher_svd.ok_or_else(|| Error::invalid("training-aligned init requires the teacher SVD"))?;
            let k = s0.len();
            if k > t.s.len() {
                return Err(Error::invalid(format!("{k} aligned modes requested, teacher SVD has {}", t.s.len())));
            }
            if t.u.nrows() != w[depth] || t.v.nrows() != w[0] {
                return Err(Error::invalid("teacher SVD shape does not match the student"));
            }
            if let Some(&h) = w[1..depth].iter().find(|&&h| h < k) {
                return Err(Error::invalid(format!("hidden width {h} below aligned rank {k}")));
            }
            let frame = |l: usize| -> Matrix {
                if l == 0 {
                    t.v.columns(0, k).into_owned()
                } else if l == depth {
                    t.u.columns(0, k).into_owned()
                } else {
                    Matrix::identity(w[l], k)
                }
            };
            let per_layer: Vec<f64> = s0.iter().map(|s| s.powf(1.0 / depth as f64)).collect();
            let diag = Matrix::from_diagonal(&nalgebra::DVector::from_vec(per_layer));
            (0..depth).map(|l| frame(l + 1) * &diag * frame(l).transpose()).collect()
        }
    };
    Ok(Student { layers, arch: arch.clone() })
}

pub fn forward(s: &Student, x: &Matrix) -> Result<Matrix> {
    let mut z = s.logits(x)?;
    ensure_finite(&z, "student logits")?;
    softmax_in_place(&mut z);
    Ok(z)
}

fn check_dataset(layers: &[&Matrix], d: &Dataset) -> Result<()> {
    check_input(layers, &d.x)?;
    let c = layers.last().expect("non-empty").nrows();
    if c != d.n_classes {
        return Err(Error::invalid(format!("student has {c} classes, dataset {}", d.n_classes)));
    }
    Ok(())
}

/// Mean cross-entropy against the noisy training targets.
pub fn train_loss(s: &Student, d: &Dataset) -> Result<f64> {
    let layers: Vec<&Matrix> = s.layers.iter().collect();
    check_dataset(&layers, d)?;
    Ok(cross_entropy(&chain_logits(&layers, s.arch.activation, &d.x), &d.targets()))
}

/// Gradient of `train_loss` with respect to each layer.
pub fn loss_gradients(s: &Student, d: &Dataset) -> Result<(f64, Vec<Matrix>)> {
    let layers: Vec<&Matrix> = s.layers.iter().collect();
    check_dataset(&layers, d)?;
    Ok(chain_gradients(&layers, s.arch.activation, &d.x, &d.targets()))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossEstimate {
    pub mean: f64,
    pub stderr: f64,
}

impl LossEstimate {
    pub fn from_samples(samples: &[f64]) -> Self {
        let n = samples.len();
        if n == 0 {
            return LossEstimate { mean: f64::NAN, stderr: f64::NAN };
        }
        let mean = samples.iter().sum::<f64>() / n as f64;
        if n < 2 {
            return LossEstimate { mean, stderr: 0.0 };
        }
        let var = samples.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
        LossEstimate { mean, stderr: (var / n as f64).sqrt() }
    }
}

/// Fresh inputs labelled by the clean teacher, for generalization loss.
#[derive(Debug, Clone, PartialEq)]
pub struct TestSet {
    pub x: Matrix,
    pub labels: Vec<usize>,
}

impl TestSet {
    pub fn new(t: &Teacher, n_test: usize, c_x: &Matrix, seed: RngSeed) -> Result<Self> {
        if n_test == 0 {
            return Err(Error::invalid("n_test must be >= 1"));
        }
        let x = sample_inputs(t.w_bar.ncols(), n_test, c_x, seed)?;
        let labels = argmax_labels(&mul_wide(&t.w_bar, &x))?;
        Ok(TestSet { x, labels })
    }

    pub fn per_sample(&self, logits: &Matrix) -> Vec<f64> {
        label_losses(logits, &self.labels)
    }

    pub fn loss_of_composite(&self, w: &Matrix) -> Result<LossEstimate> {
        if w.ncols() != self.x.nrows() {
            return Err(Error::invalid("composite weight and test inputs disagree"));
        }
        Ok(LossEstimate::from_samples(&self.per_sample(&mul_wide(w, &self.x))))
    }

    pub fn evaluate(&self, s: &Student) -> Result<LossEstimate> {
        Ok(LossEstimate::from_samples(&self.per_sample(&s.logits(&self.x)?)))
    }
}

/// Monte Carlo estimate of `-E ln P_{ȳ(X)}(WX)` over fresh Gaussian inputs.
pub fn generalization_loss(s: &Student, t: &Teacher, n_test: usize, c_x: &Matrix, seed: RngSeed) -> Result<LossEstimate> {
    if s.n_features() != t.w_bar.ncols() || s.n_classes() != t.w_bar.nrows() {
        return Err(Error::invalid("student and teacher shapes differ"));
    }
    TestSet::new(t, n_test, c_x, seed)?.evaluate(s)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum BatchMode {
    #[default]
    Full,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub steps: usize,
    #[serde(default)]
    pub batch: BatchMode,
    #[serde(default = "default_record_every")]
    pub record_every: usize,
    #[serde(default = "default_loss_weights")]
    pub loss_weights: [f64; 2],
    #[serde(default = "default_n_test")]
    pub n_test: usize,
    #[serde(default)]
    pub test_seed: u64,
}

fn default_record_every() -> usize {
    10
}
fn default_loss_weights() -> [f64; 2] {
    [1.0, 1.0]
}
fn default_n_test() -> usize {
    10_000
}

impl TrainConfig {
    pub fn new(learning_rate: f64, steps: usize) -> Self {
        TrainConfig {
            learning_rate,
            steps,
            batch: BatchMode::Full,
            record_every: default_record_every(),
            loss_weights: default_loss_weights(),
            n_test: default_n_test(),
            test_seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::invalid(format!("learning_rate must be > 0, got {}", self.learning_rate)));
        }
        if self.record_every == 0 {
            return Err(Error::invalid("record_every must be >= 1"));
        }
        if self.loss_weights.iter().any(|a| !(*a >= 0.0 && a.is_finite())) {
            return Err(Error::invalid("loss weights must be finite and >= 0"));
        }
        Ok(())
    }

    fn records(&self, step: usize) -> bool {
        step % self.record_every == 0 || step == self.steps
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub times: Vec<usize>,
    pub train_loss: Vec<f64>,
    pub gen_loss: Vec<f64>,
    pub gen_loss_stderr: Vec<f64>,
    pub singular_values: Vec<Vec<f64>>,
    /// Composite weight at every recorded step.
    pub composites: Vec<Matrix>,
    pub final_student: Student,
}

impl Trajectory {
    fn empty(s: &Student) -> Self {
        Trajectory {
            times: vec![],
            train_loss: vec![],
            gen_loss: vec![],
            gen_loss_stderr: vec![],
            singular_values: vec![],
            composites: vec![],
            final_student: s.clone(),
        }
    }

    fn record(&mut self, step: usize, train: f64, s: &Student, test: &TestSet) -> Result<()> {
        let g = test.evaluate(s)?;
        self.times.push(step);
        self.train_loss.push(train);
        self.gen_loss.push(g.mean);
        self.gen_loss_stderr.push(g.stderr);
        let w = s.composite();
        self.singular_values.push(svd(&w)?.s);
        self.composites.push(w);
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }
}

const DIVERGENCE_LOSS: f64 = 1e6;

fn check_divergence(step: usize, loss: f64) -> Result<()> {
    if !loss.is_finite() || loss > DIVERGENCE_LOSS {
        Err(Error::Divergence { step, loss })
    } else {
        Ok(())
    }
}

fn apply(layers: &mut [Matrix], grads: &[Matrix], eta: f64) {
    for (w, g) in layers.iter_mut().zip(grads) {
        axpy(w, -eta, g);
    }
}

/// One full-batch gradient step at learning rate `cfg.learning_rate`.
pub fn sgd_step(s: &Student, d: &Dataset, cfg: &TrainConfig) -> Result<Student> {
    let (_, grads) = loss_gradients(s, d)?;
    let mut next = s.clone();
    apply(&mut next.layers, &grads, cfg.learning_rate);
    Ok(next)
}

/// Full-batch training with a test set built from `cfg.n_test` and `cfg.test_seed`.
pub fn train(s: &Student, d: &Dataset, t: &Teacher, cfg: &TrainConfig) -> Result<Trajectory> {
    let test = TestSet::new(t, cfg.n_test, &d.input_covariance, RngSeed(cfg.test_seed))?;
    train_with_test(s, d, &test, cfg)
}

pub fn train_with_test(s: &Student, d: &Dataset, test: &TestSet, cfg: &TrainConfig) -> Result<Trajectory> {
    cfg.validate()?;
    let mut cur = s.clone();
    let layers: Vec<&Matrix> = cur.layers.iter().collect();
    check_dataset(&layers, d)?;
    let targets = d.targets();
    let mut traj = Trajectory::empty(s);
    for step in 0..=cfg.steps {
        let (loss, grads) = {
            let layers: Vec<&Matrix> = cur.layers.iter().collect();
            chain_gradients(&layers, cur.arch.activation, &d.x, &targets)
        };
        check_divergence(step, loss)?;
        if cfg.records(step) {
            traj.record(step, loss, &cur, test)?;
        }
        if step == cfg.steps {
            break;
        }
        apply(&mut cur.layers, &grads, cfg.learning_rate);
    }
    traj.final_student = cur;
    Ok(traj)
}

/// Two students sharing a trunk: `W_A = head_a · trunk`, `W_B = head_b · trunk`.
#[derive(Debug, Clone, PartialEq)]
pub struct MultitaskStudent {
    /// `trunk[0]` acts on the input.
    pub trunk: Vec<Matrix>,
    pub head_a: Matrix,
    pub head_b: Matrix,
    pub activation: Activation,
    pub init: Init,
}

impl MultitaskStudent {
    /// Random trunk of widths `trunk_widths` (input first) and random heads.
    pub fn random(
        trunk_widths: &[usize],
        n_classes: usize,
        scale: f64,
        activation: Activation,
        seed: RngSeed,
    ) -> Result<Self> {
        if trunk_widths.len() < 2 || trunk_widths.contains(&0) || n_classes == 0 {
            return Err(Error::invalid(format!("invalid trunk widths {trunk_widths:?}")));
        }
        if !(scale >= 0.0 && scale.is_finite()) {
            return Err(Error::invalid(format!("init scale must be >= 0, got {scale}")));
        }
        let layer = |l: usize, rows: usize, cols: usize, tag: &str| {
            gaussian_matrix(rows, cols, scale * scale / cols as f64, seed.derive_indexed(tag, l as u64))
        };
        let trunk = (0..trunk_widths.len() - 1)
            .map(|l| layer(l, trunk_widths[l + 1], trunk_widths[l], "trunk"))
            .collect::<Result<Vec<_>>>()?;
        let h = *trunk_widths.last().expect("non-empty");
        Ok(MultitaskStudent {
            trunk,
            head_a: layer(0, n_classes, h, "head-a")?,
            head_b: layer(0, n_classes, h, "head-b")?,
            activation,
            init: Init::Random { scale },
        })
    }

    /// Training-aligned two-layer student. The trunk holds one row per aligned
    /// mode of each task, `√s0 v̂ᵀ`, and each head reads only its own rows
    /// through `√s0 û`, so each task starts at `Û diag(s0) V̂ᵀ`.
    pub fn training_aligned(a: &SvdTriple, b: &SvdTriple, s0: &[f64]) -> Result<Self> {
        let k = s0.len();
        if k == 0 || k > a.s.len() || k > b.s.len() {
            return Err(Error::invalid(format!("{k} aligned modes requested")));
        }
        if a.u.nrows() != b.u.nrows() || a.v.nrows() != b.v.nrows() {
            return Err(Error::invalid("task frames have different shapes"));
        }
        let (c, n1) = (a.u.nrows(), a.v.nrows());
        let mut trunk = Matrix::zeros(2 * k, n1);
        let mut head_a = Matrix::zeros(c, 2 * k);
        let mut head_b = Matrix::zeros(c, 2 * k);
        for (i, &s) in s0.iter().enumerate() {
            let r = s.sqrt();
            trunk.set_row(i, &(a.v.column(i).transpose() * r));
            trunk.set_row(k + i, &(b.v.column(i).transpose() * r));
            head_a.set_column(i, &(a.u.column(i) * r));
            head_b.set_column(k + i, &(b.u.column(i) * r));
        }
        Ok(MultitaskStudent {
            trunk: vec![trunk],
            head_a,
            head_b,
            activation: Activation::Linear,
            init: Init::TrainingAligned { s0: s0.to_vec() },
        })
    }

    fn chain<'a>(&'a self, head: &'a Matrix) -> Vec<&'a Matrix> {
        self.trunk.iter().chain(std::iter::once(head)).collect()
    }

    fn as_student(&self, head: &Matrix) -> Student {
        let mut widths: Vec<usize> = vec![self.trunk[0].ncols()];
        widths.extend(self.trunk.iter().map(|w| w.nrows()));
        widths.push(head.nrows());
        Student {
            layers: self.chain(head).into_iter().cloned().collect(),
            arch: StudentArch { layer_widths: widths, activation: self.activation, init: self.init.clone() },
        }
    }

    pub fn student_a(&self) -> Student {
        self.as_student(&self.head_a)
    }

    pub fn student_b(&self) -> Student {
        self.as_student(&self.head_b)
    }
}

/// Gradient descent on `α_A L_A + α_B L_B`. The trunk receives both tasks'
/// gradients (task A added first), each head only its own.
pub fn train_multitask(
    ms: &MultitaskStudent,
    d_a: &Dataset,
    d_b: &Dataset,
    test_a: &TestSet,
    test_b: &TestSet,
    cfg: &TrainConfig,
) -> Result<(Trajectory, Trajectory)> {
    cfg.validate()?;
    if d_a.x.nrows() != d_b.x.nrows() {
        return Err(Error::invalid("task datasets have different feature counts"));
    }
    check_dataset(&ms.chain(&ms.head_a), d_a)?;
    check_dataset(&ms.chain(&ms.head_b), d_b)?;
    let [alpha_a, alpha_b] = cfg.loss_weights;
    let (t_a, t_b) = (d_a.targets(), d_b.targets());
    let mut cur = ms.clone();
    let mut traj_a = Trajectory::empty(&ms.student_a());
    let mut traj_b = Trajectory::empty(&ms.student_b());
    let depth = cur.trunk.len();
    for step in 0..=cfg.steps {
        let (loss_a, grads_a) = chain_gradients(&cur.chain(&cur.head_a), cur.activation, &d_a.x, &t_a);
        let (loss_b, grads_b) = if alpha_b == 0.0 {
            (cross_entropy(&chain_logits(&cur.chain(&cur.head_b), cur.activation, &d_b.x), &t_b), None)
        } else {
            let (l, g) = chain_gradients(&cur.chain(&cur.head_b), cur.activation, &d_b.x, &t_b);
            (l, Some(g))
        };
        check_divergence(step, loss_a)?;
        check_divergence(step, loss_b)?;
        if cfg.records(step) {
            traj_a.record(step, loss_a, &cur.student_a(), test_a)?;
            traj_b.record(step, loss_b, &cur.student_b(), test_b)?;
        }
        if step == cfg.steps {
            break;
        }
        let eta = cfg.learning_rate;
        for l in 0..depth {
            let mut g = &grads_a[l] * alpha_a;
            if let Some(gb) = &grads_b {
                axpy(&mut g, alpha_b, &gb[l]);
            }
            axpy(&mut cur.trunk[l], -eta, &g);
        }
        axpy(&mut cur.head_a, -eta * alpha_a, &grads_a[depth]);
        if let Some(gb) = &grads_b {
            axpy(&mut cur.head_b, -eta * alpha_b, &gb[depth]);
        }
    }
    traj_a.final_student = cur.student_a();
    traj_b.final_student = cur.student_b();
    Ok((traj_a, traj_b))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::teacher::{make_teacher, perturb_teacher, sample_dataset, TeacherSpec};

    fn linear_arch(widths: &[usize], init: Init) -> StudentArch {
        StudentArch { layer_widths: widths.to_vec(), activation: Activation::Linear, init }
    }

    fn fixture(n1: usize, c: usize, n: usize, seed: u64) -> (Teacher, Dataset) {
        let t = make_teacher(&TeacherSpec::uniform(n1, c, 1, 3.0, 1.0), RngSeed(seed)).unwrap();
        let nt = perturb_teacher(&t, 1.0, RngSeed(seed + 1)).unwrap();
        let d = sample_dataset(&nt, &t, n, &Matrix::identity(n1, n1), RngSeed(seed + 2)).unwrap();
        (t, d)
    }

    #[test]
    fn zero_student_is_uniform() {
        let arch = linear_arch(&[4, 3, 3], Init::Random { scale: 0.0 });
        let s = init_student(&arch, None, RngSeed(0)).unwrap();
        let p = forward(&s, &Matrix::from_element(4, 2, 1.0)).unwrap();
        assert!(p.iter().all(|&x| (x - 1.0 / 3.0).abs() < 1e-15));
        let (_, d) = fixture(4, 3, 10, 1);
        assert!((train_loss(&s, &d).unwrap() - 3f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn ta_init_composite_and_balance() {
        let (t, _) = fixture(8, 2, 1, 3);
        let nt = perturb_teacher(&t, 1.0, RngSeed(9)).unwrap();
        let arch = linear_arch(&[8, 3, 2], Init::TrainingAligned { s0: vec![0.1] });
        let s = init_student(&arch, Some(&nt.aligned_svd), RngSeed(0)).unwrap();
        let u = nt.aligned_svd.u.columns(0, 1);
        let v = nt.aligned_svd.v.columns(0, 1);
        let expect = u * v.transpose() * 0.1;
        assert!((s.composite() - expect).amax() < 1e-10);
        assert!((s.singular_values().unwrap()[0] - 0.1).abs() < 1e-12);
        let (w1, w2) = (&s.layers[0], &s.layers[1]);
        let gap = w2.transpose() * w2 - w1 * w1.transpose();
        assert!(gap.amax() < 1e-12);
    }

    #[test]
    fn ta_without_svd_rejected() {
        let arch = linear_arch(&[4, 2, 2], Init::TrainingAligned { s0: vec![1.0] });
        assert!(matches!(init_student(&arch, None, RngSeed(0)), Err(Error::InvalidInput(_))));
    }

    #[test]
    fn shallow_arch_rejected() {
        let arch = linear_arch(&[4, 2], Init::default());
        assert!(init_student(&arch, None, RngSeed(0)).is_err());
    }

    #[test]
    fn linear_forward_matches_composite() {
        let arch = linear_arch(&[5, 4, 3, 2], Init::Random { scale: 1.0 });
        let s = init_student(&arch, None, RngSeed(4)).unwrap();
        let x = gaussian_matrix(5, 7, 1.0, RngSeed(5)).unwrap();
        let direct = &s.layers[2] * (&s.layers[1] * (&s.layers[0] * &x));
        assert!((s.logits(&x).unwrap() - direct).amax() < 1e-12);
    }

    #[test]
    fn relu_with_positive_preactivations_matches_linear() {
        let w1 = Matrix::from_row_slice(2, 2, &[1.0, 0.5, 0.2, 1.0]);
        let w2 = Matrix::from_row_slice(3, 2, &[1.0, -1.0, 0.5, 2.0, -0.3, 0.1]);
        let x = Matrix::from_row_slice(2, 3, &[1.0, 2.0, 0.5, 0.3, 1.0, 2.0]);
        let mk = |act| Student {
            layers: vec![w1.clone(), w2.clone()],
            arch: StudentArch { layer_widths: vec![2, 2, 3], activation: act, init: Init::default() },
        };
        let a = forward(&mk(Activation::Relu), &x).unwrap();
        let b = forward(&mk(Activation::Linear), &x).unwrap();
        assert!((a - b).amax() < 1e-15);
    }

    #[test]
    fn dimension_mismatch_rejected() {
        let s = init_student(&linear_arch(&[4, 2, 2], Init::default()), None, RngSeed(0)).unwrap();
        assert!(forward(&s, &Matrix::zeros(3, 1)).is_err());
    }

    #[test]
    fn hand_computed_two_point_loss() {
        let s = Student {
            layers: vec![Matrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, 0.0]), Matrix::identity(2, 2)],
            arch: linear_arch(&[2, 2, 2], Init::default()),
        };
        let d = Dataset {
            x: Matrix::from_row_slice(2, 2, &[1.0, 2.0, 0.0, 0.0]),
            noisy_labels: vec![0, 1],
            clean_labels: vec![0, 1],
            input_covariance: Matrix::identity(2, 2),
            n_classes: 2,
            soft_targets: None,
        };
        // logits (1, 0) with label 0 and (2, 0) with label 1
        let expect = ((1.0 + (-1f64).exp()).ln() + (1.0 + 2f64.exp()).ln()) / 2.0;
        assert!((train_loss(&s, &d).unwrap() - expect).abs() < 1e-12);
    }

    #[test]
    fn scaled_noisy_teacher_fits_its_labels() {
        let t = make_teacher(&TeacherSpec::uniform(16, 2, 1, 3.0, 0.5), RngSeed(1)).unwrap();
        let nt = perturb_teacher(&t, 0.5, RngSeed(2)).unwrap();
        let d = sample_dataset(&nt, &t, 400, &Matrix::identity(16, 16), RngSeed(3)).unwrap();
        let s = Student {
            layers: vec![&nt.sigma_hat * 50.0, Matrix::identity(2, 2)],
            arch: linear_arch(&[16, 2, 2], Init::default()),
        };
        assert!(train_loss(&s, &d).unwrap() < 0.05);
    }

    #[test]
    fn large_margin_student_generalizes() {
        let t = make_teacher(&TeacherSpec::uniform(16, 2, 1, 10.0, 0.0), RngSeed(4)).unwrap();
        let s = Student {
            layers: vec![&t.w_bar * 50.0, Matrix::identity(2, 2)],
            arch: linear_arch(&[16, 2, 2], Init::default()),
        };
        let g = generalization_loss(&s, &t, 5000, &Matrix::identity(16, 16), RngSeed(5)).unwrap();
        assert!(g.mean < 0.05);
        let again = generalization_loss(&s, &t, 5000, &Matrix::identity(16, 16), RngSeed(5)).unwrap();
        assert_eq!(g, again);
    }

    #[test]
    fn zero_student_generalization_is_log_c() {
        let (t, _) = fixture(6, 3, 1, 6);
        let s = init_student(&linear_arch(&[6, 3, 3], Init::Random { scale: 0.0 }), None, RngSeed(0)).unwrap();
        let g = generalization_loss(&s, &t, 100, &Matrix::identity(6, 6), RngSeed(1)).unwrap();
        assert!((g.mean - 3f64.ln()).abs() < 1e-12);
        assert!(g.stderr < 1e-12);
    }

    #[test]
    fn one_step_from_zero_decreases_loss() {
        let (_, d) = fixture(8, 3, 50, 10);
        let arch = linear_arch(&[8, 4, 3], Init::Random { scale: 0.0 });
        // an exactly zero two-layer net has zero gradient; start just off it
        let mut s = init_student(&arch, None, RngSeed(0)).unwrap();
        s.layers[0] = gaussian_matrix(4, 8, 1e-4, RngSeed(1)).unwrap();
        s.layers[1] = gaussian_matrix(3, 4, 1e-4, RngSeed(2)).unwrap();
        let cfg = TrainConfig::new(0.1, 1);
        let before = train_loss(&s, &d).unwrap();
        let after = train_loss(&sgd_step(&s, &d, &cfg).unwrap(), &d).unwrap();
        assert!(after < before);
    }

    #[test]
    fn zero_steps_gives_single_record() {
        let (t, d) = fixture(8, 2, 20, 12);
        let s = init_student(&linear_arch(&[8, 2, 2], Init::default()), None, RngSeed(0)).unwrap();
        let mut cfg = TrainConfig::new(1e-3, 0);
        cfg.n_test = 100;
        let tr = train(&s, &d, &t, &cfg).unwrap();
        assert_eq!(tr.times, vec![0]);
        assert_eq!(tr.final_student, s);
    }

    #[test]
    fn divergence_reported() {
        let (t, d) = fixture(8, 2, 20, 14);
        let arch = linear_arch(&[8, 2, 2], Init::Random { scale: 1.0 });
        let s = init_student(&arch, None, RngSeed(0)).unwrap();
        let mut cfg = TrainConfig::new(1e6, 50);
        cfg.n_test = 10;
        assert!(matches!(train(&s, &d, &t, &cfg), Err(Error::Divergence { .. })));
    }

    #[test]
    fn zero_aux_weight_decouples() {
        let (t, d) = fixture(8, 2, 30, 20);
        let ms = MultitaskStudent::random(&[8, 3], 2, 0.5, Activation::Linear, RngSeed(1)).unwrap();
        let mut cfg = TrainConfig::new(0.05, 40);
        cfg.loss_weights = [1.0, 0.0];
        cfg.record_every = 5;
        let test = TestSet::new(&t, 200, &Matrix::identity(8, 8), RngSeed(3)).unwrap();
        let (ta, _) = train_multitask(&ms, &d, &d, &test, &test, &cfg).unwrap();
        let single = train_with_test(&ms.student_a(), &d, &test, &cfg).unwrap();
        assert_eq!(ta.gen_loss, single.gen_loss);
        assert_eq!(ta.final_student.layers, single.final_student.layers);
    }

    #[test]
    fn multitask_ta_init_starts_aligned() {
        let (t, _) = fixture(8, 3, 1, 30);
        let nt = perturb_teacher(&t, 1.0, RngSeed(31)).unwrap();
        let (t2, _) = fixture(8, 3, 1, 40);
        let nt2 = perturb_teacher(&t2, 1.0, RngSeed(41)).unwrap();
        let ms = MultitaskStudent::training_aligned(&nt.aligned_svd, &nt2.aligned_svd, &[0.1]).unwrap();
        let sa = ms.student_a().composite();
        let expect = nt.aligned_svd.u.columns(0, 1) * nt.aligned_svd.v.columns(0, 1).transpose() * 0.1;
        assert!((sa - expect).amax() < 1e-12);
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::new(0.0, 1).validate().is_err());
        let mut c = TrainConfig::new(1e-3, 10);
        c.record_every = 0;
        assert!(c.validate().is_err());
    }
}
