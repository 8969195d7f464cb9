//! One grid cell and seed: teachers, datasets, students, training and the
//! multitask benefit.

use std::fmt;
use std::str::FromStr;

use mtldyn_core::benefit::{benefit_bounds_general, multitask_benefit, BenefitReport, BoundOptions, GMode, TeacherTerm};
use mtldyn_core::gmatrix::{GCache, GCacheOptions, GFunction, HardLabels};
use mtldyn_core::student::{
    init_student, train_multitask, train_with_test, Init, MultitaskStudent, Student, StudentArch, TestSet, Trajectory,
};
use mtldyn_core::tadynamics::{integrate_rank1, TaTrajectory};
use mtldyn_core::teacher::{make_related_pair, perturb_teacher, sample_dataset, Dataset, LabelSharpness, NoisyTeacher, Teacher};
use mtldyn_core::{Error as CoreError, Matrix, RngSeed};
use serde::{Deserialize, Serialize};

use crate::cache;
use crate::config::{Coordinates, ExperimentConfig, GModeSection, InitSection};
use crate::{HarnessError, Result};

/// Per-run random stream. Depends only on the master seed, the run seed and
/// the tag, so every cell with the same seed shares its task-A teacher and
/// larger datasets extend smaller ones.
pub fn stream(cfg: &ExperimentConfig, seed: u64, tag: &str) -> RngSeed {
    RngSeed(cfg.master_seed).derive_indexed(tag, seed)
}

pub struct Tasks {
    pub teacher_a: Teacher,
    pub teacher_b: Teacher,
    pub noisy_a: NoisyTeacher,
    pub noisy_b: NoisyTeacher,
    pub data_a: Dataset,
    pub data_b: Dataset,
    pub test_a: TestSet,
    pub test_b: TestSet,
}

pub fn build_tasks(cfg: &ExperimentConfig, c: &Coordinates, seed: u64) -> Result<Tasks> {
    let n1 = cfg.teacher.n_features;
    let c_x = Matrix::identity(n1, n1);
    let (teacher_a, teacher_b) =
        make_related_pair(&cfg.spec(c.s_bar_a), &cfg.spec(c.s_bar_b), c.relatedness, stream(cfg, seed, "teachers"))?;
    let sigma = cfg.teacher.noise_sigma;
    let noisy_a = perturb_teacher(&teacher_a, sigma, stream(cfg, seed, "noise-a"))?;
    let noisy_b = perturb_teacher(&teacher_b, sigma, stream(cfg, seed, "noise-b"))?;
    let data_a = sample_dataset(&noisy_a, &teacher_a, c.n_data, &c_x, stream(cfg, seed, "data-a"))?;
    let data_b = sample_dataset(&noisy_b, &teacher_b, c.n_data_aux, &c_x, stream(cfg, seed, "data-b"))?;
    let test_seed = cfg.test_seed();
    let test_a = TestSet::new(&teacher_a, cfg.test.n_test, &c_x, test_seed)?;
    let test_b = TestSet::new(&teacher_b, cfg.test.n_test, &c_x, test_seed)?;
    Ok(Tasks { teacher_a, teacher_b, noisy_a, noisy_b, data_a, data_b, test_a, test_b })
}

fn students(cfg: &ExperimentConfig, tasks: &Tasks, seed: u64) -> Result<(Student, MultitaskStudent)> {
    let t = &cfg.teacher;
    let init_seed = stream(cfg, seed, "init");
    match &cfg.student.init {
        InitSection::TrainingAligned { s0 } => {
            let s0 = vec![*s0; t.rank];
            let arch = StudentArch {
                layer_widths: vec![t.n_features, t.rank, t.n_classes],
                activation: cfg.student.activation,
                init: Init::TrainingAligned { s0: s0.clone() },
            };
            let single = init_student(&arch, Some(&tasks.noisy_a.aligned_svd), init_seed)?;
            let multi = MultitaskStudent::training_aligned(&tasks.noisy_a.aligned_svd, &tasks.noisy_b.aligned_svd, &s0)?;
            Ok((single, multi))
        }
        InitSection::Random { scale } => {
            let mut widths = vec![t.n_features];
            widths.extend(&cfg.student.hidden);
            let multi = MultitaskStudent::random(&widths, t.n_classes, *scale, cfg.student.activation, init_seed)?;
            Ok((multi.student_a(), multi))
        }
    }
}

pub struct PairRun {
    pub single: Trajectory,
    pub multi_a: Trajectory,
    pub multi_b: Trajectory,
    pub report: BenefitReport,
}

/// Train the single-task baseline and the shared-trunk student and compare
/// their task-A generalization minima. Bounds use the weights at those minima.
pub fn run_pair(cfg: &ExperimentConfig, c: &Coordinates, seed: u64) -> Result<PairRun> {
    let tasks = build_tasks(cfg, c, seed)?;
    let (single0, multi0) = students(cfg, &tasks, seed)?;
    let tc = cfg.train_config();
    let single = train_with_test(&single0, &tasks.data_a, &tasks.test_a, &tc)?;
    let (multi_a, multi_b) = train_multitask(&multi0, &tasks.data_a, &tasks.data_b, &tasks.test_a, &tasks.test_b, &tc)?;
    let mut report = multitask_benefit(&single, &multi_a)?;
    if cfg.bounds.enabled {
        let n1 = cfg.teacher.n_features;
        let opts = BoundOptions {
            mode: match cfg.bounds.mode {
                GModeSection::Isotropic => GMode::Isotropic,
                GModeSection::Full => GMode::Full,
            },
            teacher: TeacherTerm::HardLabels,
            n_samples: cfg.bounds.n_samples,
            seed: stream(cfg, seed, "bounds"),
        };
        let b = benefit_bounds_general(
            &multi_a.composites[report.index_multi],
            &single.composites[report.index_single],
            &tasks.teacher_a.w_bar,
            &Matrix::identity(n1, n1),
            &opts,
        )?;
        if let Some((lo, hi)) = b.alternate {
            report.metadata.insert("alternate_bounds".into(), format!("{lo},{hi}"));
        }
        report = report.with_bounds(&b);
    }
    Ok(PairRun { single, multi_a, multi_b, report })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RowStatus {
    Ok,
    Diverged,
    Failed,
}

impl fmt::Display for RowStatus {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            RowStatus::Ok => "ok",
            RowStatus::Diverged => "diverged",
            RowStatus::Failed => "failed",
        })
    }
}

impl FromStr for RowStatus {
    type Err = HarnessError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ok" => Ok(RowStatus::Ok),
            "diverged" => Ok(RowStatus::Diverged),
            "failed" => Ok(RowStatus::Failed),
            other => Err(HarnessError::Validation(format!("unknown row status {other:?}"))),
        }
    }
}

/// One line of the results table. Flagged rows carry no measurements.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    #[serde(flatten)]
    pub coords: Coordinates,
    pub seed: u64,
    pub mt_benefit: Option<f64>,
    pub min_loss_single: Option<f64>,
    pub min_loss_multi: Option<f64>,
    pub argmin_single: Option<usize>,
    pub argmin_multi: Option<usize>,
    pub bound_lower: Option<f64>,
    pub bound_upper: Option<f64>,
    pub loss_stderr: Option<f64>,
    pub status: RowStatus,
}

impl ResultRow {
    pub fn flagged(coords: Coordinates, seed: u64, status: RowStatus) -> Self {
        ResultRow {
            coords,
            seed,
            mt_benefit: None,
            min_loss_single: None,
            min_loss_multi: None,
            argmin_single: None,
            argmin_multi: None,
            bound_lower: None,
            bound_upper: None,
            loss_stderr: None,
            status,
        }
    }

    pub fn from_report(coords: Coordinates, seed: u64, r: &BenefitReport) -> Self {
        ResultRow {
            coords,
            seed,
            mt_benefit: Some(r.mt_benefit),
            min_loss_single: Some(r.min_loss_single),
            min_loss_multi: Some(r.min_loss_multi),
            argmin_single: Some(r.argmin_single),
            argmin_multi: Some(r.argmin_multi),
            bound_lower: r.bound_lower,
            bound_upper: r.bound_upper,
            loss_stderr: Some(r.loss_stderr()),
            status: RowStatus::Ok,
        }
    }
}

/// Never fails: divergence and other run errors come back as flagged rows.
pub fn run_single(cfg: &ExperimentConfig, coords: &Coordinates, seed: u64) -> ResultRow {
    match run_pair(cfg, coords, seed) {
        Ok(run) => ResultRow::from_report(*coords, seed, &run.report),
        Err(HarnessError::Core(CoreError::Divergence { .. })) => ResultRow::flagged(*coords, seed, RowStatus::Diverged),
        Err(_) => ResultRow::flagged(*coords, seed, RowStatus::Failed),
    }
}

/// Task-A single-task student trained alone, as in the overlay protocol.
pub fn train_single_task(cfg: &ExperimentConfig, c: &Coordinates, seed: u64) -> Result<Trajectory> {
    let tasks = build_tasks(cfg, c, seed)?;
    let (single, _) = students(cfg, &tasks, seed)?;
    Ok(train_with_test(&single, &tasks.data_a, &tasks.test_a, &cfg.train_config())?)
}

fn aligned_s0(cfg: &ExperimentConfig) -> Result<f64> {
    match cfg.student.init {
        InitSection::TrainingAligned { s0 } if cfg.teacher.rank == 1 => Ok(s0),
        _ => Err(HarnessError::Config("theory curves need a rank-1 teacher and training-aligned init".into())),
    }
}

/// Frame vectors of the leading aligned mode of a noisy teacher.
pub fn leading_frame(nt: &NoisyTeacher) -> (Vec<f64>, Vec<f64>) {
    let svd = &nt.aligned_svd;
    (svd.u.column(0).iter().copied().collect(), svd.v.column(0).iter().copied().collect())
}

/// Teacher singular value the student is pulled towards: `β ŝ` for soft
/// targets, `ŝ` itself for one-hot labels.
pub fn target_value(nt: &NoisyTeacher) -> f64 {
    match nt.label_sharpness {
        LabelSharpness::Beta(b) => b * nt.aligned_svd.s[0],
        LabelSharpness::ExactArgmax => nt.aligned_svd.s[0],
    }
}

/// `g` along the leading aligned mode of `nt`, tabulated far enough to cover
/// a trajectory starting at `s0`.
pub fn gcache_for(cfg: &ExperimentConfig, nt: &NoisyTeacher, s0: f64, seed: u64) -> Result<GCache> {
    let (u, v) = leading_frame(nt);
    let top = s0.max(target_value(nt));
    let s_max = match nt.label_sharpness {
        LabelSharpness::Beta(_) => 2.0 * top,
        LabelSharpness::ExactArgmax => (2.0 * top).max(20.0),
    };
    let opts = GCacheOptions {
        spacing: cfg.gcache.spacing,
        s_max,
        n_samples: cfg.gcache.n_samples,
        refine_tol: cfg.gcache.refine_tol,
        seed: stream(cfg, seed, "gcache").0,
        ..GCacheOptions::default()
    };
    let n1 = cfg.teacher.n_features;
    cache::load_or_build(&u, &v, &Matrix::identity(n1, n1), &opts)
}

/// Rank-one theory curve for the task-A single-task student, with its
/// generalization loss on the shared test set.
pub fn theory_single_task(cfg: &ExperimentConfig, c: &Coordinates, seed: u64) -> Result<TaTrajectory> {
    let s0 = aligned_s0(cfg)?;
    let tasks = build_tasks(cfg, c, seed)?;
    let nt = &tasks.noisy_a;
    let g = gcache_for(cfg, nt, s0, seed)?;
    let hard = HardLabels(&g);
    let gf: &dyn GFunction = match nt.label_sharpness {
        LabelSharpness::Beta(_) => &g,
        LabelSharpness::ExactArgmax => &hard,
    };
    let mut traj = integrate_rank1(s0, target_value(nt), cfg.train.learning_rate, cfg.train.steps, cfg.train.record_every, gf)?;
    let svd = &nt.aligned_svd;
    traj.attach_gen_loss(&svd.u.columns(0, 1).into_owned(), &svd.v.columns(0, 1).into_owned(), &tasks.test_a)?;
    Ok(traj)
}
