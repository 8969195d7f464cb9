//! Experiment configuration, read from TOML.

use std::path::Path;

use mtldyn_core::student::{Activation, TrainConfig};
use mtldyn_core::teacher::{LabelSharpness, TeacherSpec};
use mtldyn_core::RngSeed;
use serde::{Deserialize, Serialize};

use crate::HarnessError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default = "default_name")]
    pub name: String,
    pub master_seed: u64,
    pub seeds: Vec<u64>,
    pub teacher: TeacherSection,
    pub grid: Grid,
    pub student: StudentSection,
    pub train: TrainSection,
    #[serde(default)]
    pub test: TestSection,
    #[serde(default)]
    pub bounds: BoundsSection,
    #[serde(default)]
    pub gcache: GCacheSection,
    #[serde(default)]
    pub output: OutputSection,
}

fn default_name() -> String {
    "experiment".into()
}

/// Teacher settings shared by both tasks; singular values come from the grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TeacherSection {
    pub n_features: usize,
    pub n_classes: usize,
    pub rank: usize,
    pub noise_sigma: f64,
    #[serde(default)]
    pub label_sharpness: LabelSharpness,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Grid {
    pub relatedness: Vec<f64>,
    pub s_bar_a: Vec<f64>,
    pub s_bar_b: Vec<f64>,
    pub n_data: Vec<usize>,
    /// Auxiliary-task sizes. When absent the auxiliary task gets as many
    /// points as the main task in every cell.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub n_data_aux: Option<Vec<usize>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum InitSection {
    TrainingAligned { s0: f64 },
    Random { scale: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StudentSection {
    /// Hidden widths of random-init students. Aligned students use one
    /// hidden layer per task of width `rank`.
    #[serde(default)]
    pub hidden: Vec<usize>,
    #[serde(default)]
    pub activation: Activation,
    pub init: InitSection,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSection {
    pub learning_rate: f64,
    pub steps: usize,
    #[serde(default = "default_record_every")]
    pub record_every: usize,
    #[serde(default = "default_loss_weights")]
    pub loss_weights: [f64; 2],
}

fn default_record_every() -> usize {
    10
}

fn default_loss_weights() -> [f64; 2] {
    [1.0, 1.0]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TestSection {
    pub n_test: usize,
    /// Fixed for the whole sweep; derived from the master seed when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
}

impl Default for TestSection {
    fn default() -> Self {
        TestSection { n_test: 10_000, seed: None }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum GModeSection {
    #[default]
    Isotropic,
    Full,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BoundsSection {
    pub enabled: bool,
    pub mode: GModeSection,
    pub n_samples: usize,
}

impl Default for BoundsSection {
    fn default() -> Self {
        BoundsSection { enabled: true, mode: GModeSection::Isotropic, n_samples: 200_000 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GCacheSection {
    pub n_samples: usize,
    pub spacing: f64,
    pub refine_tol: f64,
}

impl Default for GCacheSection {
    fn default() -> Self {
        GCacheSection { n_samples: 200_000, spacing: 0.05, refine_tol: 0.02 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct OutputSection {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dir: Option<String>,
}

/// One point of the sweep grid.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Coordinates {
    pub relatedness: f64,
    pub s_bar_a: f64,
    pub s_bar_b: f64,
    pub n_data: usize,
    pub n_data_aux: usize,
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self, HarnessError> {
        let cfg: ExperimentConfig = toml::from_str(text).map_err(|e| HarnessError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, HarnessError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| HarnessError::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config is always serializable")
    }

    pub fn validate(&self) -> Result<(), HarnessError> {
        let bad = |m: &str| Err(HarnessError::Config(m.to_string()));
        let g = &self.grid;
        if g.relatedness.is_empty() || g.s_bar_a.is_empty() || g.s_bar_b.is_empty() || g.n_data.is_empty() {
            return bad("every grid must be non-empty");
        }
        if matches!(&g.n_data_aux, Some(v) if v.is_empty()) {
            return bad("n_data_aux must be non-empty when given");
        }
        if g.relatedness.iter().any(|r| !(0.0..=1.0).contains(r)) {
            return bad("relatedness values must lie in [0, 1]");
        }
        if self.seeds.is_empty() {
            return bad("at least one seed is required");
        }
        let mut sorted = self.seeds.clone();
        sorted.sort_unstable();
        sorted.dedup();
        if sorted.len() != self.seeds.len() {
            return bad("seeds must be distinct");
        }
        if self.test.n_test == 0 {
            return bad("n_test must be >= 1");
        }
        for &s in g.s_bar_a.iter().chain(&g.s_bar_b) {
            self.spec(s).validate().map_err(|e| HarnessError::Config(e.to_string()))?;
        }
        self.train_config().validate().map_err(|e| HarnessError::Config(e.to_string()))?;
        match &self.student.init {
            InitSection::Random { scale } if !(*scale >= 0.0) => return bad("init scale must be >= 0"),
            InitSection::Random { .. } if self.student.hidden.is_empty() => {
                return bad("random-init students need at least one hidden width")
            }
            InitSection::TrainingAligned { s0 } if !(*s0 > 0.0) => return bad("s0 must be > 0"),
            InitSection::TrainingAligned { .. } if self.student.activation != Activation::Linear => {
                return bad("training-aligned students must be linear")
            }
            _ => {}
        }
        if self.bounds.enabled && self.bounds.n_samples < 2 {
            return bad("bounds need n_samples >= 2");
        }
        if self.gcache.n_samples == 0 || !(self.gcache.spacing > 0.0) {
            return bad("g-cache needs positive n_samples and spacing");
        }
        Ok(())
    }

    /// Teacher spec with all singular values equal to `s_bar`.
    pub fn spec(&self, s_bar: f64) -> TeacherSpec {
        let t = &self.teacher;
        TeacherSpec::uniform(t.n_features, t.n_classes, t.rank, s_bar, t.noise_sigma).with_sharpness(t.label_sharpness)
    }

    pub fn train_config(&self) -> TrainConfig {
        let mut c = TrainConfig::new(self.train.learning_rate, self.train.steps);
        c.record_every = self.train.record_every;
        c.loss_weights = self.train.loss_weights;
        c.n_test = self.test.n_test;
        c.test_seed = self.test_seed().0;
        c
    }

    pub fn test_seed(&self) -> RngSeed {
        self.test.seed.map(RngSeed).unwrap_or_else(|| RngSeed(self.master_seed).derive("test-set"))
    }

    /// Grid product in canonical order.
    pub fn cells(&self) -> Vec<Coordinates> {
        let g = &self.grid;
        let mut out = Vec::new();
        for &relatedness in &g.relatedness {
            for &s_bar_a in &g.s_bar_a {
                for &s_bar_b in &g.s_bar_b {
                    for &n_data in &g.n_data {
                        let aux: Vec<usize> = g.n_data_aux.clone().unwrap_or_else(|| vec![n_data]);
                        for n_data_aux in aux {
                            out.push(Coordinates { relatedness, s_bar_a, s_bar_b, n_data, n_data_aux });
                        }
                    }
                }
            }
        }
        out
    }
}

#[cfg(test)]
pub(crate) mod tests_support {
    pub(crate) const SAMPLE: &str = r#"
name = "slice"
master_seed = 7
seeds = [0, 1]

[teacher]
n_features = 16
n_classes = 2
rank = 1
noise_sigma = 1.0

[grid]
relatedness = [0.0, 0.8]
s_bar_a = [3.0]
s_bar_b = [10.0]
n_data = [50]

[student]
init = { kind = "training-aligned", s0 = 0.1 }

[train]
learning_rate = 0.01
steps = 20
"#;
}
