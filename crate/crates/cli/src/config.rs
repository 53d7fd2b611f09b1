//! Experiment configuration: a strict JSON schema with field-path
//! diagnostics.
//!
//! Unknown keys are rejected where the schema is closed, and semantic
//! violations name the offending field (`conformal.alpha`, `seeds`, ...).

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use l2d_core::conformal::DEFAULT_BETA_GRID;
use l2d_core::deferral::EstimatorKind;
use l2d_core::synth::{generate_task, ExpertSpec, StdSpec, SyntheticTask, TaskConfig};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("config parse error at `{path}`: {message}")]
    Parse { path: String, message: String },
    #[error("invalid config: `{field}` {reason}")]
    Invalid { field: String, reason: String },
}

fn invalid(field: &str, reason: impl Into<String>) -> ConfigError {
    ConfigError::Invalid {
        field: field.into(),
        reason: reason.into(),
    }
}

/// Which replication an [`ExperimentConfig`] drives.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ExperimentKind {
    /// Train on one roster, report accuracy/calibration once.
    TrainEval,
    /// Grow the expert pool and track system accuracy and average ECE.
    IncreasingExperts,
    /// One random expert next to improving experts; track ECE propagation.
    ExpertDependence,
    /// Count recovery: conformal set sizes against the number of oracles.
    OracleIdentification,
    /// Conformal ensembles against fixed-size and single-expert deferral.
    ConformalEnsemble,
    /// Per-class oracles with growing off-specialty overlap.
    OverlapSweep,
}

impl ExperimentKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            ExperimentKind::TrainEval => "train-eval",
            ExperimentKind::IncreasingExperts => "increasing-experts",
            ExperimentKind::ExpertDependence => "expert-dependence",
            ExperimentKind::OracleIdentification => "oracle-identification",
            ExperimentKind::ConformalEnsemble => "conformal-ensemble",
            ExperimentKind::OverlapSweep => "overlap-sweep",
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct TaskSection {
    pub dim: usize,
    pub num_classes: usize,
    #[serde(default)]
    pub means: Option<Vec<Vec<f64>>>,
    #[serde(default = "default_mean_range")]
    pub mean_range: f64,
    #[serde(default)]
    pub std: StdSpec,
    #[serde(default)]
    pub priors: Option<Vec<f64>>,
    /// Seed for drawing any unspecified means; the task is fixed across run
    /// seeds.
    #[serde(default)]
    pub seed: u64,
}

fn default_mean_range() -> f64 {
    3.0
}

impl TaskSection {
    pub fn to_task_config(&self) -> TaskConfig {
        TaskConfig {
            dim: self.dim,
            num_classes: self.num_classes,
            means: self.means.clone(),
            mean_range: self.mean_range,
            std: self.std.clone(),
            priors: self.priors.clone(),
        }
    }

    pub fn build(&self) -> Result<SyntheticTask, ConfigError> {
        generate_task(&self.to_task_config(), self.seed).map_err(|e| invalid("task", e.to_string()))
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct DataSection {
    pub n_train: usize,
    pub n_val: usize,
    pub n_test: usize,
    /// Extra held-out sample used to evaluate fitted conformal procedures.
    #[serde(default = "default_n_eval")]
    pub n_eval: usize,
}

fn default_n_eval() -> usize {
    2000
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct TrainSection {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    #[serde(default = "default_momentum")]
    pub momentum: f64,
    #[serde(default = "default_hidden")]
    pub hidden_sizes: Vec<usize>,
    #[serde(default = "default_true")]
    pub shuffle: bool,
}

fn default_momentum() -> f64 {
    0.9
}

fn default_hidden() -> Vec<usize> {
    vec![64]
}

fn default_true() -> bool {
    true
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StatisticKind {
    Naive,
    Regularized,
}

impl StatisticKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            StatisticKind::Naive => "naive",
            StatisticKind::Regularized => "regularized",
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct ConformalSection {
    #[serde(default = "default_alpha")]
    pub alpha: f64,
    #[serde(default = "default_statistics")]
    pub statistics: Vec<StatisticKind>,
    #[serde(default = "default_beta_grid")]
    pub beta_grid: Vec<f64>,
}

fn default_alpha() -> f64 {
    0.1
}

fn default_statistics() -> Vec<StatisticKind> {
    vec![StatisticKind::Naive, StatisticKind::Regularized]
}

fn default_beta_grid() -> Vec<f64> {
    DEFAULT_BETA_GRID.to_vec()
}

impl Default for ConformalSection {
    fn default() -> Self {
        Self {
            alpha: default_alpha(),
            statistics: default_statistics(),
            beta_grid: default_beta_grid(),
        }
    }
}

/// Sweep parameters; which fields are required depends on the experiment
/// kind.
#[derive(Debug, Clone, Default, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct SweepSection {
    /// increasing-experts: pool sizes to train, drawn as roster prefixes.
    #[serde(default)]
    pub expert_counts: Option<Vec<usize>>,
    /// expert-dependence: correctness probabilities for the improving
    /// experts.
    #[serde(default)]
    pub correctness_probs: Option<Vec<f64>>,
    /// expert-dependence: the improving experts are skilled on this many
    /// leading classes (uniform elsewhere).
    #[serde(default)]
    pub expertise_classes: Option<usize>,
    /// expert-dependence: how many improving experts accompany the random
    /// one.
    #[serde(default)]
    pub num_support_experts: Option<usize>,
    /// oracle-identification / conformal-ensemble: numbers of full oracles.
    #[serde(default)]
    pub oracle_counts: Option<Vec<usize>>,
    /// oracle-identification / conformal-ensemble: total expert count.
    #[serde(default)]
    pub num_experts: Option<usize>,
    /// Whether non-oracle experts guess uniformly instead of being always
    /// wrong.
    #[serde(default)]
    pub with_noise: Option<bool>,
    /// conformal-ensemble: size of the fixed-ensemble baseline.
    #[serde(default)]
    pub fixed_k: Option<usize>,
    /// overlap-sweep: off-specialty correctness probabilities.
    #[serde(default)]
    pub overlap_probs: Option<Vec<f64>>,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub experiment: ExperimentKind,
    pub task: TaskSection,
    /// Explicit expert roster; required by train-eval and
    /// increasing-experts, built programmatically by the sweep experiments.
    #[serde(default)]
    pub experts: Vec<ExpertSpec>,
    pub data: DataSection,
    pub train: TrainSection,
    #[serde(default = "default_estimators")]
    pub estimators: Vec<EstimatorKind>,
    #[serde(default)]
    pub conformal: ConformalSection,
    #[serde(default)]
    pub sweep: SweepSection,
    pub seeds: Vec<u64>,
    #[serde(default)]
    pub out_dir: Option<PathBuf>,
}

fn default_estimators() -> Vec<EstimatorKind> {
    vec![EstimatorKind::Softmax, EstimatorKind::Ova]
}

/// Read, parse, and validate a config file.
pub fn parse_config(path: &Path) -> Result<ExperimentConfig, ConfigError> {
    let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    parse_config_str(&text)
}

/// Parse and validate config JSON.
pub fn parse_config_str(text: &str) -> Result<ExperimentConfig, ConfigError> {
    let mut de = serde_json::Deserializer::from_str(text);
    let config: ExperimentConfig =
        serde_path_to_error::deserialize(&mut de).map_err(|e| ConfigError::Parse {
            path: e.path().to_string(),
            message: e.inner().to_string(),
        })?;
    config.validate()?;
    Ok(config)
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.seeds.is_empty() {
            return Err(invalid("seeds", "must list at least one seed"));
        }
        self.task.build()?;
        let k = self.task.num_classes;

        for (i, spec) in self.experts.iter().enumerate() {
            spec.validate(k)
                .map_err(|reason| invalid(&format!("experts[{i}]"), reason))?;
        }
        {
            let mut seeds: Vec<u64> = self.experts.iter().map(|s| s.seed).collect();
            seeds.sort_unstable();
            seeds.dedup();
            if seeds.len() != self.experts.len() {
                return Err(invalid(
                    "experts",
                    "expert seeds must be distinct (duplicated seeds make identical draws)",
                ));
            }
        }

        if self.data.n_train == 0 || self.data.n_val == 0 || self.data.n_test == 0 {
            return Err(invalid("data", "n_train, n_val, n_test must all be >= 1"));
        }

        if self.train.epochs == 0 {
            return Err(invalid("train.epochs", "must be >= 1"));
        }
        if self.train.batch_size == 0 {
            return Err(invalid("train.batch_size", "must be >= 1"));
        }
        if !(self.train.learning_rate.is_finite() && self.train.learning_rate > 0.0) {
            return Err(invalid(
                "train.learning_rate",
                "must be positive and finite",
            ));
        }
        if !(0.0..1.0).contains(&self.train.momentum) {
            return Err(invalid("train.momentum", "must lie in [0, 1)"));
        }
        if self.train.hidden_sizes.contains(&0) {
            return Err(invalid("train.hidden_sizes", "layer widths must be >= 1"));
        }

        if self.estimators.is_empty() {
            return Err(invalid("estimators", "must list at least one estimator"));
        }

        if !(self.conformal.alpha > 0.0 && self.conformal.alpha < 1.0) {
            return Err(invalid(
                "conformal.alpha",
                format!("must lie in (0, 1), got {}", self.conformal.alpha),
            ));
        }
        if self.conformal.beta_grid.is_empty()
            || self
                .conformal
                .beta_grid
                .iter()
                .any(|b| !b.is_finite() || *b < 0.0)
        {
            return Err(invalid(
                "conformal.beta_grid",
                "must be nonempty with finite nonnegative entries",
            ));
        }
        if self.conformal.statistics.is_empty() {
            return Err(invalid(
                "conformal.statistics",
                "must list at least one statistic",
            ));
        }

        match self.experiment {
            ExperimentKind::TrainEval => {
                if self.experts.is_empty() {
                    return Err(invalid("experts", "train-eval requires an expert roster"));
                }
            }
            ExperimentKind::IncreasingExperts => {
                if self.experts.is_empty() {
                    return Err(invalid(
                        "experts",
                        "increasing-experts requires the full expert roster",
                    ));
                }
                let counts = self
                    .sweep
                    .expert_counts
                    .as_ref()
                    .ok_or_else(|| invalid("sweep.expert_counts", "required"))?;
                if counts.is_empty() {
                    return Err(invalid("sweep.expert_counts", "must be nonempty"));
                }
                if counts.iter().any(|&c| c == 0 || c > self.experts.len()) {
                    return Err(invalid(
                        "sweep.expert_counts",
                        format!("entries must lie in [1, {}]", self.experts.len()),
                    ));
                }
                if counts.windows(2).any(|w| w[1] <= w[0]) {
                    return Err(invalid(
                        "sweep.expert_counts",
                        "must be strictly increasing",
                    ));
                }
            }
            ExperimentKind::ExpertDependence => {
                let probs = self
                    .sweep
                    .correctness_probs
                    .as_ref()
                    .ok_or_else(|| invalid("sweep.correctness_probs", "required"))?;
                if probs.is_empty() || probs.iter().any(|p| !(0.0..=1.0).contains(p)) {
                    return Err(invalid(
                        "sweep.correctness_probs",
                        "must be nonempty probabilities in [0, 1]",
                    ));
                }
                let expertise = self.sweep.expertise_classes.unwrap_or(k.div_ceil(2));
                if expertise == 0 || expertise > k {
                    return Err(invalid(
                        "sweep.expertise_classes",
                        format!("must lie in [1, {k}]"),
                    ));
                }
            }
            ExperimentKind::OracleIdentification | ExperimentKind::ConformalEnsemble => {
                let j = self.sweep.num_experts.unwrap_or(10);
                if j == 0 {
                    return Err(invalid("sweep.num_experts", "must be >= 1"));
                }
                let counts = self
                    .sweep
                    .oracle_counts
                    .as_ref()
                    .ok_or_else(|| invalid("sweep.oracle_counts", "required"))?;
                if counts.is_empty() || counts.iter().any(|&c| c == 0 || c > j) {
                    return Err(invalid(
                        "sweep.oracle_counts",
                        format!("entries must lie in [1, {j}]"),
                    ));
                }
                if self.experiment == ExperimentKind::ConformalEnsemble {
                    let fixed_k = self.sweep.fixed_k.unwrap_or(5);
                    if fixed_k == 0 || fixed_k > j {
                        return Err(invalid("sweep.fixed_k", format!("must lie in [1, {j}]")));
                    }
                }
            }
            ExperimentKind::OverlapSweep => {
                let probs = self
                    .sweep
                    .overlap_probs
                    .as_ref()
                    .ok_or_else(|| invalid("sweep.overlap_probs", "required"))?;
                if probs.is_empty() || probs.iter().any(|p| !(0.0..=1.0).contains(p)) {
                    return Err(invalid(
                        "sweep.overlap_probs",
                        "must be nonempty probabilities in [0, 1]",
                    ));
                }
                if self.task.num_classes < 2 {
                    return Err(invalid(
                        "task.num_classes",
                        "overlap-sweep needs >= 2 classes",
                    ));
                }
            }
        }
        Ok(())
    }
}
