//! Synthetic classification tasks with analytically known posteriors, plus
//! simulated experts.
//!
//! Tasks are isotropic Gaussian mixtures, one component per class, so the
//! class posterior is available in closed form via Bayes' rule. Experts are
//! parameterized by [`ExpertSpec`]; their conditional correctness probability
//! given the true label is also closed-form, which makes the ground-truth
//! probability that an expert is correct at a point `x` computable exactly.
//! Both quantities drive the oracle checks used throughout the crate.

use std::collections::BTreeSet;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rng::{stream_id, stream_rng, StreamDomain};

/// Tolerance for "priors sum to one" and posterior normalization checks.
pub const PRIOR_SUM_TOL: f64 = 1e-12;

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("invalid task config: {0}")]
    InvalidConfig(String),
    #[error("invalid expert spec {index}: {reason}")]
    InvalidExpertSpec { index: usize, reason: String },
    #[error("feature vector has length {got}, task dimension is {want}")]
    DimensionMismatch { got: usize, want: usize },
    #[error("dataset must contain at least one example")]
    EmptyDataset,
    #[error("at least one expert is required")]
    NoExperts,
    #[error("invalid split ratios: {0}")]
    InvalidSplit(String),
}

// ─── Task ────────────────────────────────────────────────────────────────────

/// One mixture component: an isotropic Gaussian for a single class.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ClassComponent {
    pub mean: Vec<f64>,
    /// Isotropic standard deviation (> 0).
    pub std: f64,
    /// Class prior weight.
    pub prior: f64,
}

/// A classification task whose generating distribution is fully known.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct SyntheticTask {
    pub dim: usize,
    pub num_classes: usize,
    /// One component per class, indexed by class label.
    pub mixture: Vec<ClassComponent>,
    pub seed: u64,
}

/// Per-class standard deviations, either shared or listed explicitly.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(untagged)]
pub enum StdSpec {
    Shared(f64),
    PerClass(Vec<f64>),
}

impl Default for StdSpec {
    fn default() -> Self {
        StdSpec::Shared(1.0)
    }
}

/// Parameters for [`generate_task`].
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct TaskConfig {
    pub dim: usize,
    pub num_classes: usize,
    /// Component means, taken verbatim when present; otherwise drawn
    /// uniformly from `[-mean_range, mean_range]^dim`.
    #[serde(default)]
    pub means: Option<Vec<Vec<f64>>>,
    #[serde(default = "default_mean_range")]
    pub mean_range: f64,
    #[serde(default)]
    pub std: StdSpec,
    /// Class priors; uniform when absent.
    #[serde(default)]
    pub priors: Option<Vec<f64>>,
}

fn default_mean_range() -> f64 {
    3.0
}

impl TaskConfig {
    pub fn new(dim: usize, num_classes: usize) -> Self {
        Self {
            dim,
            num_classes,
            means: None,
            mean_range: default_mean_range(),
            std: StdSpec::default(),
            priors: None,
        }
    }
}

/// Build a task from `config`, drawing any unspecified means reproducibly
/// from `seed`.
pub fn generate_task(config: &TaskConfig, seed: u64) -> Result<SyntheticTask, SynthError> {
    let k = config.num_classes;
    let dim = config.dim;
    if k < 2 {
        return Err(SynthError::InvalidConfig(format!(
            "num_classes must be at least 2, got {k}"
        )));
    }
    if dim == 0 {
        return Err(SynthError::InvalidConfig("dim must be at least 1".into()));
    }

    let priors = match &config.priors {
        Some(p) => {
            if p.len() != k {
                return Err(SynthError::InvalidConfig(format!(
                    "priors has length {}, expected {k}",
                    p.len()
                )));
            }
            if p.iter().any(|&w| !w.is_finite() || w < 0.0) {
                return Err(SynthError::InvalidConfig(
                    "priors must be finite and nonnegative".into(),
                ));
            }
            let sum: f64 = p.iter().sum();
            if (sum - 1.0).abs() > PRIOR_SUM_TOL {
                return Err(SynthError::InvalidConfig(format!(
                    "priors must sum to 1 (got {sum})"
                )));
            }
            p.clone()
        }
        None => vec![1.0 / k as f64; k],
    };

    let stds = match &config.std {
        StdSpec::Shared(s) => vec![*s; k],
        StdSpec::PerClass(v) => {
            if v.len() != k {
                return Err(SynthError::InvalidConfig(format!(
                    "std list has length {}, expected {k}",
                    v.len()
                )));
            }
            v.clone()
        }
    };
    if stds.iter().any(|&s| !s.is_finite() || s <= 0.0) {
        return Err(SynthError::InvalidConfig(
            "standard deviations must be positive and finite".into(),
        ));
    }

    let means = match &config.means {
        Some(m) => {
            if m.len() != k {
                return Err(SynthError::InvalidConfig(format!(
                    "means has {} rows, expected {k}",
                    m.len()
                )));
            }
            if m.iter().any(|row| row.len() != dim) {
                return Err(SynthError::InvalidConfig(format!(
                    "every mean must have length {dim}"
                )));
            }
            m.clone()
        }
        None => {
            if !(config.mean_range.is_finite() && config.mean_range > 0.0) {
                return Err(SynthError::InvalidConfig(
                    "mean_range must be positive and finite".into(),
                ));
            }
            (0..k)
                .map(|c| {
                    let mut rng = stream_rng(seed, StreamDomain::TaskGen, c as u64, 0);
                    (0..dim)
                        .map(|_| (rng.random::<f64>() * 2.0 - 1.0) * config.mean_range)
                        .collect()
                })
                .collect()
        }
    };

    let mixture = means
        .into_iter()
        .zip(stds)
        .zip(priors)
        .map(|((mean, std), prior)| ClassComponent { mean, std, prior })
        .collect();

    Ok(SyntheticTask {
        dim,
        num_classes: k,
        mixture,
        seed,
    })
}

impl SyntheticTask {
    /// Exact class posterior at `x` by Bayes' rule on the mixture.
    ///
    /// Computed in log space with a max shift; components are nonnegative and
    /// sum to 1 within [`PRIOR_SUM_TOL`].
    pub fn class_posterior(&self, x: &[f64]) -> Result<Vec<f64>, SynthError> {
        if x.len() != self.dim {
            return Err(SynthError::DimensionMismatch {
                got: x.len(),
                want: self.dim,
            });
        }
        let log_joint: Vec<f64> = self
            .mixture
            .iter()
            .map(|comp| {
                let sq_dist: f64 = x
                    .iter()
                    .zip(&comp.mean)
                    .map(|(xi, mi)| (xi - mi) * (xi - mi))
                    .sum();
                comp.prior.ln()
                    - self.dim as f64 * comp.std.ln()
                    - sq_dist / (2.0 * comp.std * comp.std)
            })
            .collect();
        let max = log_joint.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let unnorm: Vec<f64> = log_joint.iter().map(|&l| (l - max).exp()).collect();
        let total: f64 = unnorm.iter().sum();
        Ok(unnorm.into_iter().map(|u| u / total).collect())
    }
}

/// Standalone form of [`SyntheticTask::class_posterior`].
pub fn true_class_posterior(task: &SyntheticTask, x: &[f64]) -> Result<Vec<f64>, SynthError> {
    task.class_posterior(x)
}

// ─── Experts ─────────────────────────────────────────────────────────────────

/// What an expert does outside its oracle subset.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(tag = "behavior", rename_all = "snake_case")]
pub enum OffSubsetBehavior {
    /// Uniformly random over the K-1 wrong classes.
    AlwaysWrong,
    /// Uniformly random over all K classes (correct with probability 1/K).
    UniformOverAll,
    /// Correct with probability `p`, otherwise uniform over wrong classes.
    CorrectWithProb { p: f64 },
}

/// The behavioral family of a simulated expert.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ExpertKind {
    /// Always correct on `oracle_classes`; `off_subset` elsewhere.
    OracleSubset {
        oracle_classes: BTreeSet<usize>,
        off_subset: OffSubsetBehavior,
    },
    /// Correct with probability `correct_prob[y]`, otherwise uniform over
    /// wrong classes.
    ClasswiseProb { correct_prob: Vec<f64> },
    /// Draws the base expert's prediction, then with probability `flip_prob`
    /// replaces it by a uniformly random *different* class.
    Flip {
        base: Box<ExpertKind>,
        flip_prob: f64,
    },
    /// Uniform over all classes.
    UniformRandom,
}

/// A simulated expert: behavior plus its own draw seed.
///
/// Predictions for expert `e` at example `i` come from the stream keyed by
/// `(dataset seed, e.seed)` at position `i`, so replicated behaviors with
/// distinct seeds make independent draws, and an expert keeps its
/// predictions if the roster around it changes.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ExpertSpec {
    #[serde(flatten)]
    pub kind: ExpertKind,
    pub seed: u64,
}

impl ExpertKind {
    fn validate(&self, num_classes: usize) -> Result<(), String> {
        match self {
            ExpertKind::OracleSubset {
                oracle_classes,
                off_subset,
            } => {
                if let Some(&c) = oracle_classes.iter().find(|&&c| c >= num_classes) {
                    return Err(format!("oracle class {c} outside [0, {num_classes})"));
                }
                if let OffSubsetBehavior::CorrectWithProb { p } = off_subset {
                    if !(0.0..=1.0).contains(p) {
                        return Err(format!("off-subset probability {p} outside [0, 1]"));
                    }
                }
                Ok(())
            }
            ExpertKind::ClasswiseProb { correct_prob } => {
                if correct_prob.len() != num_classes {
                    return Err(format!(
                        "correct_prob has length {}, expected {num_classes}",
                        correct_prob.len()
                    ));
                }
                if correct_prob.iter().any(|p| !(0.0..=1.0).contains(p)) {
                    return Err("correct_prob entries must lie in [0, 1]".into());
                }
                Ok(())
            }
            ExpertKind::Flip { base, flip_prob } => {
                if !(0.0..=1.0).contains(flip_prob) {
                    return Err(format!("flip_prob {flip_prob} outside [0, 1]"));
                }
                base.validate(num_classes)
            }
            ExpertKind::UniformRandom => Ok(()),
        }
    }

    /// P(expert predicts the true label | y = label). Independent of `x` for
    /// every kind in this family.
    pub fn correct_prob_given_label(&self, label: usize, num_classes: usize) -> f64 {
        match self {
            ExpertKind::OracleSubset {
                oracle_classes,
                off_subset,
            } => {
                if oracle_classes.contains(&label) {
                    1.0
                } else {
                    match off_subset {
                        OffSubsetBehavior::AlwaysWrong => 0.0,
                        OffSubsetBehavior::UniformOverAll => 1.0 / num_classes as f64,
                        OffSubsetBehavior::CorrectWithProb { p } => *p,
                    }
                }
            }
            ExpertKind::ClasswiseProb { correct_prob } => correct_prob[label],
            ExpertKind::Flip { base, flip_prob } => {
                // A flip lands back on the truth only from a wrong base draw,
                // uniformly over the K-1 alternatives.
                let p0 = base.correct_prob_given_label(label, num_classes);
                p0 * (1.0 - flip_prob) + (1.0 - p0) * flip_prob / (num_classes - 1) as f64
            }
            ExpertKind::UniformRandom => 1.0 / num_classes as f64,
        }
    }

    /// Draw one prediction for an example with true label `label`.
    pub fn sample(&self, label: usize, num_classes: usize, rng: &mut impl Rng) -> usize {
        match self {
            ExpertKind::OracleSubset {
                oracle_classes,
                off_subset,
            } => {
                if oracle_classes.contains(&label) {
                    label
                } else {
                    match off_subset {
                        OffSubsetBehavior::AlwaysWrong => uniform_other(label, num_classes, rng),
                        OffSubsetBehavior::UniformOverAll => rng.random_range(0..num_classes),
                        OffSubsetBehavior::CorrectWithProb { p } => {
                            if rng.random::<f64>() < *p {
                                label
                            } else {
                                uniform_other(label, num_classes, rng)
                            }
                        }
                    }
                }
            }
            ExpertKind::ClasswiseProb { correct_prob } => {
                if rng.random::<f64>() < correct_prob[label] {
                    label
                } else {
                    uniform_other(label, num_classes, rng)
                }
            }
            ExpertKind::Flip { base, flip_prob } => {
                let m = base.sample(label, num_classes, rng);
                if rng.random::<f64>() < *flip_prob {
                    uniform_other(m, num_classes, rng)
                } else {
                    m
                }
            }
            ExpertKind::UniformRandom => rng.random_range(0..num_classes),
        }
    }
}

/// Uniform draw over the `num_classes - 1` classes different from `avoid`.
fn uniform_other(avoid: usize, num_classes: usize, rng: &mut impl Rng) -> usize {
    let r = rng.random_range(0..num_classes - 1);
    if r >= avoid {
        r + 1
    } else {
        r
    }
}

impl ExpertSpec {
    pub fn new(kind: ExpertKind, seed: u64) -> Self {
        Self { kind, seed }
    }

    pub fn validate(&self, num_classes: usize) -> Result<(), String> {
        self.kind.validate(num_classes)
    }
}

/// Ground-truth P(expert correct | x): the posterior-weighted conditional
/// correctness, `sum_c eta_c(x) * P(m = c | y = c)`.
pub fn marginal_expert_correctness(
    task: &SyntheticTask,
    spec: &ExpertSpec,
    x: &[f64],
) -> Result<f64, SynthError> {
    let k = task.num_classes;
    let probs: Vec<f64> = (0..k)
        .map(|c| spec.kind.correct_prob_given_label(c, k))
        .collect();
    // Constant conditional correctness is independent of the posterior; the
    // exact value (1/K for uniform experts, 1 for everywhere-oracles) must
    // not pick up posterior normalization noise.
    if probs.windows(2).all(|w| w[0] == w[1]) {
        if x.len() != task.dim {
            return Err(SynthError::DimensionMismatch {
                got: x.len(),
                want: task.dim,
            });
        }
        return Ok(probs[0]);
    }
    let posterior = task.class_posterior(x)?;
    let value: f64 = posterior.iter().zip(&probs).map(|(eta, p)| eta * p).sum();
    Ok(value.clamp(0.0, 1.0))
}

// ─── Datasets ────────────────────────────────────────────────────────────────

/// One example: features, true label, and each expert's recorded prediction.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct LabeledExample {
    pub features: Vec<f64>,
    pub label: usize,
    pub expert_preds: Vec<usize>,
}

/// Which portion of an experiment a dataset belongs to.
#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq, Eq)]
#[serde(rename_all = "kebab-case")]
pub enum SplitTag {
    /// A freshly sampled, not-yet-partitioned pool.
    Full,
    Train,
    Val,
    Test,
    ConformalTune,
    ConformalCal,
}

impl SplitTag {
    pub fn as_str(&self) -> &'static str {
        match self {
            SplitTag::Full => "full",
            SplitTag::Train => "train",
            SplitTag::Val => "val",
            SplitTag::Test => "test",
            SplitTag::ConformalTune => "conformal-tune",
            SplitTag::ConformalCal => "conformal-cal",
        }
    }
}

/// A sampled dataset together with the task that generated it.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct Dataset {
    pub task: SyntheticTask,
    pub expert_specs: Vec<ExpertSpec>,
    pub examples: Vec<LabeledExample>,
    pub split: SplitTag,
    /// Seed the examples were drawn with.
    pub sample_seed: u64,
}

impl Dataset {
    pub fn num_experts(&self) -> usize {
        self.expert_specs.len()
    }

    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    /// Correctness flags `m_j == y` for one example.
    pub fn correctness_flags(example: &LabeledExample) -> Vec<bool> {
        example
            .expert_preds
            .iter()
            .map(|&m| m == example.label)
            .collect()
    }

    /// Restrict every example to the first `j` experts (roster prefix).
    pub fn with_expert_prefix(&self, j: usize) -> Dataset {
        assert!(j >= 1 && j <= self.num_experts(), "prefix out of range");
        Dataset {
            task: self.task.clone(),
            expert_specs: self.expert_specs[..j].to_vec(),
            examples: self
                .examples
                .iter()
                .map(|ex| LabeledExample {
                    features: ex.features.clone(),
                    label: ex.label,
                    expert_preds: ex.expert_preds[..j].to_vec(),
                })
                .collect(),
            split: self.split,
            sample_seed: self.sample_seed,
        }
    }
}

/// Stream for expert `spec_seed`'s draws, keyed jointly with the dataset seed.
fn expert_rng(dataset_seed: u64, spec_seed: u64, example: u64) -> ChaCha12Rng {
    let mut key = [0u8; 32];
    key[..8].copy_from_slice(&dataset_seed.to_le_bytes());
    key[8..16].copy_from_slice(&spec_seed.to_le_bytes());
    key[16..24].copy_from_slice(b"l2d-xprt");
    let mut rng = ChaCha12Rng::from_seed(key);
    rng.set_stream(stream_id(StreamDomain::Expert, 0, example));
    rng
}

/// Draw `n` labeled examples with expert annotations.
///
/// Labels come from the class priors, features from the class-conditional
/// Gaussian, and each expert's prediction from its own per-example stream.
/// Bit-reproducible for fixed `(task, specs, n, seed)`.
pub fn sample_dataset(
    task: &SyntheticTask,
    expert_specs: &[ExpertSpec],
    n: usize,
    seed: u64,
) -> Result<Dataset, SynthError> {
    if n == 0 {
        return Err(SynthError::EmptyDataset);
    }
    if expert_specs.is_empty() {
        return Err(SynthError::NoExperts);
    }
    for (index, spec) in expert_specs.iter().enumerate() {
        spec.validate(task.num_classes)
            .map_err(|reason| SynthError::InvalidExpertSpec { index, reason })?;
    }

    let mut examples = Vec::with_capacity(n);
    for i in 0..n {
        let label = {
            let mut rng = stream_rng(seed, StreamDomain::Label, 0, i as u64);
            let u = rng.random::<f64>();
            let mut acc = 0.0;
            let mut chosen = task.num_classes - 1;
            for (c, comp) in task.mixture.iter().enumerate() {
                acc += comp.prior;
                if u < acc {
                    chosen = c;
                    break;
                }
            }
            chosen
        };
        let features = {
            let comp = &task.mixture[label];
            let mut rng = stream_rng(seed, StreamDomain::Feature, 0, i as u64);
            (0..task.dim)
                .map(|d| {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    comp.mean[d] + comp.std * z
                })
                .collect()
        };
        let expert_preds = expert_specs
            .iter()
            .map(|spec| {
                let mut rng = expert_rng(seed, spec.seed, i as u64);
                spec.kind.sample(label, task.num_classes, &mut rng)
            })
            .collect();
        examples.push(LabeledExample {
            features,
            label,
            expert_preds,
        });
    }

    Ok(Dataset {
        task: task.clone(),
        expert_specs: expert_specs.to_vec(),
        examples,
        split: SplitTag::Full,
        sample_seed: seed,
    })
}

/// Partition a dataset into train/val/test by contiguous ranges.
///
/// Examples are already i.i.d. in sampling order, so range splits are valid
/// and deterministic. Ratios must be positive and sum to 1 within 1e-9.
pub fn split_train_val_test(
    data: &Dataset,
    ratios: (f64, f64, f64),
) -> Result<(Dataset, Dataset, Dataset), SynthError> {
    let (a, b, c) = ratios;
    if !(a > 0.0 && b > 0.0 && c > 0.0) || ((a + b + c) - 1.0).abs() > 1e-9 {
        return Err(SynthError::InvalidSplit(format!(
            "ratios ({a}, {b}, {c}) must be positive and sum to 1"
        )));
    }
    let n = data.len();
    let n_train = ((n as f64) * a).floor() as usize;
    let n_val = ((n as f64) * b).floor() as usize;
    if n_train == 0 || n_val == 0 || n_train + n_val >= n {
        return Err(SynthError::InvalidSplit(format!(
            "dataset of {n} examples is too small for ratios ({a}, {b}, {c})"
        )));
    }
    let mk = |range: std::ops::Range<usize>, split: SplitTag| Dataset {
        task: data.task.clone(),
        expert_specs: data.expert_specs.clone(),
        examples: data.examples[range].to_vec(),
        split,
        sample_seed: data.sample_seed,
    };
    Ok((
        mk(0..n_train, SplitTag::Train),
        mk(n_train..n_train + n_val, SplitTag::Val),
        mk(n_train + n_val..n, SplitTag::Test),
    ))
}

/// Split a pool in half into conformal tune/cal portions (odd count: the
/// extra example goes to the tune half).
pub fn split_conformal_pool(data: &Dataset) -> (Dataset, Dataset) {
    let n = data.len();
    let n_tune = n - n / 2;
    let mk = |range: std::ops::Range<usize>, split: SplitTag| Dataset {
        task: data.task.clone(),
        expert_specs: data.expert_specs.clone(),
        examples: data.examples[range].to_vec(),
        split,
        sample_seed: data.sample_seed,
    };
    (
        mk(0..n_tune, SplitTag::ConformalTune),
        mk(n_tune..n, SplitTag::ConformalCal),
    )
}
