//! Conformal ensembles of experts.
//!
//! Given per-expert correctness scores `s_j(x)`, two procedures build expert
//! sets with marginal coverage of a correct expert at level `1 - alpha`:
//!
//! - **Naive**: the non-conformity statistic sums scores in descending order
//!   down to the lowest-scoring *correct* expert; calibration takes the
//!   finite-sample-corrected `1 - alpha` quantile, and prediction adds
//!   experts until the running sum passes it.
//! - **Regularized**: sets `{j : s_j + beta * (s_j - k_reg) > 1 - lambda}`,
//!   with `k_reg` chosen so that correct-expert scores fall below it with
//!   probability at most `alpha`, `beta` grid-searched for set size, and
//!   `lambda` picked by conformal risk control of the miss rate.
//!
//! Tuning (`k_reg`, `beta`) and calibration (`lambda` or the quantile) use
//! two disjoint halves of the deferred pool.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::deferral::{expert_confidence, EstimatorKind};
use crate::model::{MlpModel, ModelError};
use crate::synth::{marginal_expert_correctness, Dataset, SynthError};

/// Step of the lambda grid scanned by [`calibrate_lambda`].
pub const LAMBDA_GRID_STEP: f64 = 1e-3;

/// Default beta grid for [`tune_beta`].
pub const DEFAULT_BETA_GRID: [f64; 6] = [0.0, 0.001, 0.01, 0.1, 0.5, 1.0];

#[derive(Debug, Error)]
pub enum ConformalError {
    #[error("alpha must lie in (0, 1), got {0}")]
    InvalidAlpha(f64),
    #[error("no usable calibration examples")]
    EmptyCalibration,
    #[error("no correct-expert scores to pool")]
    EmptyCorrectPool,
    #[error("beta grid must be nonempty with finite nonnegative entries")]
    InvalidBetaGrid,
    #[error("calibration kind is {got}, operation requires {want}")]
    WrongKind {
        got: &'static str,
        want: &'static str,
    },
    #[error("sets ({sets}) and examples ({examples}) lengths differ")]
    MismatchedLengths { sets: usize, examples: usize },
    #[error("nothing to evaluate")]
    EmptyEvaluation,
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Synth(#[from] SynthError),
}

/// One test-time observation: scores, per-expert correctness, and (when the
/// generating process is known) the identity of the most reliable expert.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ScoredExample {
    pub scores: Vec<f64>,
    pub correct: Vec<bool>,
    pub true_best: Option<usize>,
}

/// Fitted conformal state, serializable as
/// `{kind, alpha, qhat | (k_reg, beta, lambda_hat), n_cal}`. An infinite
/// quantile (tiny calibration sets) serializes as the string `"inf"`.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ConformalCalibration {
    Naive {
        alpha: f64,
        #[serde(with = "qhat_serde")]
        qhat: f64,
        n_cal: usize,
    },
    Regularized {
        alpha: f64,
        k_reg: f64,
        beta: f64,
        lambda_hat: f64,
        n_cal: usize,
    },
}

impl ConformalCalibration {
    pub fn kind_str(&self) -> &'static str {
        match self {
            ConformalCalibration::Naive { .. } => "naive",
            ConformalCalibration::Regularized { .. } => "regularized",
        }
    }

    pub fn alpha(&self) -> f64 {
        match self {
            ConformalCalibration::Naive { alpha, .. } => *alpha,
            ConformalCalibration::Regularized { alpha, .. } => *alpha,
        }
    }
}

mod qhat_serde {
    use serde::{Deserialize, Deserializer, Serializer};

    #[derive(serde::Serialize, serde::Deserialize)]
    #[serde(untagged)]
    enum Repr {
        Finite(f64),
        Tag(String),
    }

    pub fn serialize<S: Serializer>(value: &f64, ser: S) -> Result<S::Ok, S::Error> {
        if value.is_finite() {
            ser.serialize_f64(*value)
        } else {
            ser.serialize_str("inf")
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(de: D) -> Result<f64, D::Error> {
        match Repr::deserialize(de)? {
            Repr::Finite(v) => Ok(v),
            Repr::Tag(s) if s == "inf" => Ok(f64::INFINITY),
            Repr::Tag(s) => Err(serde::de::Error::custom(format!(
                "expected a number or \"inf\", got {s:?}"
            ))),
        }
    }
}

fn check_alpha(alpha: f64) -> Result<(), ConformalError> {
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(ConformalError::InvalidAlpha(alpha));
    }
    Ok(())
}

/// Expert indices sorted by score descending, ties toward the lower index.
fn descending_order(scores: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    order
}

// ─── Naive statistic ─────────────────────────────────────────────────────────

/// Cumulative-score non-conformity statistic: walk scores in descending
/// order, summing, and stop at the lowest-scoring correct expert. `None`
/// when no expert is correct (the statistic is undefined there; such
/// examples are excluded from calibration).
pub fn naive_statistic(ex: &ScoredExample) -> Option<f64> {
    let mut remaining = ex.correct.iter().filter(|&&c| c).count();
    if remaining == 0 {
        return None;
    }
    let mut sum = 0.0;
    for &i in &descending_order(&ex.scores) {
        sum += ex.scores[i];
        if ex.correct[i] {
            remaining -= 1;
            if remaining == 0 {
                break;
            }
        }
    }
    Some(sum)
}

/// Finite-sample-corrected quantile calibration of the naive statistic:
/// `qhat` is the `ceil((n+1)(1-alpha))`-th smallest statistic among the `n`
/// usable examples, or infinity when that rank exceeds `n`.
pub fn calibrate_naive(
    cal: &[ScoredExample],
    alpha: f64,
) -> Result<ConformalCalibration, ConformalError> {
    check_alpha(alpha)?;
    let mut stats: Vec<f64> = cal.iter().filter_map(naive_statistic).collect();
    if stats.is_empty() {
        return Err(ConformalError::EmptyCalibration);
    }
    stats.sort_by(f64::total_cmp);
    let n = stats.len();
    let rank = (((n + 1) as f64) * (1.0 - alpha)).ceil() as usize;
    let qhat = if rank > n {
        f64::INFINITY
    } else {
        stats[rank - 1]
    };
    Ok(ConformalCalibration::Naive {
        alpha,
        qhat,
        n_cal: n,
    })
}

/// Naive prediction set: add experts in descending score order, stopping
/// after the first expert whose inclusion lifts the running sum to `qhat`.
/// Never empty; an infinite quantile returns every expert.
pub fn predict_naive_set(
    scores: &[f64],
    calib: &ConformalCalibration,
) -> Result<Vec<usize>, ConformalError> {
    let qhat = match calib {
        ConformalCalibration::Naive { qhat, .. } => *qhat,
        other => {
            return Err(ConformalError::WrongKind {
                got: other.kind_str(),
                want: "naive",
            })
        }
    };
    let mut set = Vec::new();
    let mut sum = 0.0;
    for &i in &descending_order(scores) {
        set.push(i);
        sum += scores[i];
        if sum >= qhat {
            break;
        }
    }
    Ok(set)
}

// ─── Regularized sets ────────────────────────────────────────────────────────

/// Threshold such that pooled correct-expert scores fall strictly below it
/// with empirical probability at most `alpha`; the largest pooled score
/// satisfying that bound.
pub fn choose_k_reg(cal: &[ScoredExample], alpha: f64) -> Result<f64, ConformalError> {
    check_alpha(alpha)?;
    let mut pool: Vec<f64> = cal
        .iter()
        .flat_map(|ex| {
            ex.scores
                .iter()
                .zip(&ex.correct)
                .filter(|(_, &c)| c)
                .map(|(&s, _)| s)
        })
        .collect();
    if pool.is_empty() {
        return Err(ConformalError::EmptyCorrectPool);
    }
    pool.sort_by(f64::total_cmp);
    let n = pool.len() as f64;
    let mut i = pool.len() - 1;
    loop {
        let candidate = pool[i];
        let below = pool.partition_point(|&x| x < candidate);
        if below as f64 / n <= alpha {
            return Ok(candidate);
        }
        // Jump past duplicates to the next distinct value down.
        i = below - 1;
    }
}

/// Per-example smallest lambda that would cover it (infinite when no expert
/// is correct). Covered means some correct expert enters the regularized set.
fn coverage_threshold(ex: &ScoredExample, k_reg: f64, beta: f64) -> f64 {
    let mut m = f64::INFINITY;
    for (j, &s) in ex.scores.iter().enumerate() {
        if ex.correct[j] {
            m = m.min(1.0 - (s + beta * (s - k_reg)));
        }
    }
    m
}

/// Conformal risk control for the miss rate: the smallest lambda on the
/// [`LAMBDA_GRID_STEP`] grid over [0, 1] whose corrected empirical risk
/// `(n * mean_loss + 1) / (n + 1)` is at most `alpha`, where the loss is
/// "no correct expert in the set". Falls back to 1.0 when no grid point
/// qualifies.
pub fn calibrate_lambda(
    cal: &[ScoredExample],
    alpha: f64,
    k_reg: f64,
    beta: f64,
) -> Result<f64, ConformalError> {
    check_alpha(alpha)?;
    if cal.is_empty() {
        return Err(ConformalError::EmptyCalibration);
    }
    let thresholds: Vec<f64> = cal
        .iter()
        .map(|ex| coverage_threshold(ex, k_reg, beta))
        .collect();
    let n = thresholds.len() as f64;
    let steps = (1.0 / LAMBDA_GRID_STEP).round() as usize;
    for i in 0..=steps {
        let lambda = i as f64 * LAMBDA_GRID_STEP;
        let misses = thresholds.iter().filter(|&&m| lambda <= m).count() as f64;
        if (misses + 1.0) / (n + 1.0) <= alpha {
            return Ok(lambda);
        }
    }
    Ok(1.0)
}

/// Grid-search beta to minimize mean set size on the tune split; each beta
/// is scored with its own risk-controlled lambda. Ties go to the smallest
/// beta.
pub fn tune_beta(
    tune: &[ScoredExample],
    alpha: f64,
    k_reg: f64,
    grid: &[f64],
) -> Result<f64, ConformalError> {
    check_alpha(alpha)?;
    if grid.is_empty() || grid.iter().any(|b| !b.is_finite() || *b < 0.0) {
        return Err(ConformalError::InvalidBetaGrid);
    }
    if tune.is_empty() {
        return Err(ConformalError::EmptyCalibration);
    }
    let mut sorted = grid.to_vec();
    sorted.sort_by(f64::total_cmp);
    let mut best: Option<(f64, f64)> = None;
    for &beta in &sorted {
        let lambda = calibrate_lambda(tune, alpha, k_reg, beta)?;
        let mean_size = tune
            .iter()
            .map(|ex| regularized_set(&ex.scores, k_reg, beta, lambda).len() as f64)
            .sum::<f64>()
            / tune.len() as f64;
        match best {
            Some((_, size)) if mean_size >= size => {}
            _ => best = Some((beta, mean_size)),
        }
    }
    Ok(best.expect("nonempty grid").0)
}

/// The defining set: `{j : s_j + beta * (s_j - k_reg) > 1 - lambda}`.
pub fn regularized_set(scores: &[f64], k_reg: f64, beta: f64, lambda: f64) -> Vec<usize> {
    scores
        .iter()
        .enumerate()
        .filter(|(_, &s)| s + beta * (s - k_reg) > 1.0 - lambda)
        .map(|(j, _)| j)
        .collect()
}

/// Prediction with a fitted regularized calibration; may be empty.
pub fn predict_regularized_set(
    scores: &[f64],
    calib: &ConformalCalibration,
) -> Result<Vec<usize>, ConformalError> {
    match calib {
        ConformalCalibration::Regularized {
            k_reg,
            beta,
            lambda_hat,
            ..
        } => Ok(regularized_set(scores, *k_reg, *beta, *lambda_hat)),
        other => Err(ConformalError::WrongKind {
            got: other.kind_str(),
            want: "regularized",
        }),
    }
}

/// Plain threshold set `{j : s_j >= k_reg}` that the regularized set is
/// compared against. The inclusion `C_lambda ⊆ C_2` holds exactly whenever
/// `lambda <= 1 - k_reg`.
pub fn c2_reference_set(scores: &[f64], k_reg: f64) -> Vec<usize> {
    scores
        .iter()
        .enumerate()
        .filter(|(_, &s)| s >= k_reg)
        .map(|(j, _)| j)
        .collect()
}

/// Fit the whole regularized procedure: `k_reg` and `beta` on the tune
/// split, `lambda` by risk control on the calibration split.
pub fn fit_regularized(
    tune: &[ScoredExample],
    cal: &[ScoredExample],
    alpha: f64,
    beta_grid: &[f64],
) -> Result<ConformalCalibration, ConformalError> {
    let k_reg = choose_k_reg(tune, alpha)?;
    let beta = tune_beta(tune, alpha, k_reg, beta_grid)?;
    let lambda_hat = calibrate_lambda(cal, alpha, k_reg, beta)?;
    Ok(ConformalCalibration::Regularized {
        alpha,
        k_reg,
        beta,
        lambda_hat,
        n_cal: cal.len(),
    })
}

/// Predict with either fitted procedure.
pub fn predict_set(
    scores: &[f64],
    calib: &ConformalCalibration,
) -> Result<Vec<usize>, ConformalError> {
    match calib {
        ConformalCalibration::Naive { .. } => predict_naive_set(scores, calib),
        ConformalCalibration::Regularized { .. } => predict_regularized_set(scores, calib),
    }
}

// ─── Evaluation ──────────────────────────────────────────────────────────────

/// Coverage/size summary of predicted sets against observed correctness.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct SetMetrics {
    /// Fraction of examples whose set contains at least one correct expert.
    pub coverage_any_correct: f64,
    /// Fraction of examples whose set contains the ground-truth best expert,
    /// over examples where that identity is known. `None` if it never is.
    pub coverage_true_best: Option<f64>,
    pub mean_size: f64,
    /// `size_histogram[s]` counts examples with set size `s`.
    pub size_histogram: Vec<usize>,
}

pub fn coverage_and_size(
    sets: &[Vec<usize>],
    examples: &[ScoredExample],
) -> Result<SetMetrics, ConformalError> {
    if sets.len() != examples.len() {
        return Err(ConformalError::MismatchedLengths {
            sets: sets.len(),
            examples: examples.len(),
        });
    }
    if sets.is_empty() {
        return Err(ConformalError::EmptyEvaluation);
    }
    let max_size = examples.iter().map(|ex| ex.scores.len()).max().unwrap();
    let mut histogram = vec![0usize; max_size + 1];
    let mut covered = 0usize;
    let mut best_known = 0usize;
    let mut best_covered = 0usize;
    let mut total_size = 0usize;
    for (set, ex) in sets.iter().zip(examples) {
        total_size += set.len();
        histogram[set.len().min(max_size)] += 1;
        if set.iter().any(|&j| ex.correct[j]) {
            covered += 1;
        }
        if let Some(best) = ex.true_best {
            best_known += 1;
            if set.contains(&best) {
                best_covered += 1;
            }
        }
    }
    let n = sets.len() as f64;
    Ok(SetMetrics {
        coverage_any_correct: covered as f64 / n,
        coverage_true_best: (best_known > 0).then(|| best_covered as f64 / best_known as f64),
        mean_size: total_size as f64 / n,
        size_histogram: histogram,
    })
}

/// Turn a dataset into scored examples through a model's estimator.
/// `true_best` is the argmax of the ground-truth expert correctness at each
/// input (lowest index on ties).
pub fn scored_examples(
    model: &MlpModel,
    estimator: EstimatorKind,
    data: &Dataset,
) -> Result<Vec<ScoredExample>, ConformalError> {
    let mut out = Vec::with_capacity(data.len());
    for ex in &data.examples {
        let outputs = model.forward(&ex.features)?;
        let conf = expert_confidence(estimator, &outputs);
        let mut best = 0usize;
        let mut best_p = f64::NEG_INFINITY;
        for (j, spec) in data.expert_specs.iter().enumerate() {
            let p = marginal_expert_correctness(&data.task, spec, &ex.features)?;
            if p > best_p {
                best_p = p;
                best = j;
            }
        }
        out.push(ScoredExample {
            scores: conf.values,
            correct: Dataset::correctness_flags(ex),
            true_best: Some(best),
        });
    }
    Ok(out)
}
