//! Decision rules (classify or defer, and to which expert) and the two
//! expert-correctness estimators.
//!
//! The rejector keeps an input only when the winning class logit *strictly*
//! beats every deferral logit; ties defer, and ties among experts go to the
//! lowest index. The softmax estimator divides each deferral softmax mass by
//! one minus their total, which is unbounded above; raw values are kept and
//! clamped values capped at 1 are reported alongside.

use serde::{Deserialize, Serialize};

use crate::loss::{augmented_softmax, sigmoid, ModelOutputs};
use crate::synth::{marginal_expert_correctness, ExpertSpec, SyntheticTask};

/// Floor applied to the softmax estimator's denominator before dividing.
pub const DENOMINATOR_FLOOR: f64 = 1e-12;

/// Routing decision: `target` 0 is the classifier, `j >= 1` is expert `j`.
/// `predicted_class` is the classifier's argmax and is meaningful when
/// `target == 0`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DeferralDecision {
    pub target: usize,
    pub predicted_class: usize,
}

/// Which correctness estimator produced a set of confidences.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EstimatorKind {
    Softmax,
    Ova,
}

impl EstimatorKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            EstimatorKind::Softmax => "softmax",
            EstimatorKind::Ova => "ova",
        }
    }
}

/// Per-expert correctness estimates for one input.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExpertConfidences {
    /// Estimates clamped to [0, 1]; use these downstream.
    pub values: Vec<f64>,
    /// Pre-clamp estimates. Equal to `values` for the OvA estimator; can
    /// exceed 1 on the softmax path.
    pub raw_values: Vec<f64>,
    pub kind: EstimatorKind,
}

/// Argmax over class logits; ties go to the lowest index.
pub fn classify(outputs: &ModelOutputs) -> usize {
    let mut best = 0;
    for (k, &g) in outputs.class_logits.iter().enumerate() {
        if g > outputs.class_logits[best] {
            best = k;
        }
    }
    best
}

/// Full routing rule: the classifier wins only if its best class logit
/// strictly exceeds every deferral logit; otherwise defer to the
/// highest-scoring expert (lowest index on ties).
pub fn reject(outputs: &ModelOutputs) -> DeferralDecision {
    let predicted_class = classify(outputs);
    let class_score = outputs.class_logits[predicted_class];
    let mut best_expert = 0;
    for (j, &g) in outputs.deferral_logits.iter().enumerate() {
        if g > outputs.deferral_logits[best_expert] {
            best_expert = j;
        }
    }
    if class_score > outputs.deferral_logits[best_expert] {
        DeferralDecision {
            target: 0,
            predicted_class,
        }
    } else {
        DeferralDecision {
            target: best_expert + 1,
            predicted_class,
        }
    }
}

/// Softmax-path estimator: with `t_j` the softmax mass of deferral slot `j`
/// over all K+J slots, the raw estimate is `t_j / (1 - sum_j t_j)` with the
/// denominator floored at [`DENOMINATOR_FLOOR`]; reported values are clamped
/// to [0, 1].
pub fn softmax_expert_confidence(outputs: &ModelOutputs) -> ExpertConfidences {
    let probs = augmented_softmax(outputs);
    let k = outputs.num_classes();
    let deferral_mass: f64 = probs[k..].iter().sum();
    let denom = (1.0 - deferral_mass).max(DENOMINATOR_FLOOR);
    let raw_values: Vec<f64> = probs[k..].iter().map(|&t| t / denom).collect();
    let values = raw_values.iter().map(|&v| v.clamp(0.0, 1.0)).collect();
    ExpertConfidences {
        values,
        raw_values,
        kind: EstimatorKind::Softmax,
    }
}

/// OvA-path estimator: the sigmoid of each deferral logit, already in (0, 1);
/// raw and clamped values coincide.
pub fn ova_expert_confidence(outputs: &ModelOutputs) -> ExpertConfidences {
    let values: Vec<f64> = outputs
        .deferral_logits
        .iter()
        .map(|&g| sigmoid(g))
        .collect();
    ExpertConfidences {
        raw_values: values.clone(),
        values,
        kind: EstimatorKind::Ova,
    }
}

/// Dispatch on [`EstimatorKind`].
pub fn expert_confidence(kind: EstimatorKind, outputs: &ModelOutputs) -> ExpertConfidences {
    match kind {
        EstimatorKind::Softmax => softmax_expert_confidence(outputs),
        EstimatorKind::Ova => ova_expert_confidence(outputs),
    }
}

/// Ground-truth routing on a synthetic task: the classifier wins only when
/// the top posterior strictly exceeds every expert's correctness
/// probability; otherwise defer to the most reliable expert (lowest index on
/// ties). The reference every trained rejector is scored against.
pub fn bayes_reference_decision(
    task: &SyntheticTask,
    expert_specs: &[ExpertSpec],
    x: &[f64],
) -> Result<DeferralDecision, crate::synth::SynthError> {
    let posterior = task.class_posterior(x)?;
    let mut best_class = 0;
    for (c, &p) in posterior.iter().enumerate() {
        if p > posterior[best_class] {
            best_class = c;
        }
    }
    let expert_probs: Vec<f64> = expert_specs
        .iter()
        .map(|spec| marginal_expert_correctness(task, spec, x))
        .collect::<Result<_, _>>()?;
    let mut best_expert = 0;
    for (j, &p) in expert_probs.iter().enumerate() {
        if p > expert_probs[best_expert] {
            best_expert = j;
        }
    }
    if posterior[best_class] > expert_probs[best_expert] {
        Ok(DeferralDecision {
            target: 0,
            predicted_class: best_class,
        })
    } else {
        Ok(DeferralDecision {
            target: best_expert + 1,
            predicted_class: best_class,
        })
    }
}

/// Logits whose augmented softmax reproduces a given posterior and expert
/// correctness profile exactly: class slot `ln(eta_y)`, deferral slot
/// `ln(p_j)`. Probabilities are floored at 1e-300 to keep logits finite.
pub fn optimal_softmax_logits(posterior: &[f64], expert_probs: &[f64]) -> ModelOutputs {
    let safe_ln = |p: f64| p.max(1e-300).ln();
    ModelOutputs::new(
        posterior.iter().map(|&p| safe_ln(p)).collect(),
        expert_probs.iter().map(|&p| safe_ln(p)).collect(),
    )
}
