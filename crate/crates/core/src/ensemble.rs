//! System-level evaluation: routing through the rejector, turning expert
//! sets into predictions by majority vote, and the fixed-size top-k baseline.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::conformal::{predict_set, ConformalCalibration, ConformalError};
use crate::deferral::{expert_confidence, reject, EstimatorKind};
use crate::model::{MlpModel, ModelError};
use crate::synth::Dataset;

#[derive(Debug, Error)]
pub enum EnsembleError {
    #[error("majority vote over an empty expert set")]
    EmptySet,
    #[error("k = {k} outside [1, {num_experts}]")]
    KOutOfRange { k: usize, num_experts: usize },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Conformal(#[from] ConformalError),
}

/// How deferred examples are predicted.
#[derive(Debug, Clone, PartialEq)]
pub enum DeferralMode<'a> {
    /// Route to the single expert the rejector picked.
    SingleExpert,
    /// Majority vote over a fitted conformal set (top-1 fallback when the
    /// set comes back empty).
    Conformal(&'a ConformalCalibration),
    /// Majority vote over the k highest-scoring experts.
    FixedK(usize),
    /// Ignore the rejector and always use the classifier.
    NeverDefer,
}

/// Evaluation summary of one system configuration on one dataset.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct SystemReport {
    pub overall_accuracy: f64,
    pub deferral_rate: f64,
    /// Accuracy over non-deferred examples; `None` when everything deferred.
    pub classifier_accuracy: Option<f64>,
    /// Accuracy over deferred examples; `None` when nothing deferred.
    pub deferral_accuracy: Option<f64>,
    /// Mean expert-set size over deferred examples (1.0 in single-expert
    /// mode); `None` when nothing deferred.
    pub mean_set_size: Option<f64>,
    pub n_examples: usize,
}

/// Modal class among the chosen experts' predictions. Vote ties break by the
/// summed confidence of each tied class's voters, then by the lower class
/// index.
pub fn majority_vote(
    set: &[usize],
    preds: &[usize],
    scores: &[f64],
) -> Result<usize, EnsembleError> {
    if set.is_empty() {
        return Err(EnsembleError::EmptySet);
    }
    let mut votes: Vec<(usize, (usize, f64))> = Vec::new();
    for &j in set {
        let class = preds[j];
        match votes.iter_mut().find(|(c, _)| *c == class) {
            Some((_, (count, conf))) => {
                *count += 1;
                *conf += scores[j];
            }
            None => votes.push((class, (1, scores[j]))),
        }
    }
    let mut best = votes[0];
    for &v in &votes[1..] {
        let (class, (count, conf)) = v;
        let (best_class, (best_count, best_conf)) = best;
        if count > best_count
            || (count == best_count && conf > best_conf)
            || (count == best_count && conf == best_conf && class < best_class)
        {
            best = v;
        }
    }
    Ok(best.0)
}

/// Indices of the k largest scores, ties toward the lower index.
pub fn fixed_topk_set(scores: &[f64], k: usize) -> Result<Vec<usize>, EnsembleError> {
    if k == 0 || k > scores.len() {
        return Err(EnsembleError::KOutOfRange {
            k,
            num_experts: scores.len(),
        });
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    let mut set = order[..k].to_vec();
    set.sort_unstable();
    Ok(set)
}

/// Run the full system over a dataset: route each example through the
/// rejector, predict with the classifier or the configured deferral mode,
/// and aggregate accuracy.
pub fn system_accuracy(
    model: &MlpModel,
    estimator: EstimatorKind,
    data: &Dataset,
    mode: &DeferralMode,
) -> Result<SystemReport, EnsembleError> {
    let n = data.len();
    let mut correct_total = 0usize;
    let mut deferred = 0usize;
    let mut correct_classifier = 0usize;
    let mut correct_deferred = 0usize;
    let mut set_size_total = 0usize;

    for ex in &data.examples {
        let outputs = model.forward(&ex.features)?;
        let decision = reject(&outputs);
        let use_classifier = matches!(mode, DeferralMode::NeverDefer) || decision.target == 0;
        let ok = if use_classifier {
            decision.predicted_class == ex.label
        } else {
            deferred += 1;
            let prediction = match mode {
                DeferralMode::SingleExpert => {
                    set_size_total += 1;
                    ex.expert_preds[decision.target - 1]
                }
                DeferralMode::Conformal(calib) => {
                    let scores = expert_confidence(estimator, &outputs).values;
                    let mut set = predict_set(&scores, calib)?;
                    if set.is_empty() {
                        // Unusable downstream; fall back to the rejector's
                        // top expert.
                        set = vec![decision.target - 1];
                    }
                    set_size_total += set.len();
                    majority_vote(&set, &ex.expert_preds, &scores)?
                }
                DeferralMode::FixedK(k) => {
                    let scores = expert_confidence(estimator, &outputs).values;
                    let set = fixed_topk_set(&scores, *k)?;
                    set_size_total += set.len();
                    majority_vote(&set, &ex.expert_preds, &scores)?
                }
                DeferralMode::NeverDefer => unreachable!(),
            };
            prediction == ex.label
        };
        if ok {
            correct_total += 1;
            if use_classifier {
                correct_classifier += 1;
            } else {
                correct_deferred += 1;
            }
        }
    }

    let kept = n - deferred;
    Ok(SystemReport {
        overall_accuracy: correct_total as f64 / n as f64,
        deferral_rate: deferred as f64 / n as f64,
        classifier_accuracy: (kept > 0).then(|| correct_classifier as f64 / kept as f64),
        deferral_accuracy: (deferred > 0).then(|| correct_deferred as f64 / deferred as f64),
        mean_set_size: (deferred > 0).then(|| set_size_total as f64 / deferred as f64),
        n_examples: n,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::loss::LossKind;
    use crate::model::init_model;
    use crate::synth::{
        generate_task, sample_dataset, ExpertKind, ExpertSpec, OffSubsetBehavior, StdSpec,
        TaskConfig,
    };

    #[test]
    fn vote_takes_the_mode() {
        // Experts 1..3 (indices 0..2) predict 3, 3, 5.
        let preds = [3, 3, 5];
        let scores = [0.5, 0.5, 0.9];
        assert_eq!(majority_vote(&[0, 1, 2], &preds, &scores).unwrap(), 3);
    }

    #[test]
    fn vote_tie_breaks_on_summed_confidence() {
        let preds = [3, 5];
        let scores = [0.7, 0.6];
        assert_eq!(majority_vote(&[0, 1], &preds, &scores).unwrap(), 3);
        let scores = [0.6, 0.7];
        assert_eq!(majority_vote(&[0, 1], &preds, &scores).unwrap(), 5);
    }

    #[test]
    fn vote_double_tie_breaks_on_class_index() {
        let preds = [5, 3];
        let scores = [0.5, 0.5];
        assert_eq!(majority_vote(&[0, 1], &preds, &scores).unwrap(), 3);
    }

    #[test]
    fn singleton_vote_is_that_prediction() {
        assert_eq!(
            majority_vote(&[1], &[4, 2, 0], &[0.1, 0.2, 0.3]).unwrap(),
            2
        );
    }

    #[test]
    fn identical_predictions_win_vote() {
        assert_eq!(
            majority_vote(&[0, 1, 2], &[7, 7, 7], &[0.1, 0.1, 0.1]).unwrap(),
            7
        );
    }

    #[test]
    fn empty_set_is_an_error() {
        assert!(matches!(
            majority_vote(&[], &[1], &[0.5]),
            Err(EnsembleError::EmptySet)
        ));
    }

    #[test]
    fn topk_picks_largest_scores() {
        assert_eq!(fixed_topk_set(&[0.9, 0.1, 0.5], 2).unwrap(), vec![0, 2]);
        assert_eq!(fixed_topk_set(&[0.9, 0.1, 0.5], 3).unwrap(), vec![0, 1, 2]);
        assert_eq!(fixed_topk_set(&[0.5, 0.5], 1).unwrap(), vec![0]);
    }

    #[test]
    fn topk_range_checked() {
        assert!(matches!(
            fixed_topk_set(&[0.5], 2),
            Err(EnsembleError::KOutOfRange { .. })
        ));
        assert!(fixed_topk_set(&[0.5], 0).is_err());
    }

    fn oracle_spec(num_classes: usize, seed: u64) -> ExpertSpec {
        ExpertSpec::new(
            ExpertKind::OracleSubset {
                oracle_classes: (0..num_classes).collect(),
                off_subset: OffSubsetBehavior::AlwaysWrong,
            },
            seed,
        )
    }

    fn well_separated_data(specs: Vec<ExpertSpec>) -> Dataset {
        let config = TaskConfig {
            dim: 2,
            num_classes: 2,
            means: Some(vec![vec![-4.0, 0.0], vec![4.0, 0.0]]),
            mean_range: 3.0,
            std: StdSpec::Shared(0.5),
            priors: None,
        };
        let task = generate_task(&config, 1).unwrap();
        sample_dataset(&task, &specs, 400, 3).unwrap()
    }

    /// A hand-built model that classifies the separated task perfectly and
    /// whose deferral logit sits at `deferral_logit`.
    fn hand_model(deferral_logit: f64, num_experts: usize) -> MlpModel {
        let mut model = init_model(2, &[], 2, num_experts, LossKind::Ova, 0).unwrap();
        // Class 0 mean is at x < 0: logit_0 = -10x, logit_1 = +10x.
        model.weights[0] = vec![0.0; 2 * (2 + num_experts)];
        model.weights[0][0] = -10.0;
        model.weights[0][2] = 10.0;
        model.biases[0] = vec![0.0; 2 + num_experts];
        for j in 0..num_experts {
            model.biases[0][2 + j] = deferral_logit;
        }
        model
    }

    #[test]
    fn perfect_classifier_never_defers() {
        let data = well_separated_data(vec![ExpertSpec::new(ExpertKind::UniformRandom, 9)]);
        // Deferral logit far below any class logit magnitude at the data.
        let model = hand_model(-100.0, 1);
        let report = system_accuracy(
            &model,
            EstimatorKind::Ova,
            &data,
            &DeferralMode::SingleExpert,
        )
        .unwrap();
        assert_eq!(report.overall_accuracy, 1.0);
        assert_eq!(report.deferral_rate, 0.0);
        assert_eq!(report.deferral_accuracy, None);
    }

    #[test]
    fn always_deferring_to_an_oracle_is_perfect() {
        let data = well_separated_data(vec![oracle_spec(2, 9)]);
        let model = hand_model(1e6, 1);
        let report = system_accuracy(
            &model,
            EstimatorKind::Ova,
            &data,
            &DeferralMode::SingleExpert,
        )
        .unwrap();
        assert_eq!(report.overall_accuracy, 1.0);
        assert_eq!(report.deferral_rate, 1.0);
        assert_eq!(report.classifier_accuracy, None);
    }

    #[test]
    fn never_defer_equals_plain_classifier_accuracy() {
        let data = well_separated_data(vec![ExpertSpec::new(ExpertKind::UniformRandom, 9)]);
        let model = hand_model(1e6, 1); // would always defer if allowed
        let report =
            system_accuracy(&model, EstimatorKind::Ova, &data, &DeferralMode::NeverDefer).unwrap();
        assert_eq!(report.deferral_rate, 0.0);
        assert_eq!(report.overall_accuracy, 1.0);
    }

    #[test]
    fn singleton_conformal_sets_match_single_expert_mode() {
        // qhat = 0 forces one-element naive sets, which must reproduce
        // single-expert deferral exactly when the rejector's choice and the
        // top score agree (OvA scores are monotone in the deferral logits).
        let data = well_separated_data(vec![
            oracle_spec(2, 9),
            ExpertSpec::new(ExpertKind::UniformRandom, 10),
        ]);
        let mut model = hand_model(0.0, 2);
        model.biases[0][2] = 60.0; // always defers, expert 1 clearly preferred
        model.biases[0][3] = -60.0;
        let calib = ConformalCalibration::Naive {
            alpha: 0.1,
            qhat: 0.0,
            n_cal: 1,
        };
        let single = system_accuracy(
            &model,
            EstimatorKind::Ova,
            &data,
            &DeferralMode::SingleExpert,
        )
        .unwrap();
        let conformal = system_accuracy(
            &model,
            EstimatorKind::Ova,
            &data,
            &DeferralMode::Conformal(&calib),
        )
        .unwrap();
        assert_eq!(single.overall_accuracy, conformal.overall_accuracy);
        assert_eq!(conformal.mean_set_size, Some(1.0));
    }
}
