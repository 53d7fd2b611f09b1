//! Expected calibration error (ECE) for expert-correctness estimates.
//!
//! Equal-width binning of [0, 1]; a confidence lands in bin
//! `[edge_b, edge_{b+1})` with the last bin closed at 1.0. The scalar ECE is
//! the count-weighted mean absolute gap between each bin's mean confidence
//! and its empirical accuracy. Expert correctness is binary, so this single
//! definition is the whole calibration story.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::deferral::{expert_confidence, EstimatorKind};
use crate::model::{MlpModel, ModelError};
use crate::synth::Dataset;

/// Default bin count used by the experiment runners.
pub const DEFAULT_NUM_BINS: usize = 15;

#[derive(Debug, Error, PartialEq)]
pub enum CalibrationError {
    #[error("confidence {value} at index {index} outside [0, 1]")]
    ConfidenceOutOfRange { index: usize, value: f64 },
    #[error("confidences ({confidences}) and correctness ({correct}) lengths differ")]
    LengthMismatch { confidences: usize, correct: usize },
    #[error("at least one (confidence, correctness) pair is required")]
    Empty,
    #[error("num_bins must be >= 1")]
    ZeroBins,
}

/// One calibration bin.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct BinStat {
    pub mean_confidence: f64,
    pub accuracy: f64,
    pub count: usize,
}

/// Binned calibration summary plus the scalar ECE.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct EceReport {
    pub num_bins: usize,
    /// `num_bins + 1` edges spanning [0, 1].
    pub edges: Vec<f64>,
    pub bins: Vec<BinStat>,
    pub ece: f64,
}

/// Expected calibration error of `(confidence, correct)` pairs.
///
/// Confidences must already lie in [0, 1]; clamping is the caller's job.
pub fn ece(
    confidences: &[f64],
    correct: &[bool],
    num_bins: usize,
) -> Result<EceReport, CalibrationError> {
    if num_bins == 0 {
        return Err(CalibrationError::ZeroBins);
    }
    if confidences.len() != correct.len() {
        return Err(CalibrationError::LengthMismatch {
            confidences: confidences.len(),
            correct: correct.len(),
        });
    }
    if confidences.is_empty() {
        return Err(CalibrationError::Empty);
    }
    if let Some((index, &value)) = confidences
        .iter()
        .enumerate()
        .find(|(_, c)| !(0.0..=1.0).contains(*c))
    {
        return Err(CalibrationError::ConfidenceOutOfRange { index, value });
    }

    let mut conf_sum = vec![0.0f64; num_bins];
    let mut hit_sum = vec![0usize; num_bins];
    let mut counts = vec![0usize; num_bins];
    for (&c, &ok) in confidences.iter().zip(correct) {
        let bin = ((c * num_bins as f64) as usize).min(num_bins - 1);
        conf_sum[bin] += c;
        hit_sum[bin] += ok as usize;
        counts[bin] += 1;
    }

    let n = confidences.len() as f64;
    let mut bins = Vec::with_capacity(num_bins);
    let mut total = 0.0;
    for b in 0..num_bins {
        if counts[b] == 0 {
            bins.push(BinStat {
                mean_confidence: 0.0,
                accuracy: 0.0,
                count: 0,
            });
            continue;
        }
        let mean_confidence = conf_sum[b] / counts[b] as f64;
        let accuracy = hit_sum[b] as f64 / counts[b] as f64;
        total += (counts[b] as f64 / n) * (accuracy - mean_confidence).abs();
        bins.push(BinStat {
            mean_confidence,
            accuracy,
            count: counts[b],
        });
    }

    let edges = (0..=num_bins).map(|b| b as f64 / num_bins as f64).collect();
    Ok(EceReport {
        num_bins,
        edges,
        bins,
        ece: total,
    })
}

/// Full per-expert calibration reports for a model's estimator over an
/// evaluation set.
///
/// Expert `j`'s confidences are the estimator's (clamped) values at each
/// input and its correctness is the recorded `m_j == y`.
pub fn per_expert_ece_reports(
    model: &MlpModel,
    estimator: EstimatorKind,
    eval_set: &Dataset,
    num_bins: usize,
) -> Result<Vec<EceReport>, PerExpertEceError> {
    let j = eval_set.num_experts();
    let mut confidences: Vec<Vec<f64>> = vec![Vec::with_capacity(eval_set.len()); j];
    let mut correct: Vec<Vec<bool>> = vec![Vec::with_capacity(eval_set.len()); j];
    for ex in &eval_set.examples {
        let out = model.forward(&ex.features)?;
        let conf = expert_confidence(estimator, &out);
        for jj in 0..j {
            confidences[jj].push(conf.values[jj]);
            correct[jj].push(ex.expert_preds[jj] == ex.label);
        }
    }
    let mut reports = Vec::with_capacity(j);
    for jj in 0..j {
        reports.push(ece(&confidences[jj], &correct[jj], num_bins)?);
    }
    Ok(reports)
}

/// Scalar form of [`per_expert_ece_reports`]: the per-expert ECEs and their
/// average.
pub fn per_expert_ece(
    model: &MlpModel,
    estimator: EstimatorKind,
    eval_set: &Dataset,
    num_bins: usize,
) -> Result<(Vec<f64>, f64), PerExpertEceError> {
    let reports = per_expert_ece_reports(model, estimator, eval_set, num_bins)?;
    let eces: Vec<f64> = reports.iter().map(|r| r.ece).collect();
    let average = eces.iter().sum::<f64>() / eces.len() as f64;
    Ok((eces, average))
}

#[derive(Debug, Error)]
pub enum PerExpertEceError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Calibration(#[from] CalibrationError),
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    #[test]
    fn single_bin_is_mean_gap() {
        let report = ece(&[0.8, 0.8, 0.8, 0.8], &[true, true, true, false], 1).unwrap();
        assert!((report.ece - 0.05).abs() < 1e-12);
        assert_eq!(report.bins[0].count, 4);
    }

    #[test]
    fn perfect_predictor_has_zero_ece() {
        let report = ece(&[1.0, 1.0, 1.0], &[true, true, true], 10).unwrap();
        assert_eq!(report.ece, 0.0);
    }

    #[test]
    fn counts_partition_the_input() {
        let conf = [0.05, 0.15, 0.5, 0.95, 1.0];
        let ok = [false, true, false, true, true];
        let report = ece(&conf, &ok, 10).unwrap();
        let total: usize = report.bins.iter().map(|b| b.count).sum();
        assert_eq!(total, conf.len());
        // 1.0 lands in the last (closed) bin together with 0.95.
        assert_eq!(report.bins[9].count, 2);
    }

    #[test]
    fn out_of_range_confidence_rejected() {
        assert_eq!(
            ece(&[1.2], &[true], 5),
            Err(CalibrationError::ConfidenceOutOfRange {
                index: 0,
                value: 1.2
            })
        );
        assert!(ece(&[0.5], &[true, false], 5).is_err());
        assert!(ece(&[], &[], 5).is_err());
        assert!(ece(&[0.5], &[true], 0).is_err());
    }

    #[test]
    fn ece_is_permutation_invariant() {
        let conf = [0.1, 0.4, 0.9, 0.6, 0.3];
        let ok = [false, true, true, false, false];
        let a = ece(&conf, &ok, 5).unwrap().ece;
        let perm = [2usize, 0, 4, 1, 3];
        let conf_p: Vec<f64> = perm.iter().map(|&i| conf[i]).collect();
        let ok_p: Vec<bool> = perm.iter().map(|&i| ok[i]).collect();
        let b = ece(&conf_p, &ok_p, 5).unwrap().ece;
        assert_eq!(a, b);
    }

    #[test]
    fn calibrated_source_scores_low() {
        // conf ~ U(0,1), correct ~ Bernoulli(conf): ECE under 0.03 at n=1e4.
        let mut rng = crate::rng::stream_rng(5, crate::rng::StreamDomain::Scratch, 0, 2);
        let n = 10_000;
        let mut conf = Vec::with_capacity(n);
        let mut ok = Vec::with_capacity(n);
        for _ in 0..n {
            let c = rng.random::<f64>();
            conf.push(c);
            ok.push(rng.random::<f64>() < c);
        }
        let report = ece(&conf, &ok, 15).unwrap();
        assert!(report.ece < 0.03, "ece {}", report.ece);
        assert!(report.ece <= 1.0 && report.ece >= 0.0);
    }

    #[test]
    fn constant_confidence_on_uniform_experts() {
        // A constant-1/K estimate on a uniformly random expert is calibrated.
        let mut rng = crate::rng::stream_rng(6, crate::rng::StreamDomain::Scratch, 0, 3);
        let n = 10_000;
        let conf = vec![0.1; n];
        let ok: Vec<bool> = (0..n).map(|_| rng.random_range(0..10usize) == 0).collect();
        let report = ece(&conf, &ok, 15).unwrap();
        assert!(report.ece < 0.01, "ece {}", report.ece);
    }

    #[test]
    fn per_expert_reduces_to_single_call() {
        use crate::loss::LossKind;
        use crate::model::init_model;
        use crate::synth::{generate_task, sample_dataset, ExpertKind, ExpertSpec, TaskConfig};

        let task = generate_task(&TaskConfig::new(2, 3), 1).unwrap();
        let specs = vec![ExpertSpec::new(ExpertKind::UniformRandom, 4)];
        let data = sample_dataset(&task, &specs, 300, 2).unwrap();
        let model = init_model(2, &[8], 3, 1, LossKind::Ova, 3).unwrap();

        let (eces, avg) = per_expert_ece(&model, EstimatorKind::Ova, &data, 15).unwrap();
        assert_eq!(eces.len(), 1);
        assert_eq!(eces[0], avg);

        let mut conf = Vec::new();
        let mut ok = Vec::new();
        for ex in &data.examples {
            let out = model.forward(&ex.features).unwrap();
            conf.push(expert_confidence(EstimatorKind::Ova, &out).values[0]);
            ok.push(ex.expert_preds[0] == ex.label);
        }
        let direct = ece(&conf, &ok, 15).unwrap().ece;
        assert_eq!(direct, eces[0]);
    }

    #[test]
    fn clamped_softmax_path_feeds_exact_ones() {
        // When the raw estimate exceeds 1, the confidence used for binning is
        // exactly 1.0 and ends up in the top bin.
        use crate::deferral::softmax_expert_confidence;
        use crate::loss::ModelOutputs;
        let out = ModelOutputs::new(vec![0.0, 0.0], vec![2.0, 2.0]);
        let conf = softmax_expert_confidence(&out);
        assert!(conf.raw_values.iter().all(|&r| r > 1.0));
        assert!(conf.values.iter().all(|&v| v == 1.0));
        let report = ece(&conf.values, &[true, false], 15).unwrap();
        assert_eq!(report.bins[14].count, 2);
    }
}
