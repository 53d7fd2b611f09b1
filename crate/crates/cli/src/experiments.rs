//! Experiment execution: each kind trains the configured systems per seed,
//! measures accuracy/calibration/conformal metrics, and the runner
//! aggregates seed results into plot-ready artifacts.
//!
//! Seeds are independent; with `threads > 1` they run in parallel worker
//! slots, and aggregation always happens in seed order so outputs are
//! byte-reproducible either way.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use thiserror::Error;

use l2d_core::calibration::{per_expert_ece, PerExpertEceError, DEFAULT_NUM_BINS};
use l2d_core::conformal::{
    calibrate_naive, coverage_and_size, fit_regularized, predict_set, scored_examples,
    ConformalCalibration, ConformalError, ScoredExample,
};
use l2d_core::deferral::{reject, EstimatorKind};
use l2d_core::ensemble::{system_accuracy, DeferralMode, EnsembleError, SystemReport};
use l2d_core::loss::LossKind;
use l2d_core::model::{
    init_model, save_model, train, CheckpointError, MlpModel, ModelError, TrainConfig,
};
use l2d_core::rng::{permutation, stream_rng, StreamDomain};
use l2d_core::synth::{
    sample_dataset, split_conformal_pool, Dataset, ExpertKind, ExpertSpec, OffSubsetBehavior,
    SplitTag, SynthError, SyntheticTask,
};

use crate::config::{ExperimentConfig, ExperimentKind, StatisticKind};
use crate::report::{
    aggregate, write_metrics_csv, write_summary, write_timing, MetricRow, Summary, Timing,
};

#[derive(Debug, Error)]
pub enum RunError {
    #[error(transparent)]
    Synth(#[from] SynthError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error(transparent)]
    Conformal(#[from] ConformalError),
    #[error(transparent)]
    Ensemble(#[from] EnsembleError),
    #[error(transparent)]
    Calibration(#[from] PerExpertEceError),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("json: {0}")]
    Json(serde_json::Error),
    #[error("csv: {0}")]
    Csv(csv::Error),
    #[error("{context}: only {got} deferred examples; need at least {need}")]
    InsufficientDeferrals {
        context: String,
        got: usize,
        need: usize,
    },
    #[error("experiment {experiment}, seed {seed}: {source}")]
    Seed {
        experiment: String,
        seed: u64,
        source: Box<RunError>,
    },
}

// Salt tags for deriving purpose-specific seeds from one run seed.
const TAG_DATA: u64 = 1;
const TAG_EVAL: u64 = 2;
const TAG_INIT: u64 = 3;
const TAG_SHUFFLE: u64 = 4;
const TAG_ROSTER: u64 = 5;
const TAG_GROW: u64 = 6;

/// SplitMix-style derivation of independent seeds from (run seed, purpose).
pub fn derived_seed(seed: u64, tag: u64) -> u64 {
    let mut z = seed
        .wrapping_mul(0x9E37_79B9_7F4A_7C15)
        .wrapping_add(tag.wrapping_mul(0xBF58_476D_1CE4_E5B9));
    z ^= z >> 30;
    z = z.wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^= z >> 27;
    z
}

fn loss_for(est: EstimatorKind) -> LossKind {
    match est {
        EstimatorKind::Softmax => LossKind::Softmax,
        EstimatorKind::Ova => LossKind::Ova,
    }
}

/// Output of one seed's run: metric rows plus checkpoints to persist.
pub struct SeedOutput {
    pub rows: Vec<MetricRow>,
    pub checkpoints: Vec<(String, MlpModel)>,
}

struct Ctx<'a> {
    config: &'a ExperimentConfig,
    task: SyntheticTask,
    seed: u64,
}

impl<'a> Ctx<'a> {
    /// Carve train/val/test from one sample, exactly honoring the configured
    /// counts. `salt` distinguishes sweep points.
    fn sample_splits(
        &self,
        experts: &[ExpertSpec],
        salt: u64,
    ) -> Result<(Dataset, Dataset, Dataset), RunError> {
        let d = &self.config.data;
        let total = d.n_train + d.n_val + d.n_test;
        let full = sample_dataset(
            &self.task,
            experts,
            total,
            derived_seed(self.seed, TAG_DATA + 1000 * salt),
        )?;
        let slice = |range: std::ops::Range<usize>, split: SplitTag| Dataset {
            task: full.task.clone(),
            expert_specs: full.expert_specs.clone(),
            examples: full.examples[range].to_vec(),
            split,
            sample_seed: full.sample_seed,
        };
        Ok((
            slice(0..d.n_train, SplitTag::Train),
            slice(d.n_train..d.n_train + d.n_val, SplitTag::Val),
            slice(d.n_train + d.n_val..total, SplitTag::Test),
        ))
    }

    /// Fresh held-out sample for evaluating fitted conformal procedures.
    fn sample_eval(&self, experts: &[ExpertSpec], salt: u64) -> Result<Dataset, RunError> {
        let mut data = sample_dataset(
            &self.task,
            experts,
            self.config.data.n_eval,
            derived_seed(self.seed, TAG_EVAL + 1000 * salt),
        )?;
        data.split = SplitTag::Test;
        Ok(data)
    }

    fn train_config(&self) -> TrainConfig {
        let t = &self.config.train;
        TrainConfig {
            epochs: t.epochs,
            batch_size: t.batch_size,
            learning_rate: t.learning_rate,
            momentum: t.momentum,
            seed: derived_seed(self.seed, TAG_SHUFFLE),
            shuffle: t.shuffle,
        }
    }

    fn train_fresh(
        &self,
        est: EstimatorKind,
        train_set: &Dataset,
        val_set: &Dataset,
    ) -> Result<MlpModel, RunError> {
        let mut model = init_model(
            self.task.dim,
            &self.config.train.hidden_sizes,
            self.task.num_classes,
            train_set.num_experts(),
            loss_for(est),
            derived_seed(self.seed, TAG_INIT),
        )?;
        train(&mut model, train_set, val_set, &self.train_config())?;
        Ok(model)
    }

    fn retrain_grown(
        &self,
        base: &MlpModel,
        extra: usize,
        train_set: &Dataset,
        val_set: &Dataset,
    ) -> Result<MlpModel, RunError> {
        let mut model = base.with_added_experts(extra, derived_seed(self.seed, TAG_GROW));
        train(&mut model, train_set, val_set, &self.train_config())?;
        Ok(model)
    }
}

/// Sample the train/val/test splits for the configured explicit roster.
/// Used by the `gen`, `train`, `eval`, and `conformal` subcommands.
pub fn generate_splits(
    config: &ExperimentConfig,
    seed: u64,
) -> Result<(Dataset, Dataset, Dataset), RunError> {
    let task = config
        .task
        .build()
        .map_err(|e| RunError::Synth(SynthError::InvalidConfig(e.to_string())))?;
    let ctx = Ctx { config, task, seed };
    ctx.sample_splits(&config.experts, 0)
}

/// Train one system (surrogate chosen by the estimator kind) on the
/// configured explicit roster; returns the model and the test split.
pub fn train_system(
    config: &ExperimentConfig,
    est: EstimatorKind,
    seed: u64,
) -> Result<(MlpModel, Dataset), RunError> {
    let task = config
        .task
        .build()
        .map_err(|e| RunError::Synth(SynthError::InvalidConfig(e.to_string())))?;
    let ctx = Ctx { config, task, seed };
    let (train_set, val_set, test_set) = ctx.sample_splits(&config.experts, 0)?;
    let model = ctx.train_fresh(est, &train_set, &val_set)?;
    Ok((model, test_set))
}

/// Fit each configured statistic on the test split's deferred pool and
/// report held-out coverage/size; returns `(statistic name, fit, metrics)`.
pub fn fit_and_evaluate_conformal(
    config: &ExperimentConfig,
    model: &MlpModel,
    est: EstimatorKind,
    seed: u64,
) -> Result<
    Vec<(
        String,
        ConformalCalibration,
        l2d_core::conformal::SetMetrics,
    )>,
    RunError,
> {
    let task = config
        .task
        .build()
        .map_err(|e| RunError::Synth(SynthError::InvalidConfig(e.to_string())))?;
    let ctx = Ctx { config, task, seed };
    let (_, _, test_set) = ctx.sample_splits(&config.experts, 0)?;
    let eval_set = ctx.sample_eval(&config.experts, 0)?;
    let (tune, cal) = deferred_pools(model, est, &test_set)?;
    let eval_pool = scored_examples(model, est, &deferred_subset(model, &eval_set)?)?;
    if eval_pool.is_empty() {
        return Err(RunError::InsufficientDeferrals {
            context: format!("conformal evaluation ({})", est.as_str()),
            got: 0,
            need: 1,
        });
    }
    let mut out = Vec::new();
    for &stat in &config.conformal.statistics {
        let calib = fit_statistic(
            stat,
            &tune,
            &cal,
            config.conformal.alpha,
            &config.conformal.beta_grid,
        )?;
        let sets: Vec<Vec<usize>> = eval_pool
            .iter()
            .map(|e| predict_set(&e.scores, &calib))
            .collect::<Result<_, _>>()?;
        let metrics = coverage_and_size(&sets, &eval_pool)?;
        out.push((stat.as_str().to_string(), calib, metrics));
    }
    Ok(out)
}

/// Examples of `data` that the model's rejector defers.
fn deferred_subset(model: &MlpModel, data: &Dataset) -> Result<Dataset, RunError> {
    let mut kept = Vec::new();
    for ex in &data.examples {
        let out = model.forward(&ex.features)?;
        if reject(&out).target != 0 {
            kept.push(ex.clone());
        }
    }
    Ok(Dataset {
        task: data.task.clone(),
        expert_specs: data.expert_specs.clone(),
        examples: kept,
        split: data.split,
        sample_seed: data.sample_seed,
    })
}

/// Score the test set's deferred pool and split it into the tune and cal
/// halves the conformal procedures are fitted on.
fn deferred_pools(
    model: &MlpModel,
    est: EstimatorKind,
    test_set: &Dataset,
) -> Result<(Vec<ScoredExample>, Vec<ScoredExample>), RunError> {
    let deferred = deferred_subset(model, test_set)?;
    let need = 8;
    if deferred.len() < need {
        return Err(RunError::InsufficientDeferrals {
            context: format!("conformal fitting ({})", est.as_str()),
            got: deferred.len(),
            need,
        });
    }
    let (tune_set, cal_set) = split_conformal_pool(&deferred);
    Ok((
        scored_examples(model, est, &tune_set)?,
        scored_examples(model, est, &cal_set)?,
    ))
}

fn fit_statistic(
    stat: StatisticKind,
    tune: &[ScoredExample],
    cal: &[ScoredExample],
    alpha: f64,
    beta_grid: &[f64],
) -> Result<ConformalCalibration, RunError> {
    Ok(match stat {
        StatisticKind::Naive => calibrate_naive(cal, alpha)?,
        StatisticKind::Regularized => fit_regularized(tune, cal, alpha, beta_grid)?,
    })
}

/// Fit each configured statistic on the test-set deferred pool (split 50/50
/// into tune/cal halves) and measure sets on the eval-set deferred pool.
/// Emits size/coverage rows, fitted-parameter rows, and optionally system
/// accuracy rows for conformal, fixed-k, and single-expert deferral.
#[allow(clippy::too_many_arguments)]
fn conformal_rows(
    ctx: &Ctx,
    model: &MlpModel,
    est: EstimatorKind,
    test_set: &Dataset,
    eval_set: &Dataset,
    sweep: f64,
    fixed_k: Option<usize>,
    with_accuracy: bool,
    rows: &mut Vec<MetricRow>,
) -> Result<(), RunError> {
    let suffix = est.as_str();
    let alpha = ctx.config.conformal.alpha;
    let (tune, cal) = deferred_pools(model, est, test_set)?;
    let eval_pool = scored_examples(model, est, &deferred_subset(model, eval_set)?)?;
    if eval_pool.is_empty() {
        return Err(RunError::InsufficientDeferrals {
            context: format!("conformal evaluation ({suffix})"),
            got: 0,
            need: 1,
        });
    }

    for &stat in &ctx.config.conformal.statistics {
        let calib = fit_statistic(stat, &tune, &cal, alpha, &ctx.config.conformal.beta_grid)?;
        let sets: Vec<Vec<usize>> = eval_pool
            .iter()
            .map(|e| predict_set(&e.scores, &calib))
            .collect::<Result<_, _>>()?;
        let metrics = coverage_and_size(&sets, &eval_pool)?;
        let stat_name = stat.as_str();
        rows.push(MetricRow {
            sweep,
            metric: format!("set_size_{stat_name}_{suffix}"),
            value: metrics.mean_size,
        });
        rows.push(MetricRow {
            sweep,
            metric: format!("coverage_any_{stat_name}_{suffix}"),
            value: metrics.coverage_any_correct,
        });
        if let Some(best) = metrics.coverage_true_best {
            rows.push(MetricRow {
                sweep,
                metric: format!("coverage_best_{stat_name}_{suffix}"),
                value: best,
            });
        }
        match &calib {
            ConformalCalibration::Naive { qhat, .. } => {
                if qhat.is_finite() {
                    rows.push(MetricRow {
                        sweep,
                        metric: format!("qhat_{suffix}"),
                        value: *qhat,
                    });
                }
            }
            ConformalCalibration::Regularized {
                k_reg,
                beta,
                lambda_hat,
                ..
            } => {
                rows.push(MetricRow {
                    sweep,
                    metric: format!("k_reg_{suffix}"),
                    value: *k_reg,
                });
                rows.push(MetricRow {
                    sweep,
                    metric: format!("beta_{suffix}"),
                    value: *beta,
                });
                rows.push(MetricRow {
                    sweep,
                    metric: format!("lambda_{suffix}"),
                    value: *lambda_hat,
                });
            }
        }
        if with_accuracy {
            let report = system_accuracy(model, est, eval_set, &DeferralMode::Conformal(&calib))?;
            rows.push(MetricRow {
                sweep,
                metric: format!("accuracy_conformal_{stat_name}_{suffix}"),
                value: report.overall_accuracy,
            });
            if let Some(size) = report.mean_set_size {
                rows.push(MetricRow {
                    sweep,
                    metric: format!("ensemble_size_{stat_name}_{suffix}"),
                    value: size,
                });
            }
        }
    }

    if with_accuracy {
        let single = system_accuracy(model, est, eval_set, &DeferralMode::SingleExpert)?;
        rows.push(MetricRow {
            sweep,
            metric: format!("accuracy_single_{suffix}"),
            value: single.overall_accuracy,
        });
        if let Some(k) = fixed_k {
            let fixed = system_accuracy(model, est, eval_set, &DeferralMode::FixedK(k))?;
            rows.push(MetricRow {
                sweep,
                metric: format!("accuracy_fixed{k}_{suffix}"),
                value: fixed.overall_accuracy,
            });
        }
    }
    Ok(())
}

fn accuracy_rows(est: EstimatorKind, report: &SystemReport, sweep: f64, rows: &mut Vec<MetricRow>) {
    let suffix = est.as_str();
    rows.push(MetricRow {
        sweep,
        metric: format!("system_accuracy_{suffix}"),
        value: report.overall_accuracy,
    });
    rows.push(MetricRow {
        sweep,
        metric: format!("deferral_rate_{suffix}"),
        value: report.deferral_rate,
    });
}

// ─── Experiment bodies ───────────────────────────────────────────────────────

fn run_train_eval(ctx: &Ctx) -> Result<SeedOutput, RunError> {
    let (train_set, val_set, test_set) = ctx.sample_splits(&ctx.config.experts, 0)?;
    let eval_set = ctx.sample_eval(&ctx.config.experts, 0)?;
    let mut rows = Vec::new();
    let mut checkpoints = Vec::new();
    for &est in &ctx.config.estimators {
        let model = ctx.train_fresh(est, &train_set, &val_set)?;
        let report = system_accuracy(&model, est, &test_set, &DeferralMode::SingleExpert)?;
        accuracy_rows(est, &report, 0.0, &mut rows);
        let (eces, avg) = per_expert_ece(&model, est, &test_set, DEFAULT_NUM_BINS)?;
        rows.push(MetricRow {
            sweep: 0.0,
            metric: format!("avg_ece_{}", est.as_str()),
            value: avg,
        });
        for (j, e) in eces.iter().enumerate() {
            rows.push(MetricRow {
                sweep: 0.0,
                metric: format!("ece_expert{}_{}", j + 1, est.as_str()),
                value: *e,
            });
        }
        // Conformal parts are informative only when the rejector actually
        // defers on this roster; skip them quietly when it does not.
        match conformal_rows(
            ctx, &model, est, &test_set, &eval_set, 0.0, None, true, &mut rows,
        ) {
            Ok(()) => {}
            Err(RunError::InsufficientDeferrals { context, got, .. }) => {
                log::warn!("skipping {context}: {got} deferred examples");
            }
            Err(e) => return Err(e),
        }
        checkpoints.push((format!("model-{}-seed{}", est.as_str(), ctx.seed), model));
    }
    Ok(SeedOutput { rows, checkpoints })
}

fn run_increasing_experts(ctx: &Ctx) -> Result<SeedOutput, RunError> {
    let counts = ctx.config.sweep.expert_counts.as_ref().expect("validated");
    // Seeded roster order: experts enter the pool in a per-seed random order.
    let order = permutation(
        ctx.config.experts.len(),
        &mut stream_rng(
            derived_seed(ctx.seed, TAG_ROSTER),
            StreamDomain::Scratch,
            0,
            0,
        ),
    );
    let roster: Vec<ExpertSpec> = order
        .iter()
        .map(|&i| ctx.config.experts[i].clone())
        .collect();

    let (train_full, val_full, test_full) = ctx.sample_splits(&roster, 0)?;
    let mut rows = Vec::new();
    let mut checkpoints = Vec::new();
    let mut prev: Vec<Option<(usize, MlpModel)>> = vec![None; ctx.config.estimators.len()];

    for &count in counts {
        let train_set = train_full.with_expert_prefix(count);
        let val_set = val_full.with_expert_prefix(count);
        let test_set = test_full.with_expert_prefix(count);
        for (ei, &est) in ctx.config.estimators.iter().enumerate() {
            let model = match &prev[ei] {
                // Grow the trained pool: keep all weights, append deferral
                // heads for the new experts, continue training.
                Some((prev_count, base)) => {
                    ctx.retrain_grown(base, count - prev_count, &train_set, &val_set)?
                }
                None => ctx.train_fresh(est, &train_set, &val_set)?,
            };
            let report = system_accuracy(&model, est, &test_set, &DeferralMode::SingleExpert)?;
            accuracy_rows(est, &report, count as f64, &mut rows);
            let (_, avg) = per_expert_ece(&model, est, &test_set, DEFAULT_NUM_BINS)?;
            rows.push(MetricRow {
                sweep: count as f64,
                metric: format!("avg_ece_{}", est.as_str()),
                value: avg,
            });
            checkpoints.push((
                format!("model-{}-experts{}-seed{}", est.as_str(), count, ctx.seed),
                model.clone(),
            ));
            prev[ei] = Some((count, model));
        }
    }
    Ok(SeedOutput { rows, checkpoints })
}

/// Roster for the dependence simulation: one uniformly random expert first,
/// then `num_support` experts correct with probability `p` on the leading
/// `expertise` classes and at chance elsewhere.
fn dependence_roster(k: usize, num_support: usize, expertise: usize, p: f64) -> Vec<ExpertSpec> {
    let mut specs = vec![ExpertSpec::new(ExpertKind::UniformRandom, 9000)];
    let chance = 1.0 / k as f64;
    for e in 0..num_support {
        let correct_prob = (0..k)
            .map(|c| if c < expertise { p } else { chance })
            .collect();
        specs.push(ExpertSpec::new(
            ExpertKind::ClasswiseProb { correct_prob },
            9001 + e as u64,
        ));
    }
    specs
}

fn run_expert_dependence(ctx: &Ctx) -> Result<SeedOutput, RunError> {
    let k = ctx.task.num_classes;
    let probs = ctx
        .config
        .sweep
        .correctness_probs
        .as_ref()
        .expect("validated");
    let expertise = ctx.config.sweep.expertise_classes.unwrap_or(k.div_ceil(2));
    let num_support = ctx.config.sweep.num_support_experts.unwrap_or(3);

    let mut rows = Vec::new();
    let mut checkpoints = Vec::new();
    for (pi, &p) in probs.iter().enumerate() {
        let roster = dependence_roster(k, num_support, expertise, p);
        let (train_set, val_set, test_set) = ctx.sample_splits(&roster, pi as u64)?;
        for &est in &ctx.config.estimators {
            let model = ctx.train_fresh(est, &train_set, &val_set)?;
            let (eces, avg) = per_expert_ece(&model, est, &test_set, DEFAULT_NUM_BINS)?;
            rows.push(MetricRow {
                sweep: p,
                metric: format!("avg_ece_{}", est.as_str()),
                value: avg,
            });
            rows.push(MetricRow {
                sweep: p,
                metric: format!("random_expert_ece_{}", est.as_str()),
                value: eces[0],
            });
            let report = system_accuracy(&model, est, &test_set, &DeferralMode::SingleExpert)?;
            accuracy_rows(est, &report, p, &mut rows);
            checkpoints.push((
                format!(
                    "model-{}-p{:03}-seed{}",
                    est.as_str(),
                    (p * 100.0) as u32,
                    ctx.seed
                ),
                model,
            ));
        }
    }
    Ok(SeedOutput { rows, checkpoints })
}

/// Roster for the oracle experiments: `oracles` experts correct everywhere,
/// the rest wrong everywhere (or uniformly random under noise).
fn oracle_roster(k: usize, total: usize, oracles: usize, with_noise: bool) -> Vec<ExpertSpec> {
    (0..total)
        .map(|e| {
            let kind = if e < oracles {
                ExpertKind::OracleSubset {
                    oracle_classes: (0..k).collect(),
                    off_subset: OffSubsetBehavior::AlwaysWrong,
                }
            } else {
                ExpertKind::OracleSubset {
                    oracle_classes: BTreeSet::new(),
                    off_subset: if with_noise {
                        OffSubsetBehavior::UniformOverAll
                    } else {
                        OffSubsetBehavior::AlwaysWrong
                    },
                }
            };
            ExpertSpec::new(kind, 7000 + e as u64)
        })
        .collect()
}

fn run_oracle_identification(ctx: &Ctx) -> Result<SeedOutput, RunError> {
    let k = ctx.task.num_classes;
    let total = ctx.config.sweep.num_experts.unwrap_or(10);
    let with_noise = ctx.config.sweep.with_noise.unwrap_or(false);
    let counts = ctx.config.sweep.oracle_counts.as_ref().expect("validated");

    let mut rows = Vec::new();
    let mut checkpoints = Vec::new();
    for &oracles in counts {
        let roster = oracle_roster(k, total, oracles, with_noise);
        let (train_set, val_set, test_set) = ctx.sample_splits(&roster, oracles as u64)?;
        let eval_set = ctx.sample_eval(&roster, oracles as u64)?;
        for &est in &ctx.config.estimators {
            let model = ctx.train_fresh(est, &train_set, &val_set)?;
            conformal_rows(
                ctx,
                &model,
                est,
                &test_set,
                &eval_set,
                oracles as f64,
                None,
                false,
                &mut rows,
            )?;
            let report = system_accuracy(&model, est, &test_set, &DeferralMode::SingleExpert)?;
            rows.push(MetricRow {
                sweep: oracles as f64,
                metric: format!("deferral_rate_{}", est.as_str()),
                value: report.deferral_rate,
            });
            checkpoints.push((
                format!("model-{}-oracles{}-seed{}", est.as_str(), oracles, ctx.seed),
                model,
            ));
        }
    }
    Ok(SeedOutput { rows, checkpoints })
}

fn run_conformal_ensemble(ctx: &Ctx) -> Result<SeedOutput, RunError> {
    let k = ctx.task.num_classes;
    let total = ctx.config.sweep.num_experts.unwrap_or(10);
    let with_noise = ctx.config.sweep.with_noise.unwrap_or(false);
    let fixed_k = ctx.config.sweep.fixed_k.unwrap_or(5);
    let counts = ctx.config.sweep.oracle_counts.as_ref().expect("validated");

    let mut rows = Vec::new();
    let mut checkpoints = Vec::new();
    for &oracles in counts {
        let roster = oracle_roster(k, total, oracles, with_noise);
        let (train_set, val_set, test_set) = ctx.sample_splits(&roster, oracles as u64)?;
        let eval_set = ctx.sample_eval(&roster, oracles as u64)?;
        for &est in &ctx.config.estimators {
            let model = ctx.train_fresh(est, &train_set, &val_set)?;
            conformal_rows(
                ctx,
                &model,
                est,
                &test_set,
                &eval_set,
                oracles as f64,
                Some(fixed_k),
                true,
                &mut rows,
            )?;
            checkpoints.push((
                format!("model-{}-oracles{}-seed{}", est.as_str(), oracles, ctx.seed),
                model,
            ));
        }
    }
    Ok(SeedOutput { rows, checkpoints })
}

/// Roster for the overlap sweep: expert `j` is an oracle exactly on class
/// `j` and otherwise correct with the overlap probability.
fn overlap_roster(k: usize, overlap: f64) -> Vec<ExpertSpec> {
    (0..k)
        .map(|e| {
            ExpertSpec::new(
                ExpertKind::OracleSubset {
                    oracle_classes: [e].into_iter().collect(),
                    off_subset: OffSubsetBehavior::CorrectWithProb { p: overlap },
                },
                8000 + e as u64,
            )
        })
        .collect()
}

fn run_overlap_sweep(ctx: &Ctx) -> Result<SeedOutput, RunError> {
    let k = ctx.task.num_classes;
    let fixed_k = ctx.config.sweep.fixed_k.unwrap_or(5.min(k));
    let probs = ctx.config.sweep.overlap_probs.as_ref().expect("validated");

    let mut rows = Vec::new();
    let mut checkpoints = Vec::new();
    for (pi, &overlap) in probs.iter().enumerate() {
        let roster = overlap_roster(k, overlap);
        let (train_set, val_set, test_set) = ctx.sample_splits(&roster, pi as u64)?;
        let eval_set = ctx.sample_eval(&roster, pi as u64)?;
        for &est in &ctx.config.estimators {
            let model = ctx.train_fresh(est, &train_set, &val_set)?;
            conformal_rows(
                ctx,
                &model,
                est,
                &test_set,
                &eval_set,
                overlap,
                Some(fixed_k),
                true,
                &mut rows,
            )?;
            checkpoints.push((
                format!(
                    "model-{}-overlap{:03}-seed{}",
                    est.as_str(),
                    (overlap * 100.0) as u32,
                    ctx.seed
                ),
                model,
            ));
        }
    }
    Ok(SeedOutput { rows, checkpoints })
}

/// Run one seed of the configured experiment.
pub fn run_seed(config: &ExperimentConfig, seed: u64) -> Result<SeedOutput, RunError> {
    let task = config
        .task
        .build()
        .map_err(|e| RunError::Synth(SynthError::InvalidConfig(e.to_string())))?;
    let ctx = Ctx { config, task, seed };
    let result = match config.experiment {
        ExperimentKind::TrainEval => run_train_eval(&ctx),
        ExperimentKind::IncreasingExperts => run_increasing_experts(&ctx),
        ExperimentKind::ExpertDependence => run_expert_dependence(&ctx),
        ExperimentKind::OracleIdentification => run_oracle_identification(&ctx),
        ExperimentKind::ConformalEnsemble => run_conformal_ensemble(&ctx),
        ExperimentKind::OverlapSweep => run_overlap_sweep(&ctx),
    };
    result.map_err(|source| RunError::Seed {
        experiment: config.experiment.as_str().to_string(),
        seed,
        source: Box::new(source),
    })
}

/// Run every seed (optionally in parallel), aggregate in seed order, and
/// write `summary.json`, `metrics.csv`, `timing.json`, and per-run
/// checkpoints under `out_dir`.
pub fn run_experiment(
    config: &ExperimentConfig,
    out_dir: &Path,
    threads: usize,
    preset: Option<(&str, u64)>,
) -> Result<Summary, RunError> {
    let started = std::time::Instant::now();
    std::fs::create_dir_all(out_dir).map_err(|source| RunError::Io {
        path: out_dir.to_path_buf(),
        source,
    })?;

    let seeds = &config.seeds;
    let mut outputs: Vec<Option<SeedOutput>> = Vec::with_capacity(seeds.len());
    outputs.resize_with(seeds.len(), || None);

    if threads <= 1 || seeds.len() <= 1 {
        for (i, &seed) in seeds.iter().enumerate() {
            log::info!("running seed {seed}");
            outputs[i] = Some(run_seed(config, seed)?);
        }
    } else {
        let next = AtomicUsize::new(0);
        let slots = Mutex::new(&mut outputs);
        let first_error: Mutex<Option<RunError>> = Mutex::new(None);
        std::thread::scope(|scope| {
            for _ in 0..threads.min(seeds.len()) {
                scope.spawn(|| loop {
                    let i = next.fetch_add(1, Ordering::SeqCst);
                    if i >= seeds.len() {
                        break;
                    }
                    log::info!("running seed {}", seeds[i]);
                    match run_seed(config, seeds[i]) {
                        Ok(out) => {
                            slots.lock().unwrap()[i] = Some(out);
                        }
                        Err(e) => {
                            let mut guard = first_error.lock().unwrap();
                            if guard.is_none() {
                                *guard = Some(e);
                            }
                            break;
                        }
                    }
                });
            }
        });
        if let Some(e) = first_error.into_inner().unwrap() {
            return Err(e);
        }
    }
    let outputs: Vec<SeedOutput> = outputs
        .into_iter()
        .map(|o| o.expect("all seeds completed"))
        .collect();

    // Checkpoints, written in seed order from the main thread.
    let ckpt_dir = out_dir.join("checkpoints");
    std::fs::create_dir_all(&ckpt_dir).map_err(|source| RunError::Io {
        path: ckpt_dir.clone(),
        source,
    })?;
    for out in &outputs {
        for (stem, model) in &out.checkpoints {
            let tmp = ckpt_dir.join(format!("{stem}.ckpt.tmp"));
            save_model(model, &tmp)?;
            let final_path = ckpt_dir.join(format!("{stem}.ckpt"));
            std::fs::rename(&tmp, &final_path).map_err(|source| RunError::Io {
                path: final_path,
                source,
            })?;
        }
    }

    let rows_per_seed: Vec<Vec<MetricRow>> = outputs.into_iter().map(|o| o.rows).collect();
    let mut echo = config.clone();
    echo.out_dir = None;
    let summary = Summary {
        experiment: config.experiment.as_str().to_string(),
        preset: preset.map(|(name, _)| name.to_string()),
        budget_seconds: preset.map(|(_, budget)| budget),
        seeds: seeds.clone(),
        metrics: aggregate(&rows_per_seed),
        config: echo,
    };
    write_summary(&out_dir.join("summary.json"), &summary)?;
    write_metrics_csv(
        &out_dir.join("metrics.csv"),
        config.experiment.as_str(),
        seeds,
        &rows_per_seed,
    )?;
    write_timing(
        &out_dir.join("timing.json"),
        &Timing {
            wall_clock_seconds: started.elapsed().as_secs_f64(),
            budget_seconds: preset.map(|(_, b)| b),
        },
    )?;
    Ok(summary)
}
