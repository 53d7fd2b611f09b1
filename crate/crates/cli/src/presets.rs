//! Named experiment presets: desk-scale replications of the simulation
//! suites, runnable via `l2d repro <name>`.

use l2d_core::deferral::EstimatorKind;
use l2d_core::synth::{ExpertKind, ExpertSpec, OffSubsetBehavior, StdSpec};

use crate::config::{
    ConformalSection, DataSection, ExperimentConfig, ExperimentKind, SweepSection, TaskSection,
    TrainSection,
};

#[derive(Debug, Clone)]
pub struct Preset {
    pub name: &'static str,
    pub description: &'static str,
    /// Wall-clock budget this preset is expected to finish within on a
    /// commodity CPU.
    pub budget_seconds: u64,
    pub config: ExperimentConfig,
}

/// Class means evenly spaced on a circle; adjacent classes overlap enough
/// that the classifier stays imperfect and deferral stays interesting.
fn circle_means(num_classes: usize, radius: f64) -> Vec<Vec<f64>> {
    (0..num_classes)
        .map(|c| {
            let theta = 2.0 * std::f64::consts::PI * c as f64 / num_classes as f64;
            vec![radius * theta.cos(), radius * theta.sin()]
        })
        .collect()
}

fn ten_class_task() -> TaskSection {
    TaskSection {
        dim: 2,
        num_classes: 10,
        means: Some(circle_means(10, 2.2)),
        mean_range: 3.0,
        std: StdSpec::Shared(0.75),
        priors: None,
        seed: 0,
    }
}

fn default_train(epochs: usize) -> TrainSection {
    TrainSection {
        epochs,
        batch_size: 128,
        learning_rate: 0.05,
        momentum: 0.9,
        hidden_sizes: vec![64],
        shuffle: true,
    }
}

/// Longer, hotter schedule for the oracle experiments: the deferral heads
/// of always-correct experts need well-saturated scores before the
/// regularized sets recover the full roster.
fn oracle_train() -> TrainSection {
    TrainSection {
        learning_rate: 0.1,
        ..default_train(60)
    }
}

/// Data shape the oracle experiments were validated with; the moderate test
/// split keeps the conformal tune/cal pools at the size the set-size bands
/// were measured on.
fn oracle_data() -> DataSection {
    DataSection {
        n_train: 6000,
        n_val: 1500,
        n_test: 1500,
        n_eval: 2000,
    }
}

fn default_data() -> DataSection {
    // 60/20/20 train/val/test.
    DataSection {
        n_train: 6000,
        n_val: 2000,
        n_test: 2000,
        n_eval: 2000,
    }
}

fn both_estimators() -> Vec<EstimatorKind> {
    vec![EstimatorKind::Softmax, EstimatorKind::Ova]
}

fn classwise(probs: Vec<f64>, seed: u64) -> ExpertSpec {
    ExpertSpec::new(
        ExpertKind::ClasswiseProb {
            correct_prob: probs,
        },
        seed,
    )
}

fn banded(k: usize, lo_classes: std::ops::Range<usize>, p_in: f64, p_out: f64) -> Vec<f64> {
    (0..k)
        .map(|c| if lo_classes.contains(&c) { p_in } else { p_out })
        .collect()
}

/// Sixteen heterogeneous experts for the growing-pool experiment.
fn mixed_roster(k: usize) -> Vec<ExpertSpec> {
    let chance = 1.0 / k as f64;
    let mut roster = vec![
        classwise(vec![0.95; k], 100),
        classwise(banded(k, 0..5, 0.85, chance), 101),
        ExpertSpec::new(
            ExpertKind::OracleSubset {
                oracle_classes: (0..4).collect(),
                off_subset: OffSubsetBehavior::UniformOverAll,
            },
            102,
        ),
        ExpertSpec::new(
            ExpertKind::Flip {
                base: Box::new(ExpertKind::ClasswiseProb {
                    correct_prob: vec![0.9; k],
                }),
                flip_prob: 0.2,
            },
            103,
        ),
        ExpertSpec::new(ExpertKind::UniformRandom, 104),
        classwise(vec![0.7; k], 105),
        ExpertSpec::new(
            ExpertKind::OracleSubset {
                oracle_classes: (5..k).collect(),
                off_subset: OffSubsetBehavior::AlwaysWrong,
            },
            106,
        ),
        ExpertSpec::new(
            ExpertKind::Flip {
                base: Box::new(ExpertKind::OracleSubset {
                    oracle_classes: (0..5).collect(),
                    off_subset: OffSubsetBehavior::UniformOverAll,
                }),
                flip_prob: 0.1,
            },
            107,
        ),
        classwise(banded(k, 5..10, 0.6, 0.15), 108),
        classwise((0..k).map(|c| 0.9 - 0.05 * c as f64).collect(), 109),
        ExpertSpec::new(ExpertKind::UniformRandom, 110),
        ExpertSpec::new(
            ExpertKind::Flip {
                base: Box::new(ExpertKind::ClasswiseProb {
                    correct_prob: vec![0.95; k],
                }),
                flip_prob: 0.5,
            },
            111,
        ),
        ExpertSpec::new(
            ExpertKind::OracleSubset {
                oracle_classes: [2, 3, 4].into_iter().collect(),
                off_subset: OffSubsetBehavior::CorrectWithProb { p: 0.3 },
            },
            112,
        ),
        classwise(vec![0.4; k], 113),
        ExpertSpec::new(
            ExpertKind::OracleSubset {
                oracle_classes: (0..9).collect(),
                off_subset: OffSubsetBehavior::UniformOverAll,
            },
            114,
        ),
        ExpertSpec::new(
            ExpertKind::Flip {
                base: Box::new(ExpertKind::UniformRandom),
                flip_prob: 0.3,
            },
            115,
        ),
    ];
    roster.truncate(16);
    roster
}

fn base_config(experiment: ExperimentKind) -> ExperimentConfig {
    ExperimentConfig {
        experiment,
        task: ten_class_task(),
        experts: Vec::new(),
        data: default_data(),
        train: default_train(25),
        estimators: both_estimators(),
        conformal: ConformalSection::default(),
        sweep: SweepSection::default(),
        seeds: vec![1, 2, 3],
        out_dir: None,
    }
}

pub fn preset_names() -> Vec<&'static str> {
    vec![
        "train-eval",
        "increasing-experts",
        "expert-dependence",
        "oracle-id-clean",
        "oracle-id-noisy",
        "conformal-vs-fixed",
        "overlap-sweep",
    ]
}

pub fn get_preset(name: &str) -> Option<Preset> {
    let preset = match name {
        "train-eval" => Preset {
            name: "train-eval",
            description: "Train both surrogates on a 3-class task with two \
                          complementary experts; report accuracy, calibration, \
                          and conformal metrics once.",
            budget_seconds: 120,
            config: ExperimentConfig {
                task: TaskSection {
                    dim: 2,
                    num_classes: 3,
                    means: Some(circle_means(3, 2.0)),
                    mean_range: 3.0,
                    std: StdSpec::Shared(0.9),
                    priors: None,
                    seed: 0,
                },
                experts: vec![
                    classwise(vec![0.9, 0.9, 0.2], 11),
                    classwise(vec![0.2, 0.3, 0.95], 12),
                ],
                data: DataSection {
                    n_train: 3000,
                    n_val: 1000,
                    n_test: 1000,
                    n_eval: 1000,
                },
                train: default_train(30),
                ..base_config(ExperimentKind::TrainEval)
            },
        },
        "increasing-experts" => Preset {
            name: "increasing-experts",
            description: "Grow the expert pool from 2 to 16 by seeded draws \
                          from a heterogeneous roster; track system accuracy \
                          and average ECE for both surrogates.",
            budget_seconds: 600,
            config: ExperimentConfig {
                experts: mixed_roster(10),
                sweep: SweepSection {
                    expert_counts: Some(vec![2, 4, 6, 8, 10, 12, 14, 16]),
                    ..SweepSection::default()
                },
                ..base_config(ExperimentKind::IncreasingExperts)
            },
        },
        "expert-dependence" => Preset {
            name: "expert-dependence",
            description: "One uniformly random expert next to three experts \
                          whose correctness sweeps 0.2 to 0.95 on the first \
                          five classes; track how each estimator's ECE \
                          responds.",
            budget_seconds: 600,
            config: ExperimentConfig {
                train: default_train(40),
                sweep: SweepSection {
                    correctness_probs: Some(vec![0.2, 0.4, 0.6, 0.8, 0.95]),
                    expertise_classes: Some(5),
                    num_support_experts: Some(3),
                    ..SweepSection::default()
                },
                ..base_config(ExperimentKind::ExpertDependence)
            },
        },
        "oracle-id-clean" => Preset {
            name: "oracle-id-clean",
            description: "1 to 10 everywhere-oracles among 10 experts, the \
                          rest always wrong; compare naive and regularized \
                          conformal set sizes against the oracle count.",
            budget_seconds: 600,
            config: ExperimentConfig {
                train: oracle_train(),
                data: oracle_data(),
                sweep: SweepSection {
                    oracle_counts: Some((1..=10).collect()),
                    num_experts: Some(10),
                    with_noise: Some(false),
                    ..SweepSection::default()
                },
                ..base_config(ExperimentKind::OracleIdentification)
            },
        },
        "oracle-id-noisy" => Preset {
            name: "oracle-id-noisy",
            description: "Like oracle-id-clean but non-oracles guess \
                          uniformly, which inflates the naive statistic.",
            budget_seconds: 600,
            config: ExperimentConfig {
                train: oracle_train(),
                data: oracle_data(),
                sweep: SweepSection {
                    oracle_counts: Some((1..=10).collect()),
                    num_experts: Some(10),
                    with_noise: Some(true),
                    ..SweepSection::default()
                },
                ..base_config(ExperimentKind::OracleIdentification)
            },
        },
        "conformal-vs-fixed" => Preset {
            name: "conformal-vs-fixed",
            description: "System accuracy of conformal ensembles against the \
                          fixed top-5 baseline as the number of oracles \
                          grows; fixed-size voting collapses below 3 oracles.",
            budget_seconds: 600,
            config: ExperimentConfig {
                train: oracle_train(),
                data: oracle_data(),
                sweep: SweepSection {
                    oracle_counts: Some(vec![1, 2, 3, 4, 5]),
                    num_experts: Some(10),
                    with_noise: Some(false),
                    fixed_k: Some(5),
                    ..SweepSection::default()
                },
                ..base_config(ExperimentKind::ConformalEnsemble)
            },
        },
        "overlap-sweep" => Preset {
            name: "overlap-sweep",
            description: "Ten experts, each an oracle on exactly one class, \
                          with off-specialty correctness sweeping from 0.1 to \
                          0.95; set sizes should grow from one toward the \
                          full roster.",
            budget_seconds: 900,
            config: ExperimentConfig {
                sweep: SweepSection {
                    overlap_probs: Some(vec![0.1, 0.25, 0.5, 0.75, 0.95]),
                    fixed_k: Some(5),
                    ..SweepSection::default()
                },
                ..base_config(ExperimentKind::OverlapSweep)
            },
        },
        _ => return None,
    };
    Some(preset)
}
