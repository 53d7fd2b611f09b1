//! Cross-module checks tying the decision rules to the synthetic ground
//! truth: logits built from the known posterior and expert-correctness
//! profile must route exactly like the reference rule, and a trained system
//! must approach it.

use l2d_core::deferral::{
    bayes_reference_decision, optimal_softmax_logits, reject, softmax_expert_confidence,
};
use l2d_core::loss::LossKind;
use l2d_core::model::{init_model, routed_accuracy, train, TrainConfig};
use l2d_core::synth::{
    generate_task, marginal_expert_correctness, sample_dataset, ExpertKind, ExpertSpec, StdSpec,
    TaskConfig,
};

/// A heavily overlapping task (weak classifier) with experts that clearly
/// dominate it on their specialty classes, so routing is genuinely useful.
fn three_class_task() -> (l2d_core::synth::SyntheticTask, Vec<ExpertSpec>) {
    let config = TaskConfig {
        dim: 2,
        num_classes: 3,
        means: Some(vec![vec![2.0, 0.0], vec![-1.0, 1.7], vec![-1.0, -1.7]]),
        mean_range: 3.0,
        std: StdSpec::Shared(1.4),
        priors: Some(vec![0.5, 0.3, 0.2]),
    };
    let task = generate_task(&config, 0).unwrap();
    let experts = vec![
        ExpertSpec::new(
            ExpertKind::ClasswiseProb {
                correct_prob: vec![0.95, 0.9, 0.15],
            },
            21,
        ),
        ExpertSpec::new(
            ExpertKind::ClasswiseProb {
                correct_prob: vec![0.25, 0.3, 0.97],
            },
            22,
        ),
    ];
    (task, experts)
}

#[test]
fn optimality_condition_logits_route_like_the_reference_rule() {
    let (task, experts) = three_class_task();
    let data = sample_dataset(&task, &experts, 3000, 77).unwrap();
    for ex in &data.examples {
        let posterior = task.class_posterior(&ex.features).unwrap();
        let probs: Vec<f64> = experts
            .iter()
            .map(|s| marginal_expert_correctness(&task, s, &ex.features).unwrap())
            .collect();
        let outputs = optimal_softmax_logits(&posterior, &probs);
        let decision = reject(&outputs);
        let reference = bayes_reference_decision(&task, &experts, &ex.features).unwrap();
        assert_eq!(decision, reference, "x = {:?}", ex.features);
        // The same construction feeds the estimator, which must hand the
        // correctness probabilities back.
        let conf = softmax_expert_confidence(&outputs);
        for (got, want) in conf.raw_values.iter().zip(&probs) {
            assert!((got - want).abs() < 1e-9);
        }
    }
}

#[test]
fn trained_system_beats_classifier_only_routing() {
    let (task, experts) = three_class_task();
    let train_set = sample_dataset(&task, &experts, 4000, 1).unwrap();
    let val_set = sample_dataset(&task, &experts, 800, 2).unwrap();
    let test_set = sample_dataset(&task, &experts, 2000, 3).unwrap();
    let config = TrainConfig {
        epochs: 30,
        batch_size: 128,
        learning_rate: 0.05,
        momentum: 0.9,
        seed: 4,
        shuffle: true,
    };

    for kind in [LossKind::Softmax, LossKind::Ova] {
        let mut model = init_model(2, &[64], 3, 2, kind, 9).unwrap();
        train(&mut model, &train_set, &val_set, &config).unwrap();
        let routed = routed_accuracy(&model, &test_set).unwrap();

        // Classifier-only baseline: best class logit against the label.
        let mut classifier_only = 0usize;
        for ex in &test_set.examples {
            let out = model.forward(&ex.features).unwrap();
            if l2d_core::deferral::classify(&out) == ex.label {
                classifier_only += 1;
            }
        }
        let baseline = classifier_only as f64 / test_set.len() as f64;
        assert!(
            routed > baseline,
            "{kind:?}: routed {routed} should beat classifier-only {baseline}"
        );
    }
}
