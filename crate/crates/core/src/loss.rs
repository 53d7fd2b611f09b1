//! Point-wise multi-expert deferral surrogate losses and their analytic
//! gradients.
//!
//! Two parameterizations over the K class logits and J deferral logits:
//!
//! - **Softmax**: cross-entropy over the K+J augmented slots, with one extra
//!   log-softmax term per *correct* expert. Convex in the logits.
//! - **One-vs-all (OvA)**: a logistic loss per slot; the deferral slot for
//!   expert j is trained toward the binary target "expert j is correct".
//!   Fully separable across slots.
//!
//! Both reduce exactly (same floating-point expression ordering) to their
//! single-expert forms when J = 1.

use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum LossError {
    #[error("logit at slot {0} is not finite")]
    NonFiniteLogit(usize),
    #[error("label {label} outside [0, {num_classes})")]
    LabelOutOfRange { label: usize, num_classes: usize },
    #[error("expert flags have length {got}, expected {want}")]
    FlagLengthMismatch { got: usize, want: usize },
    #[error("operation requires exactly one expert, got {0}")]
    SingleExpertOnly(usize),
}

/// Which surrogate a model is trained with.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    Softmax,
    Ova,
}

impl LossKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            LossKind::Softmax => "softmax",
            LossKind::Ova => "ova",
        }
    }
}

/// Raw model outputs for one input: K class logits and J deferral logits.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelOutputs {
    pub class_logits: Vec<f64>,
    pub deferral_logits: Vec<f64>,
}

impl ModelOutputs {
    pub fn new(class_logits: Vec<f64>, deferral_logits: Vec<f64>) -> Self {
        Self {
            class_logits,
            deferral_logits,
        }
    }

    pub fn num_classes(&self) -> usize {
        self.class_logits.len()
    }

    pub fn num_experts(&self) -> usize {
        self.deferral_logits.len()
    }

    /// All K+J logits in slot order (classes first, then deferral).
    pub fn all_logits(&self) -> impl Iterator<Item = f64> + '_ {
        self.class_logits
            .iter()
            .chain(self.deferral_logits.iter())
            .copied()
    }

    fn check_finite(&self) -> Result<(), LossError> {
        if let Some(i) = self.all_logits().position(|g| !g.is_finite()) {
            return Err(LossError::NonFiniteLogit(i));
        }
        Ok(())
    }
}

/// Training target for one input: the label and per-expert correctness flags.
#[derive(Debug, Clone, PartialEq)]
pub struct SupervisionSignal {
    pub label: usize,
    /// `expert_correct[j]` is the indicator that expert j predicted the label.
    pub expert_correct: Vec<bool>,
}

impl SupervisionSignal {
    pub fn new(label: usize, expert_correct: Vec<bool>) -> Self {
        Self {
            label,
            expert_correct,
        }
    }
}

fn check_shapes(outputs: &ModelOutputs, sup: &SupervisionSignal) -> Result<(), LossError> {
    outputs.check_finite()?;
    if sup.label >= outputs.num_classes() {
        return Err(LossError::LabelOutOfRange {
            label: sup.label,
            num_classes: outputs.num_classes(),
        });
    }
    if sup.expert_correct.len() != outputs.num_experts() {
        return Err(LossError::FlagLengthMismatch {
            got: sup.expert_correct.len(),
            want: outputs.num_experts(),
        });
    }
    Ok(())
}

// ─── Binary logistic surrogate ───────────────────────────────────────────────

/// Logistic loss `log(1 + exp(-z))`, stable over the whole f64 range.
pub fn logistic_phi(z: f64) -> f64 {
    if z >= 0.0 {
        (-z).exp().ln_1p()
    } else {
        -z + z.exp().ln_1p()
    }
}

/// Logistic sigmoid `1 / (1 + exp(-z))`, stable for large |z|.
pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Log-sum-exp of the K+J logits with max-shift stabilization.
fn log_sum_exp(outputs: &ModelOutputs) -> f64 {
    let max = outputs.all_logits().fold(f64::NEG_INFINITY, f64::max);
    let sum: f64 = outputs.all_logits().map(|g| (g - max).exp()).sum();
    max + sum.ln()
}

/// Softmax over the K+J slots (classes first, then deferral).
pub fn augmented_softmax(outputs: &ModelOutputs) -> Vec<f64> {
    let max = outputs.all_logits().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = outputs.all_logits().map(|g| (g - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

// ─── Softmax surrogate ───────────────────────────────────────────────────────

/// Softmax deferral loss: the negative log-softmax of the label slot plus,
/// for each correct expert, the negative log-softmax of that deferral slot.
pub fn softmax_l2d_loss(outputs: &ModelOutputs, sup: &SupervisionSignal) -> Result<f64, LossError> {
    check_shapes(outputs, sup)?;
    let lse = log_sum_exp(outputs);
    let mut loss = lse - outputs.class_logits[sup.label];
    for (j, &correct) in sup.expert_correct.iter().enumerate() {
        if correct {
            loss += lse - outputs.deferral_logits[j];
        }
    }
    Ok(loss)
}

/// Gradient of [`softmax_l2d_loss`] over all K+J logits (classes first).
///
/// With c = 1 + (number of correct experts), slot i gets
/// `c * softmax_i - [i == label] - [i is a correct expert's deferral slot]`.
/// Components sum to zero.
pub fn softmax_l2d_grad(
    outputs: &ModelOutputs,
    sup: &SupervisionSignal,
) -> Result<Vec<f64>, LossError> {
    check_shapes(outputs, sup)?;
    let k = outputs.num_classes();
    let c = 1.0 + sup.expert_correct.iter().filter(|&&f| f).count() as f64;
    let mut grad: Vec<f64> = augmented_softmax(outputs).iter().map(|&p| c * p).collect();
    grad[sup.label] -= 1.0;
    for (j, &correct) in sup.expert_correct.iter().enumerate() {
        if correct {
            grad[k + j] -= 1.0;
        }
    }
    Ok(grad)
}

// ─── One-vs-all surrogate ────────────────────────────────────────────────────

/// OvA deferral loss with the logistic binary surrogate: a positive logistic
/// term for the label slot, negative terms for the other class slots, and a
/// per-expert binary term targeting that expert's correctness.
pub fn ova_l2d_loss(outputs: &ModelOutputs, sup: &SupervisionSignal) -> Result<f64, LossError> {
    check_shapes(outputs, sup)?;
    let mut loss = 0.0;
    for (k, &g) in outputs.class_logits.iter().enumerate() {
        if k == sup.label {
            loss += logistic_phi(g);
        } else {
            loss += logistic_phi(-g);
        }
    }
    for &g in &outputs.deferral_logits {
        loss += logistic_phi(-g);
    }
    for (j, &correct) in sup.expert_correct.iter().enumerate() {
        if correct {
            let g = outputs.deferral_logits[j];
            loss += logistic_phi(g) - logistic_phi(-g);
        }
    }
    Ok(loss)
}

/// Gradient of [`ova_l2d_loss`] over all K+J logits (classes first).
///
/// Label slot: `-sigmoid(-g)`; other class slots: `sigmoid(g)`; deferral slot
/// j: `-sigmoid(-g)` when expert j is correct, `sigmoid(g)` otherwise.
pub fn ova_l2d_grad(
    outputs: &ModelOutputs,
    sup: &SupervisionSignal,
) -> Result<Vec<f64>, LossError> {
    check_shapes(outputs, sup)?;
    let k = outputs.num_classes();
    let j = outputs.num_experts();
    let mut grad = Vec::with_capacity(k + j);
    for (i, &g) in outputs.class_logits.iter().enumerate() {
        if i == sup.label {
            grad.push(-sigmoid(-g));
        } else {
            grad.push(sigmoid(g));
        }
    }
    for (jj, &g) in outputs.deferral_logits.iter().enumerate() {
        if sup.expert_correct[jj] {
            grad.push(-sigmoid(-g));
        } else {
            grad.push(sigmoid(g));
        }
    }
    Ok(grad)
}

/// Dispatch on [`LossKind`].
pub fn l2d_loss(
    kind: LossKind,
    outputs: &ModelOutputs,
    sup: &SupervisionSignal,
) -> Result<f64, LossError> {
    match kind {
        LossKind::Softmax => softmax_l2d_loss(outputs, sup),
        LossKind::Ova => ova_l2d_loss(outputs, sup),
    }
}

/// Dispatch on [`LossKind`].
pub fn l2d_grad(
    kind: LossKind,
    outputs: &ModelOutputs,
    sup: &SupervisionSignal,
) -> Result<Vec<f64>, LossError> {
    match kind {
        LossKind::Softmax => softmax_l2d_grad(outputs, sup),
        LossKind::Ova => ova_l2d_grad(outputs, sup),
    }
}

// ─── Single-expert reductions ────────────────────────────────────────────────

/// The classic single-expert softmax deferral loss, written in its own terms.
/// Requires J = 1.
pub fn softmax_single_expert_loss(
    outputs: &ModelOutputs,
    sup: &SupervisionSignal,
) -> Result<f64, LossError> {
    if outputs.num_experts() != 1 {
        return Err(LossError::SingleExpertOnly(outputs.num_experts()));
    }
    check_shapes(outputs, sup)?;
    let lse = log_sum_exp(outputs);
    let mut loss = lse - outputs.class_logits[sup.label];
    if sup.expert_correct[0] {
        loss += lse - outputs.deferral_logits[0];
    }
    Ok(loss)
}

/// The classic single-expert OvA deferral loss. Requires J = 1.
pub fn ova_single_expert_loss(
    outputs: &ModelOutputs,
    sup: &SupervisionSignal,
) -> Result<f64, LossError> {
    if outputs.num_experts() != 1 {
        return Err(LossError::SingleExpertOnly(outputs.num_experts()));
    }
    check_shapes(outputs, sup)?;
    let mut loss = 0.0;
    for (k, &g) in outputs.class_logits.iter().enumerate() {
        if k == sup.label {
            loss += logistic_phi(g);
        } else {
            loss += logistic_phi(-g);
        }
    }
    let g = outputs.deferral_logits[0];
    loss += logistic_phi(-g);
    if sup.expert_correct[0] {
        loss += logistic_phi(g) - logistic_phi(-g);
    }
    Ok(loss)
}

/// Evaluate the multi-expert loss and its single-expert counterpart on a J=1
/// instance; the pair must agree bit-for-bit.
pub fn single_expert_reduction_check(
    kind: LossKind,
    outputs: &ModelOutputs,
    sup: &SupervisionSignal,
) -> Result<(f64, f64), LossError> {
    if outputs.num_experts() != 1 {
        return Err(LossError::SingleExpertOnly(outputs.num_experts()));
    }
    match kind {
        LossKind::Softmax => Ok((
            softmax_l2d_loss(outputs, sup)?,
            softmax_single_expert_loss(outputs, sup)?,
        )),
        LossKind::Ova => Ok((
            ova_l2d_loss(outputs, sup)?,
            ova_single_expert_loss(outputs, sup)?,
        )),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    const LN_2: f64 = std::f64::consts::LN_2;

    fn outputs(class: &[f64], deferral: &[f64]) -> ModelOutputs {
        ModelOutputs::new(class.to_vec(), deferral.to_vec())
    }

    // ─── logistic_phi ────────────────────────────────────────────────

    #[test]
    fn phi_at_zero_is_ln_two() {
        assert!((logistic_phi(0.0) - LN_2).abs() < 1e-15);
    }

    #[test]
    fn phi_large_positive_is_tiny_but_positive() {
        let v = logistic_phi(50.0);
        assert!(v > 0.0);
        assert!((v - 1.93e-22).abs() < 1e-24, "got {v}");
    }

    #[test]
    fn phi_negative_closed_form() {
        let expected = 3.0 + (1.0 + (-3.0f64).exp()).ln();
        assert!((logistic_phi(-3.0) - expected).abs() < 1e-15);
        assert!((logistic_phi(-3.0) - 3.048587).abs() < 1e-6);
    }

    #[test]
    fn phi_stable_at_extremes() {
        assert!(logistic_phi(1e3) >= 0.0);
        assert!(logistic_phi(-1e3).is_finite());
        assert!((logistic_phi(-1e3) - 1e3).abs() < 1e-9);
    }

    // ─── softmax loss ────────────────────────────────────────────────

    #[test]
    fn softmax_loss_uniform_case() {
        let out = outputs(&[0.0, 0.0], &[0.0]);
        let sup = SupervisionSignal::new(0, vec![true]);
        let loss = softmax_l2d_loss(&out, &sup).unwrap();
        assert!((loss - 2.0 * 3.0f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn softmax_loss_direct_substitution() {
        let out = outputs(&[1.0, 0.0], &[0.0]);
        let sup = SupervisionSignal::new(0, vec![false]);
        let loss = softmax_l2d_loss(&out, &sup).unwrap();
        let expected = (1.0 + 2.0 * (-1.0f64).exp()).ln();
        assert!((loss - expected).abs() < 1e-12);
        assert!((loss - 0.551445).abs() < 1e-6);
    }

    #[test]
    fn softmax_loss_matches_plain_reevaluation() {
        // Straightforward unshifted evaluation of the defining formula.
        let out = outputs(&[0.7, -1.2, 2.1], &[0.4, -0.9]);
        let sup = SupervisionSignal::new(2, vec![true, false]);
        let z: f64 = out.all_logits().map(f64::exp).sum();
        let direct =
            -(out.class_logits[2].exp() / z).ln() - (out.deferral_logits[0].exp() / z).ln();
        let loss = softmax_l2d_loss(&out, &sup).unwrap();
        assert!((loss - direct).abs() < 1e-12);
    }

    #[test]
    fn softmax_grad_symmetric_case() {
        let out = outputs(&[0.0, 0.0], &[0.0]);
        let sup = SupervisionSignal::new(0, vec![true]);
        let grad = softmax_l2d_grad(&out, &sup).unwrap();
        let expected = [2.0 / 3.0 - 1.0, 2.0 / 3.0, 2.0 / 3.0 - 1.0];
        for (g, e) in grad.iter().zip(expected) {
            assert!((g - e).abs() < 1e-15);
        }
    }

    #[test]
    fn non_finite_logits_rejected() {
        let out = outputs(&[f64::NAN, 0.0], &[0.0]);
        let sup = SupervisionSignal::new(0, vec![true]);
        assert_eq!(
            softmax_l2d_loss(&out, &sup),
            Err(LossError::NonFiniteLogit(0))
        );
        let out = outputs(&[0.0, 0.0], &[f64::INFINITY]);
        assert_eq!(ova_l2d_loss(&out, &sup), Err(LossError::NonFiniteLogit(2)));
    }

    #[test]
    fn shape_errors_are_distinct() {
        let out = outputs(&[0.0, 0.0], &[0.0]);
        assert!(matches!(
            softmax_l2d_loss(&out, &SupervisionSignal::new(5, vec![true])),
            Err(LossError::LabelOutOfRange { .. })
        ));
        assert!(matches!(
            softmax_l2d_loss(&out, &SupervisionSignal::new(0, vec![true, false])),
            Err(LossError::FlagLengthMismatch { .. })
        ));
    }

    // ─── OvA loss ────────────────────────────────────────────────────

    #[test]
    fn ova_loss_uniform_case() {
        let out = outputs(&[0.0, 0.0], &[0.0]);
        let sup = SupervisionSignal::new(0, vec![true]);
        let loss = ova_l2d_loss(&out, &sup).unwrap();
        assert!((loss - 3.0 * LN_2).abs() < 1e-12);
    }

    #[test]
    fn ova_loss_direct_substitution() {
        let out = outputs(&[0.0, 0.0], &[1.0]);
        let sup = SupervisionSignal::new(0, vec![true]);
        let loss = ova_l2d_loss(&out, &sup).unwrap();
        // phi[0] + phi[0] + phi[-1] + (phi[1] - phi[-1]) = 2 ln 2 + phi[1].
        let expected = 2.0 * LN_2 + (1.0 + (-1.0f64).exp()).ln();
        assert!((loss - expected).abs() < 1e-12);
    }

    #[test]
    fn ova_loss_matches_termwise_reevaluation() {
        let out = outputs(&[0.3, -0.8, 1.7, 0.2, -2.0], &[0.5, -0.5, 1.0, 0.0]);
        let sup = SupervisionSignal::new(1, vec![true, false, true, false]);
        let phi = |z: f64| (1.0 + (-z).exp()).ln();
        let mut direct = 0.0;
        for (k, &g) in out.class_logits.iter().enumerate() {
            direct += if k == 1 { phi(g) } else { phi(-g) };
        }
        for &g in &out.deferral_logits {
            direct += phi(-g);
        }
        direct += phi(out.deferral_logits[0]) - phi(-out.deferral_logits[0]);
        direct += phi(out.deferral_logits[2]) - phi(-out.deferral_logits[2]);
        let loss = ova_l2d_loss(&out, &sup).unwrap();
        assert!((loss - direct).abs() < 1e-12);
    }

    #[test]
    fn ova_grad_zero_point() {
        let out = outputs(&[0.0, 0.0], &[0.0]);
        let correct = SupervisionSignal::new(0, vec![true]);
        assert_eq!(ova_l2d_grad(&out, &correct).unwrap(), vec![-0.5, 0.5, -0.5]);
        let wrong = SupervisionSignal::new(0, vec![false]);
        assert_eq!(ova_l2d_grad(&out, &wrong).unwrap(), vec![-0.5, 0.5, 0.5]);
    }

    // ─── gradient checks ─────────────────────────────────────────────

    fn numeric_grad(
        kind: LossKind,
        out: &ModelOutputs,
        sup: &SupervisionSignal,
        h: f64,
    ) -> Vec<f64> {
        let k = out.num_classes();
        let total = k + out.num_experts();
        let mut grad = Vec::with_capacity(total);
        for i in 0..total {
            let mut plus = out.clone();
            let mut minus = out.clone();
            if i < k {
                plus.class_logits[i] += h;
                minus.class_logits[i] -= h;
            } else {
                plus.deferral_logits[i - k] += h;
                minus.deferral_logits[i - k] -= h;
            }
            let lp = l2d_loss(kind, &plus, sup).unwrap();
            let lm = l2d_loss(kind, &minus, sup).unwrap();
            grad.push((lp - lm) / (2.0 * h));
        }
        grad
    }

    /// Mixed absolute/relative agreement used for finite-difference checks.
    fn grad_agreement(analytic: &[f64], numeric: &[f64]) -> f64 {
        analytic
            .iter()
            .zip(numeric)
            .map(|(a, n)| (a - n).abs() / f64::max(1.0, f64::max(a.abs(), n.abs())))
            .fold(0.0, f64::max)
    }

    #[test]
    fn gradients_match_finite_differences() {
        let mut rng = crate::rng::stream_rng(1234, crate::rng::StreamDomain::Scratch, 0, 0);
        use rand::Rng;
        for _ in 0..50 {
            let k = rng.random_range(2..=4usize);
            let j = rng.random_range(1..=3usize);
            let class: Vec<f64> = (0..k).map(|_| rng.random::<f64>() * 10.0 - 5.0).collect();
            let deferral: Vec<f64> = (0..j).map(|_| rng.random::<f64>() * 10.0 - 5.0).collect();
            let out = ModelOutputs::new(class, deferral);
            let sup = SupervisionSignal::new(
                rng.random_range(0..k),
                (0..j).map(|_| rng.random::<f64>() < 0.5).collect(),
            );
            for kind in [LossKind::Softmax, LossKind::Ova] {
                let analytic = l2d_grad(kind, &out, &sup).unwrap();
                let numeric = numeric_grad(kind, &out, &sup, 1e-4);
                let err = grad_agreement(&analytic, &numeric);
                assert!(err < 1e-6, "{kind:?} rel err {err}");
            }
        }
    }

    #[test]
    fn softmax_grad_components_sum_to_zero() {
        let out = outputs(&[1.3, -0.2, 0.8, 2.2], &[0.1, -1.4, 0.6]);
        let sup = SupervisionSignal::new(3, vec![true, true, false]);
        let grad = softmax_l2d_grad(&out, &sup).unwrap();
        let sum: f64 = grad.iter().sum();
        assert!(sum.abs() < 1e-12, "sum {sum}");
    }

    #[test]
    fn ova_perturbation_is_per_slot() {
        // Changing one deferral logit must leave every other gradient slot
        // untouched.
        let base = outputs(&[0.4, -0.6, 1.1], &[0.3, -0.2]);
        let sup = SupervisionSignal::new(0, vec![true, false]);
        let g0 = ova_l2d_grad(&base, &sup).unwrap();
        let mut bumped = base.clone();
        bumped.deferral_logits[1] += 0.7;
        let g1 = ova_l2d_grad(&bumped, &sup).unwrap();
        for i in 0..g0.len() {
            if i == 4 {
                assert_ne!(g0[i], g1[i]);
            } else {
                assert_eq!(g0[i], g1[i]);
            }
        }
    }

    // ─── reductions ──────────────────────────────────────────────────

    #[test]
    fn single_expert_reduction_is_exact() {
        let out = outputs(&[0.9, -1.1, 0.3], &[0.7]);
        for flag in [true, false] {
            let sup = SupervisionSignal::new(1, vec![flag]);
            for kind in [LossKind::Softmax, LossKind::Ova] {
                let (multi, single) = single_expert_reduction_check(kind, &out, &sup).unwrap();
                assert_eq!(multi.to_bits(), single.to_bits());
            }
        }
    }

    #[test]
    fn reduction_check_requires_one_expert() {
        let out = outputs(&[0.0, 0.0], &[0.0, 0.0]);
        let sup = SupervisionSignal::new(0, vec![true, false]);
        assert_eq!(
            single_expert_reduction_check(LossKind::Ova, &out, &sup),
            Err(LossError::SingleExpertOnly(2))
        );
    }

    // ─── properties ──────────────────────────────────────────────────

    fn instance_strategy() -> impl Strategy<Value = (ModelOutputs, SupervisionSignal)> {
        (2usize..=6, 1usize..=5).prop_flat_map(|(k, j)| {
            (
                proptest::collection::vec(-5.0f64..5.0, k),
                proptest::collection::vec(-5.0f64..5.0, j),
                0..k,
                proptest::collection::vec(any::<bool>(), j),
            )
                .prop_map(|(class, deferral, label, flags)| {
                    (
                        ModelOutputs::new(class, deferral),
                        SupervisionSignal::new(label, flags),
                    )
                })
        })
    }

    proptest! {
        #[test]
        fn losses_are_nonnegative((out, sup) in instance_strategy()) {
            prop_assert!(softmax_l2d_loss(&out, &sup).unwrap() >= 0.0);
            prop_assert!(ova_l2d_loss(&out, &sup).unwrap() >= 0.0);
        }

        #[test]
        fn softmax_loss_midpoint_convexity(
            (out_a, sup) in instance_strategy(),
            scale in -1.0f64..1.0,
        ) {
            // Second point: a deterministic distortion of the first.
            let out_b = ModelOutputs::new(
                out_a.class_logits.iter().map(|g| g * scale + 0.3).collect(),
                out_a.deferral_logits.iter().map(|g| -g * scale).collect(),
            );
            let mid = ModelOutputs::new(
                out_a.class_logits.iter().zip(&out_b.class_logits).map(|(a, b)| (a + b) / 2.0).collect(),
                out_a.deferral_logits.iter().zip(&out_b.deferral_logits).map(|(a, b)| (a + b) / 2.0).collect(),
            );
            let fa = softmax_l2d_loss(&out_a, &sup).unwrap();
            let fb = softmax_l2d_loss(&out_b, &sup).unwrap();
            let fm = softmax_l2d_loss(&mid, &sup).unwrap();
            prop_assert!(fm <= (fa + fb) / 2.0 + 1e-12);
        }

        #[test]
        fn softmax_grad_mass_balance((out, sup) in instance_strategy()) {
            let grad = softmax_l2d_grad(&out, &sup).unwrap();
            let sum: f64 = grad.iter().sum();
            prop_assert!(sum.abs() < 1e-12);
        }
    }

    #[test]
    fn reduction_sweep_has_zero_difference() {
        use rand::Rng;
        let mut rng = crate::rng::stream_rng(77, crate::rng::StreamDomain::Scratch, 0, 1);
        let mut max_diff: f64 = 0.0;
        for _ in 0..1000 {
            let k = rng.random_range(2..=6usize);
            let class: Vec<f64> = (0..k).map(|_| rng.random::<f64>() * 10.0 - 5.0).collect();
            let deferral = vec![rng.random::<f64>() * 10.0 - 5.0];
            let out = ModelOutputs::new(class, deferral);
            let sup =
                SupervisionSignal::new(rng.random_range(0..k), vec![rng.random::<f64>() < 0.5]);
            for kind in [LossKind::Softmax, LossKind::Ova] {
                let (multi, single) = single_expert_reduction_check(kind, &out, &sup).unwrap();
                max_diff = max_diff.max((multi - single).abs());
            }
        }
        assert_eq!(max_diff, 0.0);
    }
}
