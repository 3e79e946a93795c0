//! Classification and distillation losses with analytic gradients.
//!
//! All batch losses are means over samples. Gradients are returned with
//! respect to the student (first) logits only; teacher logits enter as
//! constants.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum LossError {
    #[error("non-finite logit encountered")]
    NonFinite,
    #[error("shape mismatch: {what} ({left:?} vs {right:?})")]
    ShapeMismatch { what: &'static str, left: Vec<usize>, right: Vec<usize> },
    #[error("target index {index} out of range for {classes} classes")]
    InvalidTarget { index: usize, classes: usize },
    #[error("invalid loss parameter: {0}")]
    InvalidParam(String),
}

/// A probability vector over action classes.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassDistribution {
    probs: Array1<f64>,
}

impl ClassDistribution {
    pub fn probs(&self) -> ArrayView1<'_, f64> {
        self.probs.view()
    }

    pub fn into_inner(self) -> Array1<f64> {
        self.probs
    }
}

/// Ground-truth class index for one sample.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct OneHotTarget(pub usize);

/// Which distribution conditions the logarithm in the KL term.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum KlDirection {
    /// `Σ t·log(t/s)`: the student is pulled toward the teacher.
    #[default]
    TeacherReference,
    /// `Σ s·log(s/t)`: the predicted distribution is the reference.
    StudentReference,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DistillParams {
    pub alpha: f64,
    pub tau: f64,
    pub direction: KlDirection,
    pub scale_by_tau_squared: bool,
}

impl Default for DistillParams {
    fn default() -> Self {
        Self { alpha: 0.90, tau: 6.0, direction: KlDirection::TeacherReference, scale_by_tau_squared: true }
    }
}

impl DistillParams {
    pub fn new(alpha: f64, tau: f64) -> Result<Self, LossError> {
        let p = Self { alpha, tau, ..Self::default() };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<(), LossError> {
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(LossError::InvalidParam(format!("alpha {} outside [0, 1]", self.alpha)));
        }
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return Err(LossError::InvalidParam(format!("tau {} must be positive", self.tau)));
        }
        Ok(())
    }
}

/// Scalar loss with its gradient w.r.t. the student logits.
#[derive(Debug, Clone)]
pub struct LossOutput {
    pub value: f64,
    pub grad: Array2<f64>,
}

/// Blended loss plus its two components, kept for logging.
#[derive(Debug, Clone)]
pub struct DistillOutput {
    pub total: f64,
    pub cross_entropy: f64,
    pub kl: f64,
    pub grad: Array2<f64>,
}

fn log_softmax_row(logits: ArrayView1<f64>, tau: f64) -> Array1<f64> {
    let max = logits.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v));
    let shifted = logits.mapv(|v| (v - max) / tau);
    let lse = shifted.iter().map(|v| v.exp()).sum::<f64>().ln();
    shifted - lse
}

fn check_finite(x: &ArrayView2<f64>) -> Result<(), LossError> {
    if x.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(LossError::NonFinite)
    }
}

fn check_same_shape(a: &ArrayView2<f64>, b: &ArrayView2<f64>) -> Result<(), LossError> {
    if a.shape() != b.shape() {
        return Err(LossError::ShapeMismatch {
            what: "student vs teacher logits",
            left: a.shape().to_vec(),
            right: b.shape().to_vec(),
        });
    }
    Ok(())
}

/// Temperature-scaled softmax, `exp(z_c/τ) / Σ_j exp(z_j/τ)`.
pub fn softmax(logits: ArrayView1<f64>, tau: f64) -> Result<ClassDistribution, LossError> {
    if tau.is_nan() || tau <= 0.0 {
        return Err(LossError::InvalidParam(format!("tau {tau} must be positive")));
    }
    if logits.is_empty() || !logits.iter().all(|v| v.is_finite()) {
        return Err(LossError::NonFinite);
    }
    Ok(ClassDistribution { probs: log_softmax_row(logits, tau).mapv(f64::exp) })
}

/// Mean negative log-likelihood of the targets under `softmax(logits)` at τ = 1.
pub fn cross_entropy(logits: ArrayView2<f64>, targets: &[OneHotTarget]) -> Result<LossOutput, LossError> {
    let (b, m) = logits.dim();
    if targets.len() != b {
        return Err(LossError::ShapeMismatch {
            what: "logit rows vs targets",
            left: vec![b],
            right: vec![targets.len()],
        });
    }
    check_finite(&logits)?;
    let mut grad = Array2::<f64>::zeros((b, m));
    let mut total = 0.0;
    for (i, (row, target)) in logits.axis_iter(Axis(0)).zip(targets).enumerate() {
        if target.0 >= m {
            return Err(LossError::InvalidTarget { index: target.0, classes: m });
        }
        let logp = log_softmax_row(row, 1.0);
        total -= logp[target.0];
        let mut g = grad.row_mut(i);
        g.assign(&logp.mapv(f64::exp));
        g[target.0] -= 1.0;
    }
    let scale = 1.0 / b.max(1) as f64;
    grad *= scale;
    Ok(LossOutput { value: total * scale, grad })
}

/// Mean KL divergence between temperature-softened teacher and student
/// distributions. With `scale_by_tau_squared` the result is multiplied by τ².
pub fn kl_divergence(
    student_logits: ArrayView2<f64>,
    teacher_logits: ArrayView2<f64>,
    tau: f64,
    direction: KlDirection,
    scale_by_tau_squared: bool,
) -> Result<LossOutput, LossError> {
    check_same_shape(&student_logits, &teacher_logits)?;
    check_finite(&student_logits)?;
    check_finite(&teacher_logits)?;
    if tau.is_nan() || tau <= 0.0 {
        return Err(LossError::InvalidParam(format!("tau {tau} must be positive")));
    }
    let (b, m) = student_logits.dim();
    let factor = if scale_by_tau_squared { tau * tau } else { 1.0 };
    let scale = factor / b.max(1) as f64;
    let mut grad = Array2::<f64>::zeros((b, m));
    let mut total = 0.0;
    for i in 0..b {
        let log_s = log_softmax_row(student_logits.row(i), tau);
        let log_t = log_softmax_row(teacher_logits.row(i), tau);
        let s = log_s.mapv(f64::exp);
        let t = log_t.mapv(f64::exp);
        let mut g = grad.row_mut(i);
        match direction {
            KlDirection::TeacherReference => {
                let kl: f64 = (0..m).filter(|&c| t[c] > 0.0).map(|c| t[c] * (log_t[c] - log_s[c])).sum();
                total += kl;
                // d/dz_s of Σ t log(t/s) = (s - t) / τ
                for c in 0..m {
                    g[c] = (s[c] - t[c]) / tau * scale;
                }
            }
            KlDirection::StudentReference => {
                let diff: Array1<f64> = &log_s - &log_t;
                let kl: f64 = (0..m).filter(|&c| s[c] > 0.0).map(|c| s[c] * diff[c]).sum();
                total += kl;
                // d/dz_s of Σ s log(s/t) = s ⊙ (log(s/t) − KL) / τ
                for c in 0..m {
                    g[c] = s[c] * (diff[c] - kl) / tau * scale;
                }
            }
        }
    }
    Ok(LossOutput { value: (total * scale).max(0.0), grad })
}

/// `α·CE(student, targets) + (1−α)·KL(student, teacher; τ)`.
pub fn distillation_loss(
    student_logits: ArrayView2<f64>,
    teacher_logits: ArrayView2<f64>,
    targets: &[OneHotTarget],
    params: &DistillParams,
) -> Result<DistillOutput, LossError> {
    params.validate()?;
    let ce = cross_entropy(student_logits, targets)?;
    let kl = kl_divergence(student_logits, teacher_logits, params.tau, params.direction, params.scale_by_tau_squared)?;
    let a = params.alpha;
    let grad = ce.grad * a + kl.grad * (1.0 - a);
    Ok(DistillOutput { total: a * ce.value + (1.0 - a) * kl.value, cross_entropy: ce.value, kl: kl.value, grad })
}

/// Soft-target-only variant used when hard labels are unavailable: the KL
/// term of [`distillation_loss`] with α = 0.
pub fn soft_target_loss(
    student_logits: ArrayView2<f64>,
    teacher_logits: ArrayView2<f64>,
    params: &DistillParams,
) -> Result<DistillOutput, LossError> {
    params.validate()?;
    let kl = kl_divergence(student_logits, teacher_logits, params.tau, params.direction, params.scale_by_tau_squared)?;
    Ok(DistillOutput { total: kl.value, cross_entropy: 0.0, kl: kl.value, grad: kl.grad })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{array, Array2};
    use proptest::prelude::*;

    fn targets(ix: &[usize]) -> Vec<OneHotTarget> {
        ix.iter().copied().map(OneHotTarget).collect()
    }

    #[test]
    fn softmax_of_equal_logits_is_uniform() {
        let p = softmax(array![0.0, 0.0, 0.0, 0.0].view(), 1.0).unwrap();
        for v in p.probs() {
            assert!((v - 0.25).abs() < 1e-15);
        }
    }

    #[test]
    fn softmax_high_temperature_limit() {
        let p = softmax(array![1.0, 2.0, 3.0].view(), 1e9).unwrap();
        for v in p.probs() {
            assert!((v - 1.0 / 3.0).abs() < 1e-6);
        }
    }

    #[test]
    fn softmax_two_class_value() {
        // e / (e + 1)
        let p = softmax(array![1.0, 0.0].view(), 1.0).unwrap();
        assert!((p.probs()[0] - 0.731_058_578_630_004_9).abs() < 1e-12);
        assert!((p.probs()[1] - 0.268_941_421_369_995_1).abs() < 1e-12);
    }

    #[test]
    fn softmax_rejects_non_finite() {
        assert_eq!(softmax(array![1.0, f64::NAN].view(), 1.0), Err(LossError::NonFinite));
    }

    #[test]
    fn cross_entropy_uniform_is_ln_m() {
        let out = cross_entropy(Array2::zeros((1, 4)).view(), &targets(&[2])).unwrap();
        assert!((out.value - 4f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn cross_entropy_confident_correct_is_zero() {
        let logits = array![[-1000.0, 1000.0, -1000.0]];
        assert!(cross_entropy(logits.view(), &targets(&[1])).unwrap().value < 1e-6);
    }

    #[test]
    fn cross_entropy_is_batch_mean() {
        let a = array![[0.3, -1.2, 2.0]];
        let b = array![[1.5, 0.1, -0.7]];
        let la = cross_entropy(a.view(), &targets(&[0])).unwrap().value;
        let lb = cross_entropy(b.view(), &targets(&[2])).unwrap().value;
        let both = array![[0.3, -1.2, 2.0], [1.5, 0.1, -0.7]];
        let lab = cross_entropy(both.view(), &targets(&[0, 2])).unwrap().value;
        assert!((lab - (la + lb) / 2.0).abs() < 1e-12);
    }

    #[test]
    fn cross_entropy_errors() {
        let logits = Array2::zeros((2, 3));
        assert!(matches!(cross_entropy(logits.view(), &targets(&[0])), Err(LossError::ShapeMismatch { .. })));
        assert_eq!(
            cross_entropy(logits.view(), &targets(&[0, 3])).unwrap_err(),
            LossError::InvalidTarget { index: 3, classes: 3 }
        );
    }

    #[test]
    fn kl_hand_example() {
        // teacher softmax (0.25, 0.75) from logits (0, ln 3); student (0.5, 0.5)
        let teacher = array![[0.0, 3f64.ln()]];
        let student = array![[0.0, 0.0]];
        let out = kl_divergence(student.view(), teacher.view(), 1.0, KlDirection::TeacherReference, true).unwrap();
        let expected = 0.25 * 0.5f64.ln() + 0.75 * 1.5f64.ln();
        assert!((out.value - expected).abs() < 1e-12);
        assert!((out.value - 0.13081).abs() < 1e-5);
    }

    #[test]
    fn kl_of_identical_rows_is_zero() {
        let z = array![[0.3, -2.0, 1.0], [4.0, 4.0, -1.0]];
        for tau in [0.5, 1.0, 6.0] {
            for dir in [KlDirection::TeacherReference, KlDirection::StudentReference] {
                assert!(kl_divergence(z.view(), z.view(), tau, dir, true).unwrap().value.abs() < 1e-12);
            }
        }
    }

    #[test]
    fn kl_tau_squared_scaling() {
        let s = array![[0.1, 0.9, -0.4]];
        let t = array![[1.0, -0.5, 0.2]];
        let raw = kl_divergence(s.view(), t.view(), 3.0, KlDirection::TeacherReference, false).unwrap().value;
        let scaled = kl_divergence(s.view(), t.view(), 3.0, KlDirection::TeacherReference, true).unwrap().value;
        assert!((scaled - 9.0 * raw).abs() < 1e-12);
    }

    #[test]
    fn distillation_endpoints_and_substitution() {
        let s = array![[0.2, -0.1, 0.7, 1.1]];
        let t = array![[1.0, 0.0, -1.0, 0.5]];
        let y = targets(&[3]);
        let p = |alpha| DistillParams { alpha, ..DistillParams::default() };
        let ce = cross_entropy(s.view(), &y).unwrap().value;
        let kl = kl_divergence(s.view(), t.view(), 6.0, KlDirection::TeacherReference, true).unwrap().value;
        assert_eq!(distillation_loss(s.view(), t.view(), &y, &p(1.0)).unwrap().total, ce);
        assert_eq!(distillation_loss(s.view(), t.view(), &y, &p(0.0)).unwrap().total, kl);
        let out = distillation_loss(s.view(), t.view(), &y, &p(0.9)).unwrap();
        assert!((out.total - (0.9 * out.cross_entropy + 0.1 * out.kl)).abs() < 1e-15);
    }

    #[test]
    fn defaults_match_recipe() {
        let p = DistillParams::default();
        assert_eq!((p.alpha, p.tau), (0.90, 6.0));
    }

    #[test]
    fn params_are_validated() {
        assert!(DistillParams::new(1.5, 1.0).is_err());
        assert!(DistillParams::new(0.5, 0.0).is_err());
        assert!(DistillParams::new(0.5, 2.0).is_ok());
    }

    fn logits_strategy(rows: usize, cols: usize) -> impl Strategy<Value = Array2<f64>> {
        prop::collection::vec(-8.0f64..8.0, rows * cols)
            .prop_map(move |v| Array2::from_shape_vec((rows, cols), v).unwrap())
    }

    proptest! {
        #[test]
        fn softmax_sums_to_one_and_is_shift_invariant(z in prop::collection::vec(-50.0f64..50.0, 1..10), shift in -100.0f64..100.0, tau in 0.1f64..10.0) {
            let a = softmax(Array1::from(z.clone()).view(), tau).unwrap();
            let b = softmax(Array1::from(z).mapv(|v| v + shift).view(), tau).unwrap();
            prop_assert!((a.probs().sum() - 1.0).abs() < 1e-6);
            for (x, y) in a.probs().iter().zip(b.probs().iter()) {
                prop_assert!((x - y).abs() < 1e-6);
            }
        }

        #[test]
        fn losses_are_non_negative(s in logits_strategy(3, 5), t in logits_strategy(3, 5), tau in 0.5f64..8.0) {
            let y = targets(&[0, 4, 2]);
            prop_assert!(cross_entropy(s.view(), &y).unwrap().value >= 0.0);
            for dir in [KlDirection::TeacherReference, KlDirection::StudentReference] {
                prop_assert!(kl_divergence(s.view(), t.view(), tau, dir, true).unwrap().value >= 0.0);
            }
        }

        #[test]
        fn distillation_is_affine_in_alpha(s in logits_strategy(2, 4), t in logits_strategy(2, 4)) {
            let y = targets(&[1, 3]);
            let at = |alpha| distillation_loss(s.view(), t.view(), &y, &DistillParams { alpha, ..DistillParams::default() }).unwrap().total;
            prop_assert!((at(0.5) - (at(0.0) + at(1.0)) / 2.0).abs() < 1e-9);
        }

        #[test]
        fn reverse_direction_gradient_matches_finite_differences(s in logits_strategy(2, 3), t in logits_strategy(2, 3)) {
            let out = kl_divergence(s.view(), t.view(), 2.0, KlDirection::StudentReference, true).unwrap();
            let h = 1e-5;
            for i in 0..2 {
                for j in 0..3 {
                    let mut sp = s.clone();
                    sp[[i, j]] += h;
                    let mut sm = s.clone();
                    sm[[i, j]] -= h;
                    let f = |x: &Array2<f64>| kl_divergence(x.view(), t.view(), 2.0, KlDirection::StudentReference, true).unwrap().value;
                    let num = (f(&sp) - f(&sm)) / (2.0 * h);
                    prop_assert!((num - out.grad[[i, j]]).abs() < 1e-6 * (1.0 + num.abs()));
                }
            }
        }
    }
}
