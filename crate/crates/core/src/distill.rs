//! Classification and distillation objectives.
//!
//! All losses are recorded on a [`Tape`] so they can be differentiated with
//! respect to student logits. Teacher logits are always read as constants.

use serde::{Deserialize, Serialize};

use crate::backend::kernels::softmax;
use crate::backend::{Element, Tape, Tensor, Var};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossWeights {
    /// Weight of the label-smoothed cross-entropy on original images.
    pub alpha: f64,
    /// Weight of the two distillation terms.
    pub beta: f64,
    /// Distillation temperature.
    pub tau: f64,
    pub label_smoothing: f64,
    /// Multiply the KD terms by `tau^2`.
    pub kd_tau_squared: bool,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            alpha: 1.0,
            beta: 10.0,
            tau: 7.0,
            label_smoothing: 0.1,
            kd_tau_squared: true,
        }
    }
}

impl LossWeights {
    /// Cross-entropy only, as used for teachers and baselines.
    pub fn supervised(label_smoothing: f64) -> Self {
        LossWeights {
            beta: 0.0,
            label_smoothing,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(format!("loss: {m}")));
        if !(self.alpha >= 0.0 && self.alpha.is_finite()) {
            return bad(format!("alpha must be >= 0, got {}", self.alpha));
        }
        if !(self.beta >= 0.0 && self.beta.is_finite()) {
            return bad(format!("beta must be >= 0, got {}", self.beta));
        }
        if self.alpha + self.beta <= 0.0 {
            return bad("alpha + beta must be positive".into());
        }
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return bad(format!("tau must be positive, got {}", self.tau));
        }
        if !(0.0..1.0).contains(&self.label_smoothing) {
            return bad(format!("label_smoothing must lie in [0, 1), got {}", self.label_smoothing));
        }
        Ok(())
    }
}

/// Loss terms of one step, as plain numbers.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub ce: f64,
    pub kd_org: f64,
    pub kd_aug: f64,
}

fn logits_shape<T: Element>(tape: &Tape<T>, x: Var, op: &'static str) -> Result<(usize, usize)> {
    match *tape.shape(x) {
        [n, c] if n > 0 && c > 0 => Ok((n, c)),
        ref s => Err(Error::Dimension {
            op,
            detail: format!("expected non-empty (N, C) logits, got {s:?}"),
        }),
    }
}

/// Smoothed one-hot targets `(1 - eps) * onehot + eps / C`.
pub fn smoothed_targets<T: Element>(labels: &[usize], classes: usize, eps: f64) -> Result<Tensor<T>> {
    if !(0.0..1.0).contains(&eps) {
        return Err(Error::Parameter {
            op: "ce_label_smoothing",
            detail: format!("eps must lie in [0, 1), got {eps}"),
        });
    }
    let mut t = vec![T::lit(eps / classes as f64); labels.len() * classes];
    for (i, &y) in labels.iter().enumerate() {
        if y >= classes {
            return Err(Error::Index {
                what: "classes",
                index: y,
                len: classes,
            });
        }
        t[i * classes + y] = T::lit(1.0 - eps + eps / classes as f64);
    }
    Tensor::new(vec![labels.len(), classes], t)
}

/// Batch mean of `-sum(target * log_softmax(logits))` with smoothed targets.
pub fn ce_label_smoothing<T: Element>(tape: &mut Tape<T>, logits: Var, labels: &[usize], eps: f64) -> Result<Var> {
    let (n, c) = logits_shape(tape, logits, "ce_label_smoothing")?;
    if labels.len() != n {
        return Err(Error::Dimension {
            op: "ce_label_smoothing",
            detail: format!("{} labels for {n} rows", labels.len()),
        });
    }
    let target = tape.constant(smoothed_targets(labels, c, eps)?);
    let ls = tape.log_softmax(logits, 1.0)?;
    let prod = tape.mul(target, ls)?;
    let total = tape.sum(prod)?;
    tape.scale(total, -1.0 / n as f64)
}

/// `tau^2 * mean_n KL(softmax(t / tau) || softmax(s / tau))`.
///
/// The teacher's values are copied into a constant, so no gradient reaches
/// them even if `teacher` was recorded with `requires_grad`.
pub fn kd_loss<T: Element>(tape: &mut Tape<T>, student: Var, teacher: Var, tau: f64, tau_squared: bool) -> Result<Var> {
    if !(tau > 0.0 && tau.is_finite()) {
        return Err(Error::Parameter {
            op: "kd_loss",
            detail: format!("temperature must be positive, got {tau}"),
        });
    }
    let (n, c) = logits_shape(tape, student, "kd_loss")?;
    if tape.shape(teacher) != [n, c] {
        return Err(Error::Dimension {
            op: "kd_loss",
            detail: format!("student {:?} vs teacher {:?}", [n, c], tape.shape(teacher)),
        });
    }
    let t_val = tape.value(teacher).clone();
    let p = softmax::softmax(&t_val, tau)?;
    let log_p = softmax::log_softmax(&t_val, tau)?;
    // sum p log p is constant in the student; underflowed p contributes 0
    let entropy_term: f64 = p
        .data()
        .iter()
        .zip(log_p.data())
        .filter(|(p, _)| p.to_f64_lossy() > 0.0)
        .map(|(p, lp)| p.to_f64_lossy() * lp.to_f64_lossy())
        .sum();
    let pv = tape.constant(p);
    let ls = tape.log_softmax(student, tau)?;
    let cross = tape.mul(pv, ls)?;
    let cross = tape.sum(cross)?;
    let kl = tape.scale(cross, -1.0)?;
    let kl = tape.add_scalar(kl, entropy_term)?;
    let factor = if tau_squared { tau * tau } else { 1.0 };
    tape.scale(kl, factor / n as f64)
}

/// `alpha * CE(org) + beta * (KD(org) + KD(aug))`.
#[allow(clippy::too_many_arguments)]
pub fn tgda_total_loss<T: Element>(
    tape: &mut Tape<T>,
    student_org: Var,
    student_aug: Var,
    teacher_org: Var,
    teacher_aug: Var,
    labels: &[usize],
    w: &LossWeights,
) -> Result<(Var, LossBreakdown)> {
    let shape = tape.shape(student_org).to_vec();
    for v in [student_aug, teacher_org, teacher_aug] {
        if tape.shape(v) != shape.as_slice() {
            return Err(Error::Dimension {
                op: "tgda_total_loss",
                detail: format!("logit shapes differ: {shape:?} vs {:?}", tape.shape(v)),
            });
        }
    }
    let ce = ce_label_smoothing(tape, student_org, labels, w.label_smoothing)?;
    let kd_org = kd_loss(tape, student_org, teacher_org, w.tau, w.kd_tau_squared)?;
    let kd_aug = kd_loss(tape, student_aug, teacher_aug, w.tau, w.kd_tau_squared)?;
    let breakdown = LossBreakdown {
        ce: tape.value(ce).item().to_f64_lossy(),
        kd_org: tape.value(kd_org).item().to_f64_lossy(),
        kd_aug: tape.value(kd_aug).item().to_f64_lossy(),
    };
    let a = tape.scale(ce, w.alpha)?;
    let kd = tape.add(kd_org, kd_aug)?;
    let b = tape.scale(kd, w.beta)?;
    Ok((tape.add(a, b)?, breakdown))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar(tape: &Tape<f64>, v: Var) -> f64 {
        tape.value(v).item()
    }

    #[test]
    fn ce_uniform_logits_is_log_c() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::zeros(&[3, 5]));
        let l = ce_label_smoothing(&mut tape, x, &[0, 4, 2], 0.0).unwrap();
        assert!((scalar(&tape, l) - 5f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn ce_rejects_bad_labels() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::zeros(&[1, 3]));
        assert!(matches!(ce_label_smoothing(&mut tape, x, &[3], 0.1), Err(Error::Index { .. })));
        assert!(ce_label_smoothing(&mut tape, x, &[0, 1], 0.1).is_err());
    }

    #[test]
    fn kd_rejects_bad_temperature() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::zeros(&[1, 3]));
        assert!(matches!(kd_loss(&mut tape, x, x, 0.0, true), Err(Error::Parameter { .. })));
    }

    #[test]
    fn weights_validate() {
        assert!(LossWeights::default().validate().is_ok());
        let w = LossWeights {
            alpha: 0.0,
            beta: 0.0,
            ..Default::default()
        };
        assert!(w.validate().is_err());
        let w = LossWeights {
            label_smoothing: 1.0,
            ..Default::default()
        };
        assert!(w.validate().is_err());
    }
}
