use proptest::prelude::*;
use tgda_core::distill::{ce_label_smoothing, kd_loss, tgda_total_loss, LossWeights};
use tgda_core::{RngStream, Tape, Tensor};

fn rows(v: &[f64], c: usize) -> Vec<&[f64]> {
    v.chunks(c).collect()
}

fn softmax_oracle(x: &[f64], tau: f64) -> Vec<f64> {
    let m = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = x.iter().map(|v| ((v - m) / tau).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

/// `tau^2 * mean_n sum_c p log(p / q)` term by term.
fn kd_oracle(student: &[f64], teacher: &[f64], c: usize, tau: f64) -> f64 {
    let n = student.len() / c;
    let total: f64 = rows(student, c)
        .iter()
        .zip(rows(teacher, c))
        .map(|(s, t)| {
            let (q, p) = (softmax_oracle(s, tau), softmax_oracle(t, tau));
            p.iter().zip(&q).filter(|(p, _)| **p > 0.0).map(|(p, q)| p * (p / q).ln()).sum::<f64>()
        })
        .sum();
    tau * tau * total / n as f64
}

fn ce_oracle(logits: &[f64], labels: &[usize], c: usize, eps: f64) -> f64 {
    let total: f64 = rows(logits, c)
        .iter()
        .zip(labels)
        .map(|(z, &y)| {
            let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + z.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
            (0..c)
                .map(|k| {
                    let t = if k == y { 1.0 - eps + eps / c as f64 } else { eps / c as f64 };
                    -t * (z[k] - lse)
                })
                .sum::<f64>()
        })
        .sum();
    total / labels.len() as f64
}

fn kd_value(student: &Tensor<f64>, teacher: &Tensor<f64>, tau: f64, tau_sq: bool) -> f64 {
    let mut tape = Tape::new();
    let s = tape.constant(student.clone());
    let t = tape.constant(teacher.clone());
    let l = kd_loss(&mut tape, s, t, tau, tau_sq).unwrap();
    tape.value(l).item()
}

#[test]
fn kd_worked_example() {
    let s = Tensor::new(vec![1, 2], vec![0.0, 0.0]).unwrap();
    let t = Tensor::new(vec![1, 2], vec![0.0, 3f64.ln()]).unwrap();
    let kd = kd_value(&s, &t, 1.0, true);
    // teacher softmax is (1/4, 3/4), the student's (1/2, 1/2)
    let oracle = 0.25 * (0.25f64 / 0.5).ln() + 0.75 * (0.75f64 / 0.5).ln();
    assert!((kd - oracle).abs() < 1e-12);
    assert!((kd - 0.1308).abs() < 1e-3, "{kd}");
}

#[test]
fn kd_of_identical_logits_is_zero() {
    let mut rng = RngStream::new(1);
    for tau in [1.0, 4.0, 7.0] {
        for _ in 0..100 {
            let x = rng.normal_tensor::<f64>(&[3, 6], 3.0);
            assert!(kd_value(&x, &x, tau, true).abs() < 1e-9);
        }
    }
}

#[test]
fn kd_matches_scalar_oracle() {
    let mut rng = RngStream::new(2);
    for tau in [0.5, 1.0, 4.0, 7.0] {
        let s = rng.normal_tensor::<f64>(&[4, 5], 2.0);
        let t = rng.normal_tensor::<f64>(&[4, 5], 2.0);
        let want = kd_oracle(s.data(), t.data(), 5, tau);
        assert!((kd_value(&s, &t, tau, true) - want).abs() < 1e-10);
        assert!((kd_value(&s, &t, tau, false) - want / (tau * tau)).abs() < 1e-10);
    }
}

#[test]
fn kd_gradient_is_tau_times_probability_gap() {
    let mut rng = RngStream::new(3);
    let (n, c, tau) = (3, 4, 7.0);
    let s0 = rng.normal_tensor::<f64>(&[n, c], 1.0);
    let t0 = rng.normal_tensor::<f64>(&[n, c], 1.0);
    let mut tape = Tape::new();
    let s = tape.leaf(s0.clone());
    let t = tape.leaf(t0.clone());
    let l = kd_loss(&mut tape, s, t, tau, true).unwrap();
    let g = tape.backward(l).unwrap();
    assert!(g.get(t).is_none(), "teacher logits receive no gradient");
    let gs = g.get(s).unwrap();
    for i in 0..n {
        let q = softmax_oracle(&s0.data()[i * c..(i + 1) * c], tau);
        let p = softmax_oracle(&t0.data()[i * c..(i + 1) * c], tau);
        for k in 0..c {
            let want = tau * (q[k] - p[k]) / n as f64;
            assert!((gs.data()[i * c + k] - want).abs() < 1e-12);
        }
    }
}

#[test]
fn kd_survives_saturated_teachers() {
    let s = Tensor::new(vec![1, 3], vec![0.0, 0.0, 0.0]).unwrap();
    let t = Tensor::new(vec![1, 3], vec![0.0, 1e4, -1e4]).unwrap();
    let kd = kd_value(&s, &t, 1.0, true);
    assert!((kd - 3f64.ln()).abs() < 1e-9, "{kd}");
}

#[test]
fn ce_matches_scalar_oracle() {
    let mut rng = RngStream::new(4);
    let labels = [2, 0, 1, 4, 4];
    for eps in [0.0, 0.1, 0.5] {
        let z = rng.normal_tensor::<f64>(&[5, 5], 3.0);
        let mut tape = Tape::new();
        let v = tape.constant(z.clone());
        let l = ce_label_smoothing(&mut tape, v, &labels, eps).unwrap();
        assert!((tape.value(l).item() - ce_oracle(z.data(), &labels, 5, eps)).abs() < 1e-12);
    }
}

#[test]
fn ce_worked_examples() {
    // labels at logit 0 against one competitor at 1: -log(1 / (1 + e))
    let z = Tensor::new(vec![1, 2], vec![0.0, 1.0]).unwrap();
    let mut tape = Tape::new();
    let v = tape.constant(z);
    let l = ce_label_smoothing(&mut tape, v, &[0], 0.0).unwrap();
    assert!((tape.value(l).item() - (1.0 + 1f64.exp()).ln()).abs() < 1e-12);
    // smoothing alone on uniform logits still yields log C
    let v = tape.constant(Tensor::zeros(&[2, 4]));
    let l = ce_label_smoothing(&mut tape, v, &[1, 3], 0.3).unwrap();
    assert!((tape.value(l).item() - 4f64.ln()).abs() < 1e-12);
}

#[test]
fn total_loss_composes_its_terms() {
    let mut rng = RngStream::new(5);
    let labels = [1, 0, 2];
    let [so, sa, to, ta]: [Tensor<f64>; 4] = std::array::from_fn(|_| rng.normal_tensor(&[3, 3], 2.0));
    let w = LossWeights {
        alpha: 0.7,
        beta: 3.0,
        tau: 4.0,
        label_smoothing: 0.1,
        kd_tau_squared: true,
    };
    let mut tape = Tape::new();
    let vars: Vec<_> = [&so, &sa, &to, &ta].iter().map(|t| tape.leaf((*t).clone())).collect();
    let (l, b) = tgda_total_loss(&mut tape, vars[0], vars[1], vars[2], vars[3], &labels, &w).unwrap();
    let ce = ce_oracle(so.data(), &labels, 3, 0.1);
    let (ko, ka) = (kd_oracle(so.data(), to.data(), 3, 4.0), kd_oracle(sa.data(), ta.data(), 3, 4.0));
    assert!((b.ce - ce).abs() < 1e-12 && (b.kd_org - ko).abs() < 1e-12 && (b.kd_aug - ka).abs() < 1e-12);
    assert!((tape.value(l).item() - (0.7 * ce + 3.0 * (ko + ka))).abs() < 1e-12);
    let g = tape.backward(l).unwrap();
    assert!(g.get(vars[2]).is_none() && g.get(vars[3]).is_none());
    assert!(g.get(vars[0]).is_some() && g.get(vars[1]).is_some());
}

#[test]
fn zero_beta_reduces_to_cross_entropy() {
    let mut rng = RngStream::new(6);
    let [so, sa, to, ta]: [Tensor<f64>; 4] = std::array::from_fn(|_| rng.normal_tensor(&[2, 4], 2.0));
    let w = LossWeights::supervised(0.1);
    let mut tape = Tape::new();
    let v: Vec<_> = [so.clone(), sa, to, ta].into_iter().map(|t| tape.constant(t)).collect();
    let (l, _) = tgda_total_loss(&mut tape, v[0], v[1], v[2], v[3], &[3, 1], &w).unwrap();
    assert!((tape.value(l).item() - ce_oracle(so.data(), &[3, 1], 4, 0.1)).abs() < 1e-12);
}

#[test]
fn mismatched_logits_are_rejected() {
    let mut tape = Tape::<f64>::new();
    let a = tape.constant(Tensor::zeros(&[2, 3]));
    let b = tape.constant(Tensor::zeros(&[2, 4]));
    assert!(kd_loss(&mut tape, a, b, 1.0, true).is_err());
    assert!(tgda_total_loss(&mut tape, a, a, a, b, &[0, 1], &LossWeights::default()).is_err());
}

fn logits(n: usize, c: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-20.0f64..20.0, n * c)
}

proptest! {
    #[test]
    fn kd_is_nonnegative(s in logits(3, 4), t in logits(3, 4), tau in 0.5f64..10.0) {
        let s = Tensor::new(vec![3, 4], s).unwrap();
        let t = Tensor::new(vec![3, 4], t).unwrap();
        prop_assert!(kd_value(&s, &t, tau, true) >= -1e-12);
    }

    #[test]
    fn kd_ignores_per_row_shifts(s in logits(2, 5), t in logits(2, 5), shift in -50.0f64..50.0, tau in 0.5f64..8.0) {
        let st = Tensor::new(vec![2, 5], s.clone()).unwrap();
        let tt = Tensor::new(vec![2, 5], t).unwrap();
        let shifted = Tensor::new(vec![2, 5], s.iter().map(|v| v + shift).collect()).unwrap();
        let (a, b) = (kd_value(&st, &tt, tau, true), kd_value(&shifted, &tt, tau, true));
        prop_assert!((a - b).abs() < 1e-9 * (1.0 + a.abs()));
    }

    #[test]
    fn ce_is_bounded_below_by_target_entropy(z in logits(2, 6), eps in 0.0f64..0.9) {
        let mut tape = Tape::new();
        let v = tape.constant(Tensor::new(vec![2, 6], z).unwrap());
        let l = ce_label_smoothing(&mut tape, v, &[0, 5], eps).unwrap();
        let (hi, lo) = (1.0 - eps + eps / 6.0, eps / 6.0);
        let entropy = -hi * hi.ln() - if lo > 0.0 { 5.0 * lo * lo.ln() } else { 0.0 };
        prop_assert!(tape.value(l).item() >= entropy - 1e-9);
    }
}
