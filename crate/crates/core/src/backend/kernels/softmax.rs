use crate::backend::element::Element;
use crate::backend::tensor::Tensor;
use crate::error::{Error, Result};

fn check_tau(tau: f64) -> Result<()> {
    if tau > 0.0 && tau.is_finite() {
        Ok(())
    } else {
        Err(Error::param("softmax_temperature", format!("tau must be > 0, got {tau}")))
    }
}

fn last_axis<T: Element>(x: &Tensor<T>) -> Result<usize> {
    match x.shape().last() {
        Some(&c) if c > 0 => Ok(c),
        _ => Err(Error::dim("softmax", format!("needs a non-empty last axis, got {:?}", x.shape()))),
    }
}

/// Softmax of `x / tau` along the last axis, max-subtracted.
pub fn softmax<T: Element>(x: &Tensor<T>, tau: f64) -> Result<Tensor<T>> {
    check_tau(tau)?;
    let c = last_axis(x)?;
    let inv_tau = T::lit(1.0 / tau);
    let mut out = x.data().to_vec();
    for row in out.chunks_mut(c) {
        let m = row.iter().copied().fold(T::neg_infinity(), T::max);
        let mut s = T::zero();
        for v in row.iter_mut() {
            *v = ((*v - m) * inv_tau).exp();
            s += *v;
        }
        let inv = T::one() / s;
        row.iter_mut().for_each(|v| *v *= inv);
    }
    Tensor::new(x.shape().to_vec(), out)
}

/// Log-softmax of `x / tau` along the last axis.
pub fn log_softmax<T: Element>(x: &Tensor<T>, tau: f64) -> Result<Tensor<T>> {
    check_tau(tau)?;
    let c = last_axis(x)?;
    let inv_tau = T::lit(1.0 / tau);
    let mut out = x.data().to_vec();
    for row in out.chunks_mut(c) {
        let m = row.iter().copied().fold(T::neg_infinity(), T::max);
        let mut s = T::zero();
        for v in row.iter_mut() {
            *v = (*v - m) * inv_tau;
            s += v.exp();
        }
        let lse = s.ln();
        row.iter_mut().for_each(|v| *v -= lse);
    }
    Tensor::new(x.shape().to_vec(), out)
}

/// Given `y = softmax(x / tau)`, returns dL/dx.
pub fn softmax_backward<T: Element>(y: &Tensor<T>, g: &Tensor<T>, tau: f64) -> Tensor<T> {
    let c = *y.shape().last().unwrap();
    let inv_tau = T::lit(1.0 / tau);
    let mut dx = vec![T::zero(); y.numel()];
    for ((dr, yr), gr) in dx.chunks_mut(c).zip(y.data().chunks(c)).zip(g.data().chunks(c)) {
        let dot: T = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
        for i in 0..c {
            dr[i] = yr[i] * (gr[i] - dot) * inv_tau;
        }
    }
    Tensor::new(y.shape().to_vec(), dx).expect("same shape")
}

/// Given `y = log_softmax(x / tau)`, returns dL/dx.
pub fn log_softmax_backward<T: Element>(y: &Tensor<T>, g: &Tensor<T>, tau: f64) -> Tensor<T> {
    let c = *y.shape().last().unwrap();
    let inv_tau = T::lit(1.0 / tau);
    let mut dx = vec![T::zero(); y.numel()];
    for ((dr, yr), gr) in dx.chunks_mut(c).zip(y.data().chunks(c)).zip(g.data().chunks(c)) {
        let gs: T = gr.iter().copied().sum();
        for i in 0..c {
            dr[i] = (gr[i] - yr[i].exp() * gs) * inv_tau;
        }
    }
    Tensor::new(y.shape().to_vec(), dx).expect("same shape")
}
