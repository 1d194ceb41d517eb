use crate::backend::element::Element;
use crate::backend::tensor::Tensor;
use crate::error::{Error, Result};

/// `(outer, channels, inner)` view used by batch normalization.
///
/// NCHW normalizes over (N, H, W); token input (N, T, C) and flat features
/// (N, C) normalize over every axis except the last.
pub fn bn_layout(shape: &[usize]) -> Result<(usize, usize, usize)> {
    match *shape {
        [n, c] => Ok((n, c, 1)),
        [n, t, c] => Ok((n * t, c, 1)),
        [n, c, h, w] => Ok((n, c, h * w)),
        _ => Err(Error::dim(
            "batch_norm",
            format!("expected 2-D, 3-D or 4-D input, got {shape:?}"),
        )),
    }
}

pub struct BnTrainOutput<T> {
    pub y: Tensor<T>,
    pub mean: Vec<T>,
    pub inv_std: Vec<T>,
    /// Unbiased batch variance, used for the running estimate.
    pub var_unbiased: Vec<T>,
}

fn check_params<T: Element>(c: usize, params: &[&Tensor<T>]) -> Result<()> {
    for p in params {
        if p.shape() != [c] {
            return Err(Error::dim(
                "batch_norm",
                format!("parameter shape {:?} for {c} channels", p.shape()),
            ));
        }
    }
    Ok(())
}

#[inline]
fn channel(outer: usize, c: usize, inner: usize, ch: usize) -> impl Iterator<Item = usize> {
    (0..outer).flat_map(move |o| {
        let base = (o * c + ch) * inner;
        base..base + inner
    })
}

pub fn batch_norm_train<T: Element>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    eps: f64,
) -> Result<BnTrainOutput<T>> {
    let (outer, c, inner) = bn_layout(x.shape())?;
    check_params(c, &[gamma, beta])?;
    let m = outer * inner;
    if m < 2 {
        return Err(Error::DegenerateVariance(format!(
            "train-mode statistics over {m} element(s) per channel for input {:?}",
            x.shape()
        )));
    }
    let xd = x.data();
    let mut mean = vec![T::zero(); c];
    let mut inv_std = vec![T::zero(); c];
    let mut var_unbiased = vec![T::zero(); c];
    let mut y = vec![T::zero(); xd.len()];
    for ch in 0..c {
        let mut s = 0.0f64;
        for i in channel(outer, c, inner, ch) {
            s += xd[i].to_f64_lossy();
        }
        let mu = s / m as f64;
        let mut ss = 0.0f64;
        for i in channel(outer, c, inner, ch) {
            let d = xd[i].to_f64_lossy() - mu;
            ss += d * d;
        }
        let var = ss / m as f64;
        let inv = 1.0 / (var + eps).sqrt();
        mean[ch] = T::lit(mu);
        inv_std[ch] = T::lit(inv);
        var_unbiased[ch] = T::lit(ss / (m - 1) as f64);
        let scale = gamma.data()[ch] * T::lit(inv);
        let shift = beta.data()[ch] - T::lit(mu) * scale;
        for i in channel(outer, c, inner, ch) {
            y[i] = xd[i] * scale + shift;
        }
    }
    Ok(BnTrainOutput {
        y: Tensor::new(x.shape().to_vec(), y)?,
        mean,
        inv_std,
        var_unbiased,
    })
}

/// Per-channel `(scale, shift)` of the eval-mode affine map.
pub fn bn_eval_affine<T: Element>(
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    running_mean: &Tensor<T>,
    running_var: &Tensor<T>,
    eps: f64,
) -> (Vec<T>, Vec<T>) {
    let c = gamma.numel();
    let mut scale = vec![T::zero(); c];
    let mut shift = vec![T::zero(); c];
    for ch in 0..c {
        let inv = T::one() / (running_var.data()[ch] + T::lit(eps)).sqrt();
        scale[ch] = gamma.data()[ch] * inv;
        shift[ch] = beta.data()[ch] - running_mean.data()[ch] * scale[ch];
    }
    (scale, shift)
}

pub fn batch_norm_eval<T: Element>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    running_mean: &Tensor<T>,
    running_var: &Tensor<T>,
    eps: f64,
) -> Result<Tensor<T>> {
    let (outer, c, inner) = bn_layout(x.shape())?;
    check_params(c, &[gamma, beta, running_mean, running_var])?;
    let (scale, shift) = bn_eval_affine(gamma, beta, running_mean, running_var, eps);
    let mut y = x.data().to_vec();
    for o in 0..outer {
        for ch in 0..c {
            let base = (o * c + ch) * inner;
            for v in &mut y[base..base + inner] {
                *v = *v * scale[ch] + shift[ch];
            }
        }
    }
    Tensor::new(x.shape().to_vec(), y)
}

pub struct BnGrads<T> {
    pub input: Tensor<T>,
    pub gamma: Tensor<T>,
    pub beta: Tensor<T>,
}

/// Backward pass. `train` selects batch-statistics semantics; otherwise the
/// statistics are constants and `mean`/`inv_std` come from running estimates.
pub fn batch_norm_backward<T: Element>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    mean: &[T],
    inv_std: &[T],
    grad_out: &Tensor<T>,
    train: bool,
) -> Result<BnGrads<T>> {
    let (outer, c, inner) = bn_layout(x.shape())?;
    let m = (outer * inner) as f64;
    let (xd, gd) = (x.data(), grad_out.data());
    let mut dx = vec![T::zero(); xd.len()];
    let mut dgamma = vec![T::zero(); c];
    let mut dbeta = vec![T::zero(); c];
    for ch in 0..c {
        let (mu, inv) = (mean[ch], inv_std[ch]);
        let mut sum_g = 0.0f64;
        let mut sum_gx = 0.0f64;
        for i in channel(outer, c, inner, ch) {
            let xhat = ((xd[i] - mu) * inv).to_f64_lossy();
            let g = gd[i].to_f64_lossy();
            sum_g += g;
            sum_gx += g * xhat;
        }
        dgamma[ch] = T::lit(sum_gx);
        dbeta[ch] = T::lit(sum_g);
        let k = gamma.data()[ch] * inv;
        if train {
            let mean_g = T::lit(sum_g / m);
            let mean_gx = T::lit(sum_gx / m);
            for i in channel(outer, c, inner, ch) {
                let xhat = (xd[i] - mu) * inv;
                dx[i] = k * (gd[i] - mean_g - xhat * mean_gx);
            }
        } else {
            for i in channel(outer, c, inner, ch) {
                dx[i] = k * gd[i];
            }
        }
    }
    Ok(BnGrads {
        input: Tensor::new(x.shape().to_vec(), dx)?,
        gamma: Tensor::from_vec(dgamma),
        beta: Tensor::from_vec(dbeta),
    })
}
