use crate::backend::element::Element;
use crate::backend::tensor::Tensor;
use crate::error::{Error, Result};

/// Half-pixel (align-corners = false) source sampling for one axis.
#[derive(Clone, Debug)]
pub(crate) struct AxisTaps {
    pub lo: Vec<usize>,
    pub hi: Vec<usize>,
    pub frac: Vec<f64>,
}

pub(crate) fn axis_taps(src: usize, dst: usize) -> AxisTaps {
    let scale = src as f64 / dst as f64;
    let mut taps = AxisTaps {
        lo: Vec::with_capacity(dst),
        hi: Vec::with_capacity(dst),
        frac: Vec::with_capacity(dst),
    };
    for d in 0..dst {
        let s = if src == dst {
            d as f64
        } else {
            ((d as f64 + 0.5) * scale - 0.5).clamp(0.0, (src - 1) as f64)
        };
        let lo = s.floor() as usize;
        taps.lo.push(lo);
        taps.hi.push((lo + 1).min(src - 1));
        taps.frac.push(s - lo as f64);
    }
    taps
}

fn check(x: &[usize], out_h: usize, out_w: usize) -> Result<(usize, usize, usize)> {
    let [n, c, h, w] = *x else {
        return Err(Error::dim("bilinear_resize", format!("expected NCHW, got {x:?}")));
    };
    if out_h == 0 || out_w == 0 || h == 0 || w == 0 {
        return Err(Error::Geometry {
            op: "bilinear_resize",
            detail: format!("cannot resize {h}x{w} to {out_h}x{out_w}"),
        });
    }
    Ok((n * c, h, w))
}

pub fn bilinear_forward<T: Element>(x: &Tensor<T>, out_h: usize, out_w: usize) -> Result<Tensor<T>> {
    let (planes, h, w) = check(x.shape(), out_h, out_w)?;
    let mut shape = x.shape().to_vec();
    shape[2] = out_h;
    shape[3] = out_w;
    if h == out_h && w == out_w {
        return Ok(x.clone());
    }
    let (ty, tx) = (axis_taps(h, out_h), axis_taps(w, out_w));
    let xd = x.data();
    let mut out = Vec::with_capacity(planes * out_h * out_w);
    for p in 0..planes {
        let src = &xd[p * h * w..(p + 1) * h * w];
        for oy in 0..out_h {
            let (y0, y1, fy) = (ty.lo[oy], ty.hi[oy], T::lit(ty.frac[oy]));
            for ox in 0..out_w {
                let (x0, x1, fx) = (tx.lo[ox], tx.hi[ox], T::lit(tx.frac[ox]));
                let top = src[y0 * w + x0] * (T::one() - fx) + src[y0 * w + x1] * fx;
                let bot = src[y1 * w + x0] * (T::one() - fx) + src[y1 * w + x1] * fx;
                out.push(top * (T::one() - fy) + bot * fy);
            }
        }
    }
    Tensor::new(shape, out)
}

pub fn bilinear_backward<T: Element>(input_shape: &[usize], grad_out: &Tensor<T>) -> Result<Tensor<T>> {
    let (out_h, out_w) = (grad_out.shape()[2], grad_out.shape()[3]);
    let (planes, h, w) = check(input_shape, out_h, out_w)?;
    if h == out_h && w == out_w {
        return Ok(grad_out.clone());
    }
    let (ty, tx) = (axis_taps(h, out_h), axis_taps(w, out_w));
    let gd = grad_out.data();
    let mut dx = vec![T::zero(); planes * h * w];
    for p in 0..planes {
        let dst = &mut dx[p * h * w..(p + 1) * h * w];
        let g = &gd[p * out_h * out_w..(p + 1) * out_h * out_w];
        for oy in 0..out_h {
            let (y0, y1, fy) = (ty.lo[oy], ty.hi[oy], T::lit(ty.frac[oy]));
            for ox in 0..out_w {
                let (x0, x1, fx) = (tx.lo[ox], tx.hi[ox], T::lit(tx.frac[ox]));
                let v = g[oy * out_w + ox];
                dst[y0 * w + x0] += v * (T::one() - fy) * (T::one() - fx);
                dst[y0 * w + x1] += v * (T::one() - fy) * fx;
                dst[y1 * w + x0] += v * fy * (T::one() - fx);
                dst[y1 * w + x1] += v * fy * fx;
            }
        }
    }
    Tensor::new(input_shape.to_vec(), dx)
}
