use crate::backend::element::Element;
use crate::backend::kernels::conv::conv_out_extent;
use crate::backend::tensor::Tensor;
use crate::error::{Error, Result};

/// Max pooling over NCHW input; also returns the flat argmax index of every
/// output element for the backward pass.
pub fn max_pool2d_forward<T: Element>(
    x: &Tensor<T>,
    kernel: usize,
    stride: usize,
    padding: usize,
) -> Result<(Tensor<T>, Vec<usize>)> {
    let [n, c, h, w] = *x.shape() else {
        return Err(Error::dim("max_pool2d", format!("expected NCHW, got {:?}", x.shape())));
    };
    if padding * 2 > kernel {
        return Err(Error::Geometry {
            op: "max_pool2d",
            detail: format!("padding {padding} exceeds half of kernel {kernel}"),
        });
    }
    let geo = |s| {
        conv_out_extent(s, kernel, stride, padding).ok_or_else(|| Error::Geometry {
            op: "max_pool2d",
            detail: format!("kernel {kernel} does not fit extent {s}"),
        })
    };
    let (ho, wo) = (geo(h)?, geo(w)?);
    let xd = x.data();
    let mut out = Vec::with_capacity(n * c * ho * wo);
    let mut arg = Vec::with_capacity(n * c * ho * wo);
    for plane in 0..n * c {
        let base = plane * h * w;
        for oh in 0..ho {
            for ow in 0..wo {
                let mut best = T::neg_infinity();
                let mut best_i = base;
                for kh in 0..kernel {
                    let ih = (oh * stride + kh) as isize - padding as isize;
                    if ih < 0 || ih >= h as isize {
                        continue;
                    }
                    for kw in 0..kernel {
                        let iw = (ow * stride + kw) as isize - padding as isize;
                        if iw < 0 || iw >= w as isize {
                            continue;
                        }
                        let i = base + ih as usize * w + iw as usize;
                        if xd[i] > best || xd[i].is_nan() {
                            best = xd[i];
                            best_i = i;
                        }
                    }
                }
                out.push(best);
                arg.push(best_i);
            }
        }
    }
    Ok((Tensor::new(vec![n, c, ho, wo], out)?, arg))
}

pub fn max_pool2d_backward<T: Element>(
    input_shape: &[usize],
    argmax: &[usize],
    grad_out: &Tensor<T>,
) -> Tensor<T> {
    let mut dx = Tensor::zeros(input_shape);
    let d = dx.data_mut();
    for (&i, &g) in argmax.iter().zip(grad_out.data()) {
        d[i] += g;
    }
    dx
}
