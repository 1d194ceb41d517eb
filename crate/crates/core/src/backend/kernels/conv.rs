//! 2-D convolution through im2col and one batched matrix product.
//!
//! The whole mini-batch is unfolded into a single `(C*Kh*Kw) x (N*Ho*Wo)`
//! column matrix so that even deep stages with tiny spatial extent run as one
//! large product.

use rayon::prelude::*;

use crate::backend::element::Element;
use crate::backend::gemm::{gemm, MatRef};
use crate::backend::tensor::Tensor;
use crate::error::{Error, Result};

#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub o: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub padding: usize,
    pub ho: usize,
    pub wo: usize,
}

/// Output extent of a strided window, floor convention.
pub fn conv_out_extent(size: usize, kernel: usize, stride: usize, padding: usize) -> Option<usize> {
    let padded = size + 2 * padding;
    if stride == 0 || padded < kernel {
        None
    } else {
        Some((padded - kernel) / stride + 1)
    }
}

impl ConvGeometry {
    pub fn new(
        input: &[usize],
        weight: &[usize],
        stride: usize,
        padding: usize,
    ) -> Result<ConvGeometry> {
        if input.len() != 4 || weight.len() != 4 {
            return Err(Error::dim(
                "conv2d",
                format!("expected NCHW input and OIKhKw weight, got {input:?} and {weight:?}"),
            ));
        }
        if input[1] != weight[1] {
            return Err(Error::dim(
                "conv2d",
                format!("input has {} channels, weight expects {}", input[1], weight[1]),
            ));
        }
        if stride == 0 {
            return Err(Error::Geometry {
                op: "conv2d",
                detail: "stride must be >= 1".into(),
            });
        }
        let (kh, kw) = (weight[2], weight[3]);
        let geo = |size, k| {
            conv_out_extent(size, k, stride, padding).ok_or_else(|| Error::Geometry {
                op: "conv2d",
                detail: format!("kernel {k} does not fit extent {size} with padding {padding}"),
            })
        };
        Ok(ConvGeometry {
            n: input[0],
            c: input[1],
            h: input[2],
            w: input[3],
            o: weight[0],
            kh,
            kw,
            stride,
            padding,
            ho: geo(input[2], kh)?,
            wo: geo(input[3], kw)?,
        })
    }

    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.padding == 0
    }

    fn ckk(&self) -> usize {
        self.c * self.kh * self.kw
    }

    fn cols(&self) -> usize {
        self.n * self.ho * self.wo
    }
}

/// Unfold the input into a `(C*Kh*Kw) x (N*Ho*Wo)` matrix.
fn im2col<T: Element>(x: &[T], g: &ConvGeometry) -> Vec<T> {
    let cols = g.cols();
    let (hw, howo) = (g.h * g.w, g.ho * g.wo);
    let mut out = vec![T::zero(); g.ckk() * cols];
    out.par_chunks_mut(g.kh * g.kw * cols)
        .enumerate()
        .for_each(|(c, rows)| {
            for kh in 0..g.kh {
                for kw in 0..g.kw {
                    let row = &mut rows[(kh * g.kw + kw) * cols..(kh * g.kw + kw + 1) * cols];
                    for n in 0..g.n {
                        let plane = &x[(n * g.c + c) * hw..(n * g.c + c + 1) * hw];
                        let dst = &mut row[n * howo..(n + 1) * howo];
                        for oh in 0..g.ho {
                            let ih = (oh * g.stride + kh) as isize - g.padding as isize;
                            let line = &mut dst[oh * g.wo..(oh + 1) * g.wo];
                            if ih < 0 || ih >= g.h as isize {
                                continue;
                            }
                            let src = &plane[ih as usize * g.w..(ih as usize + 1) * g.w];
                            for (ow, v) in line.iter_mut().enumerate() {
                                let iw = (ow * g.stride + kw) as isize - g.padding as isize;
                                if iw >= 0 && iw < g.w as isize {
                                    *v = src[iw as usize];
                                }
                            }
                        }
                    }
                }
            }
        });
    out
}

/// Fold a column matrix back onto an NCHW image, summing overlaps.
fn col2im<T: Element>(cols_m: &[T], g: &ConvGeometry) -> Vec<T> {
    let cols = g.cols();
    let (hw, howo) = (g.h * g.w, g.ho * g.wo);
    // Accumulate in C-major layout so channels can be processed independently.
    let mut cmajor = vec![T::zero(); g.c * g.n * hw];
    cmajor
        .par_chunks_mut(g.n * hw)
        .enumerate()
        .for_each(|(c, dst)| {
            let rows = &cols_m[c * g.kh * g.kw * cols..(c + 1) * g.kh * g.kw * cols];
            for kh in 0..g.kh {
                for kw in 0..g.kw {
                    let row = &rows[(kh * g.kw + kw) * cols..(kh * g.kw + kw + 1) * cols];
                    for n in 0..g.n {
                        let plane = &mut dst[n * hw..(n + 1) * hw];
                        let src = &row[n * howo..(n + 1) * howo];
                        for oh in 0..g.ho {
                            let ih = (oh * g.stride + kh) as isize - g.padding as isize;
                            if ih < 0 || ih >= g.h as isize {
                                continue;
                            }
                            let line = &mut plane[ih as usize * g.w..(ih as usize + 1) * g.w];
                            for ow in 0..g.wo {
                                let iw = (ow * g.stride + kw) as isize - g.padding as isize;
                                if iw >= 0 && iw < g.w as isize {
                                    line[iw as usize] += src[oh * g.wo + ow];
                                }
                            }
                        }
                    }
                }
            }
        });
    nc_swap(&cmajor, g.c, g.n, hw)
}

/// `[a][b][inner] -> [b][a][inner]`.
fn nc_swap<T: Element>(x: &[T], a: usize, b: usize, inner: usize) -> Vec<T> {
    let mut out = vec![T::zero(); x.len()];
    for i in 0..a {
        for j in 0..b {
            out[(j * a + i) * inner..(j * a + i + 1) * inner]
                .copy_from_slice(&x[(i * b + j) * inner..(i * b + j + 1) * inner]);
        }
    }
    out
}

fn columns<T: Element>(x: &[T], g: &ConvGeometry) -> Vec<T> {
    if g.is_pointwise() {
        nc_swap(x, g.n, g.c, g.h * g.w)
    } else {
        im2col(x, g)
    }
}

pub fn conv2d_forward<T: Element>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    stride: usize,
    padding: usize,
) -> Result<Tensor<T>> {
    let g = ConvGeometry::new(x.shape(), weight.shape(), stride, padding)?;
    if let Some(b) = bias {
        if b.shape() != [g.o] {
            return Err(Error::dim(
                "conv2d",
                format!("bias shape {:?} for {} output channels", b.shape(), g.o),
            ));
        }
    }
    let cols = columns(x.data(), &g);
    let mut y = vec![T::zero(); g.o * g.cols()];
    gemm(
        MatRef::new(weight.data(), g.o, g.ckk()),
        MatRef::new(&cols, g.ckk(), g.cols()),
        &mut y,
        false,
    );
    let howo = g.ho * g.wo;
    let mut out = nc_swap(&y, g.o, g.n, howo);
    if let Some(b) = bias {
        for (i, chunk) in out.chunks_mut(howo).enumerate() {
            let bv = b.data()[i % g.o];
            chunk.iter_mut().for_each(|v| *v += bv);
        }
    }
    Tensor::new(vec![g.n, g.o, g.ho, g.wo], out)
}

pub struct ConvGrads<T> {
    pub input: Option<Tensor<T>>,
    pub weight: Option<Tensor<T>>,
    pub bias: Option<Tensor<T>>,
}

pub fn conv2d_backward<T: Element>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    has_bias: bool,
    grad_out: &Tensor<T>,
    stride: usize,
    padding: usize,
    need: (bool, bool, bool),
) -> Result<ConvGrads<T>> {
    let g = ConvGeometry::new(x.shape(), weight.shape(), stride, padding)?;
    let howo = g.ho * g.wo;
    // (N, O, HoWo) -> (O, N*HoWo)
    let gy = nc_swap(grad_out.data(), g.n, g.o, howo);

    let weight_grad = if need.1 {
        let cols = columns(x.data(), &g);
        let mut dw = vec![T::zero(); g.o * g.ckk()];
        gemm(
            MatRef::new(&gy, g.o, g.cols()),
            MatRef::new(&cols, g.ckk(), g.cols()).t(),
            &mut dw,
            false,
        );
        Some(Tensor::new(weight.shape().to_vec(), dw)?)
    } else {
        None
    };

    let input_grad = if need.0 {
        let mut dcols = vec![T::zero(); g.ckk() * g.cols()];
        gemm(
            MatRef::new(weight.data(), g.o, g.ckk()).t(),
            MatRef::new(&gy, g.o, g.cols()),
            &mut dcols,
            false,
        );
        let dx = if g.is_pointwise() {
            nc_swap(&dcols, g.c, g.n, g.h * g.w)
        } else {
            col2im(&dcols, &g)
        };
        Some(Tensor::new(x.shape().to_vec(), dx)?)
    } else {
        None
    };

    let bias_grad = if has_bias && need.2 {
        let mut db = vec![T::zero(); g.o];
        for (o, row) in gy.chunks(g.cols()).enumerate() {
            db[o] = row.iter().copied().sum();
        }
        Some(Tensor::from_vec(db))
    } else {
        None
    };

    Ok(ConvGrads {
        input: input_grad,
        weight: weight_grad,
        bias: bias_grad,
    })
}
