use crate::backend::element::Element;
use crate::backend::gemm::{gemm, MatRef};
use crate::backend::tensor::{numel, Tensor};
use crate::error::{Error, Result};

/// Shape bookkeeping for `op(a) @ op(b)` where `op` optionally transposes the
/// trailing two axes. `b` is either batched like `a` or a shared 2-D matrix.
#[derive(Clone, Debug)]
pub struct MatmulDims {
    pub batch: usize,
    pub m: usize,
    pub k: usize,
    pub n: usize,
    pub b_shared: bool,
    pub out_shape: Vec<usize>,
    a_rc: (usize, usize),
    b_rc: (usize, usize),
}

pub fn matmul_dims(a: &[usize], b: &[usize], ta: bool, tb: bool) -> Result<MatmulDims> {
    if a.len() < 2 || b.len() < 2 {
        return Err(Error::dim("matmul", format!("operands must be >= 2-D: {a:?}, {b:?}")));
    }
    let a_rc = (a[a.len() - 2], a[a.len() - 1]);
    let b_rc = (b[b.len() - 2], b[b.len() - 1]);
    let (m, ka) = if ta { (a_rc.1, a_rc.0) } else { a_rc };
    let (kb, n) = if tb { (b_rc.1, b_rc.0) } else { b_rc };
    if ka != kb {
        return Err(Error::dim(
            "matmul",
            format!("inner extents differ: {a:?}{} x {b:?}{}", if ta { "^T" } else { "" }, if tb { "^T" } else { "" }),
        ));
    }
    let a_batch = &a[..a.len() - 2];
    let b_batch = &b[..b.len() - 2];
    let b_shared = b_batch.is_empty();
    if !b_shared && a_batch != b_batch {
        return Err(Error::dim("matmul", format!("batch axes differ: {a:?} vs {b:?}")));
    }
    let mut out_shape = a_batch.to_vec();
    out_shape.push(m);
    out_shape.push(n);
    Ok(MatmulDims {
        batch: numel(a_batch),
        m,
        k: ka,
        n,
        b_shared,
        out_shape,
        a_rc,
        b_rc,
    })
}

impl MatmulDims {
    fn a_op<'a, T>(&self, a: &'a [T], i: usize, ta: bool) -> MatRef<'a, T> {
        let (r, c) = self.a_rc;
        let m = MatRef::new(&a[i * r * c..(i + 1) * r * c], r, c);
        if ta {
            m.t()
        } else {
            m
        }
    }

    fn b_op<'a, T>(&self, b: &'a [T], i: usize, tb: bool) -> MatRef<'a, T> {
        let (r, c) = self.b_rc;
        let j = if self.b_shared { 0 } else { i };
        let m = MatRef::new(&b[j * r * c..(j + 1) * r * c], r, c);
        if tb {
            m.t()
        } else {
            m
        }
    }
}

pub fn matmul_forward<T: Element>(a: &Tensor<T>, b: &Tensor<T>, ta: bool, tb: bool) -> Result<Tensor<T>> {
    let d = matmul_dims(a.shape(), b.shape(), ta, tb)?;
    // A shared right operand with an untransposed left one collapses into a
    // single tall product.
    if d.b_shared && !ta {
        let mut out = vec![T::zero(); d.batch * d.m * d.n];
        let tall = MatRef::new(a.data(), d.batch * d.m, d.k);
        gemm(tall, d.b_op(b.data(), 0, tb), &mut out, false);
        return Tensor::new(d.out_shape, out);
    }
    let mut out = vec![T::zero(); d.batch * d.m * d.n];
    for (i, c) in out.chunks_mut(d.m * d.n).enumerate() {
        gemm(d.a_op(a.data(), i, ta), d.b_op(b.data(), i, tb), c, false);
    }
    Tensor::new(d.out_shape, out)
}

pub fn matmul_backward<T: Element>(
    a: &Tensor<T>,
    b: &Tensor<T>,
    ta: bool,
    tb: bool,
    g: &Tensor<T>,
    need: (bool, bool),
) -> Result<(Option<Tensor<T>>, Option<Tensor<T>>)> {
    let d = matmul_dims(a.shape(), b.shape(), ta, tb)?;
    let (m, k, n) = (d.m, d.k, d.n);
    let gd = g.data();
    let grad_a = if need.0 {
        let mut da = vec![T::zero(); a.numel()];
        if d.b_shared && !ta {
            let gm = MatRef::new(gd, d.batch * m, n);
            gemm(gm, d.b_op(b.data(), 0, tb).t(), &mut da, false);
        } else {
            for (i, dst) in da.chunks_mut(m * k).enumerate() {
                let gi = MatRef::new(&gd[i * m * n..(i + 1) * m * n], m, n);
                let opb = d.b_op(b.data(), i, tb);
                if ta {
                    gemm(opb, gi.t(), dst, false);
                } else {
                    gemm(gi, opb.t(), dst, false);
                }
            }
        }
        Some(Tensor::new(a.shape().to_vec(), da)?)
    } else {
        None
    };
    let grad_b = if need.1 {
        let mut db = vec![T::zero(); b.numel()];
        if d.b_shared && !ta {
            let gm = MatRef::new(gd, d.batch * m, n);
            let am = MatRef::new(a.data(), d.batch * m, k);
            if tb {
                gemm(gm.t(), am, &mut db, false);
            } else {
                gemm(am.t(), gm, &mut db, false);
            }
        } else {
            let per = k * n;
            for i in 0..d.batch {
                let gi = MatRef::new(&gd[i * m * n..(i + 1) * m * n], m, n);
                let opa = d.a_op(a.data(), i, ta);
                let (dst, acc) = if d.b_shared {
                    (&mut db[..], i > 0)
                } else {
                    (&mut db[i * per..(i + 1) * per], false)
                };
                if tb {
                    gemm(gi.t(), opa, dst, acc);
                } else {
                    gemm(opa.t(), gi, dst, acc);
                }
            }
        }
        Some(Tensor::new(b.shape().to_vec(), db)?)
    } else {
        None
    };
    Ok((grad_a, grad_b))
}
