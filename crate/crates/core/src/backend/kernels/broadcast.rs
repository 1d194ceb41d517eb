use crate::backend::element::Element;
use crate::backend::tensor::{numel, strides, Tensor};
use crate::error::{Error, Result};

/// Numpy-style broadcast of two shapes (right-aligned).
pub fn broadcast_shape(a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    let nd = a.len().max(b.len());
    let mut out = vec![0; nd];
    for i in 0..nd {
        let da = if i + a.len() >= nd { a[i + a.len() - nd] } else { 1 };
        let db = if i + b.len() >= nd { b[i + b.len() - nd] } else { 1 };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => {
                return Err(Error::dim(
                    "broadcast",
                    format!("{a:?} and {b:?} are not broadcastable"),
                ))
            }
        };
    }
    Ok(out)
}

/// Strides of `shape` viewed inside `out` (zero along broadcast axes).
fn broadcast_strides(shape: &[usize], out: &[usize]) -> Vec<usize> {
    let st = strides(shape);
    let off = out.len() - shape.len();
    (0..out.len())
        .map(|i| {
            if i < off || shape[i - off] == 1 {
                0
            } else {
                st[i - off]
            }
        })
        .collect()
}

/// Walk every index of `out_shape`, calling `f(out_offset, off_a, off_b)`.
/// Iterates the innermost axis in a tight loop.
fn for_each_pair(
    out_shape: &[usize],
    sa: &[usize],
    sb: &[usize],
    mut f: impl FnMut(usize, usize, usize),
) {
    let nd = out_shape.len();
    let total = numel(out_shape);
    if total == 0 {
        return;
    }
    if nd == 0 {
        f(0, 0, 0);
        return;
    }
    let inner = out_shape[nd - 1];
    let (ia, ib) = (sa[nd - 1], sb[nd - 1]);
    let mut idx = vec![0usize; nd - 1];
    let mut out = 0;
    loop {
        let mut oa = 0;
        let mut ob = 0;
        for d in 0..nd - 1 {
            oa += idx[d] * sa[d];
            ob += idx[d] * sb[d];
        }
        for j in 0..inner {
            f(out + j, oa + j * ia, ob + j * ib);
        }
        out += inner;
        // odometer over outer axes
        let mut d = nd - 1;
        loop {
            if d == 0 {
                return;
            }
            d -= 1;
            idx[d] += 1;
            if idx[d] < out_shape[d] {
                break;
            }
            idx[d] = 0;
        }
    }
}

pub fn binary<T: Element>(
    a: &Tensor<T>,
    b: &Tensor<T>,
    op: &'static str,
    f: impl Fn(T, T) -> T,
) -> Result<Tensor<T>> {
    if a.shape() == b.shape() {
        let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
        return Tensor::new(a.shape().to_vec(), data);
    }
    let out_shape = broadcast_shape(a.shape(), b.shape()).map_err(|_| {
        Error::dim(op, format!("{:?} vs {:?}", a.shape(), b.shape()))
    })?;
    let sa = broadcast_strides(a.shape(), &out_shape);
    let sb = broadcast_strides(b.shape(), &out_shape);
    let mut data = vec![T::zero(); numel(&out_shape)];
    let (da, db) = (a.data(), b.data());
    for_each_pair(&out_shape, &sa, &sb, |o, i, j| data[o] = f(da[i], db[j]));
    Tensor::new(out_shape, data)
}

/// Materialize `x` broadcast to `shape`.
pub fn broadcast_to<T: Element>(x: &Tensor<T>, shape: &[usize]) -> Result<Tensor<T>> {
    let out = broadcast_shape(x.shape(), shape)?;
    if out != shape {
        return Err(Error::dim(
            "expand",
            format!("{:?} cannot expand to {:?}", x.shape(), shape),
        ));
    }
    if x.shape() == shape {
        return Ok(x.clone());
    }
    let sx = broadcast_strides(x.shape(), shape);
    let zero = vec![0; shape.len()];
    let mut data = vec![T::zero(); numel(shape)];
    let src = x.data();
    for_each_pair(shape, &sx, &zero, |o, i, _| data[o] = src[i]);
    Tensor::new(shape.to_vec(), data)
}

/// Sum `g` down to `shape`, undoing a broadcast. Accumulation order is fixed.
pub fn reduce_to_shape<T: Element>(g: &Tensor<T>, shape: &[usize]) -> Tensor<T> {
    if g.shape() == shape {
        return g.clone();
    }
    let st = broadcast_strides(shape, g.shape());
    let zero = vec![0; g.ndim()];
    let mut out = vec![T::zero(); numel(shape)];
    let src = g.data();
    for_each_pair(g.shape(), &st, &zero, |o, t, _| out[t] += src[o]);
    Tensor::new(shape.to_vec(), out).expect("reduced shape")
}
