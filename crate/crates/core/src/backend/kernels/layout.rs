use crate::backend::element::Element;
use crate::backend::tensor::{numel, strides, Tensor};
use crate::error::{Error, Result};

pub fn check_perm(ndim: usize, perm: &[usize]) -> Result<()> {
    let mut seen = vec![false; ndim];
    if perm.len() != ndim {
        return Err(Error::dim("permute", format!("{perm:?} for {ndim} axes")));
    }
    for &p in perm {
        if p >= ndim || seen[p] {
            return Err(Error::dim("permute", format!("{perm:?} is not a permutation")));
        }
        seen[p] = true;
    }
    Ok(())
}

pub fn inverse_perm(perm: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; perm.len()];
    for (i, &p) in perm.iter().enumerate() {
        inv[p] = i;
    }
    inv
}

/// `out.shape[i] = x.shape[perm[i]]`.
pub fn permute<T: Element>(x: &Tensor<T>, perm: &[usize]) -> Result<Tensor<T>> {
    check_perm(x.ndim(), perm)?;
    let in_st = strides(x.shape());
    let out_shape: Vec<usize> = perm.iter().map(|&p| x.shape()[p]).collect();
    let st: Vec<usize> = perm.iter().map(|&p| in_st[p]).collect();
    let nd = out_shape.len();
    let total = numel(&out_shape);
    let src = x.data();
    let mut out = Vec::with_capacity(total);
    if total == 0 || nd == 0 {
        return Tensor::new(out_shape, src.to_vec());
    }
    let inner = out_shape[nd - 1];
    let inner_st = st[nd - 1];
    let mut idx = vec![0usize; nd - 1];
    loop {
        let base: usize = (0..nd - 1).map(|d| idx[d] * st[d]).sum();
        if inner_st == 1 {
            out.extend_from_slice(&src[base..base + inner]);
        } else {
            out.extend((0..inner).map(|j| src[base + j * inner_st]));
        }
        let mut d = nd - 1;
        loop {
            if d == 0 {
                return Tensor::new(out_shape, out);
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

/// `(outer, axis_len, inner)` decomposition around `axis`.
pub fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    (
        numel(&shape[..axis]),
        shape[axis],
        numel(&shape[axis + 1..]),
    )
}

pub fn concat<T: Element>(items: &[&Tensor<T>], axis: usize) -> Result<Tensor<T>> {
    let first = items.first().ok_or_else(|| Error::dim("concat", "no inputs"))?;
    if axis >= first.ndim() {
        return Err(Error::dim("concat", format!("axis {axis} for {:?}", first.shape())));
    }
    let mut total_axis = 0;
    for t in items {
        let ok = t.ndim() == first.ndim()
            && t.shape()
                .iter()
                .zip(first.shape())
                .enumerate()
                .all(|(i, (a, b))| i == axis || a == b);
        if !ok {
            return Err(Error::dim(
                "concat",
                format!("{:?} vs {:?} along axis {axis}", t.shape(), first.shape()),
            ));
        }
        total_axis += t.shape()[axis];
    }
    let (outer, _, inner) = split_axis(first.shape(), axis);
    let mut shape = first.shape().to_vec();
    shape[axis] = total_axis;
    let mut out = Vec::with_capacity(numel(&shape));
    for o in 0..outer {
        for t in items {
            let len = t.shape()[axis] * inner;
            out.extend_from_slice(&t.data()[o * len..(o + 1) * len]);
        }
    }
    Tensor::new(shape, out)
}

pub fn slice<T: Element>(x: &Tensor<T>, axis: usize, start: usize, len: usize) -> Result<Tensor<T>> {
    if axis >= x.ndim() || start + len > x.shape()[axis] {
        return Err(Error::dim(
            "slice",
            format!("[{start}, {}) on axis {axis} of {:?}", start + len, x.shape()),
        ));
    }
    let (outer, alen, inner) = split_axis(x.shape(), axis);
    let mut shape = x.shape().to_vec();
    shape[axis] = len;
    let mut out = Vec::with_capacity(numel(&shape));
    for o in 0..outer {
        let base = (o * alen + start) * inner;
        out.extend_from_slice(&x.data()[base..base + len * inner]);
    }
    Tensor::new(shape, out)
}

/// Adjoint of [`slice`]: scatter `g` into zeros of `input_shape`.
pub fn unslice<T: Element>(g: &Tensor<T>, input_shape: &[usize], axis: usize, start: usize) -> Tensor<T> {
    let (outer, alen, inner) = split_axis(input_shape, axis);
    let len = g.shape()[axis];
    let mut out = Tensor::zeros(input_shape);
    let d = out.data_mut();
    for o in 0..outer {
        let dst = (o * alen + start) * inner;
        d[dst..dst + len * inner].copy_from_slice(&g.data()[o * len * inner..(o + 1) * len * inner]);
    }
    out
}

/// Mean over the given axes, keeping them as extent-1 axes.
pub fn mean_axes_keep<T: Element>(x: &Tensor<T>, axes: &[usize]) -> Result<Tensor<T>> {
    let mut shape = x.shape().to_vec();
    let mut count = 1;
    for &a in axes {
        if a >= shape.len() {
            return Err(Error::dim("mean", format!("axis {a} for {:?}", x.shape())));
        }
        count *= shape[a];
        shape[a] = 1;
    }
    let summed = super::broadcast::reduce_to_shape(x, &shape);
    let inv = T::one() / T::lit(count.max(1) as f64);
    Ok(summed.map(|v| v * inv))
}
