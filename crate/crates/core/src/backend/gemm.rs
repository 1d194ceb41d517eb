//! Matrix products over row-major buffers.
//!
//! Large products are split into fixed 64-row blocks of the output and the
//! blocks are evaluated in parallel. The split depends only on the problem
//! size, and every output element is produced by exactly one kernel call, so
//! results are bit-identical for any thread count.

use rayon::prelude::*;

use super::element::Element;

const ROW_BLOCK: usize = 64;
const PARALLEL_MIN_WORK: usize = 1 << 21;

/// Logical view of a row-major `rows x cols` matrix, optionally transposed.
#[derive(Copy, Clone, Debug)]
pub struct MatRef<'a, T> {
    pub data: &'a [T],
    pub rows: usize,
    pub cols: usize,
    pub transposed: bool,
}

impl<'a, T> MatRef<'a, T> {
    pub fn new(data: &'a [T], rows: usize, cols: usize) -> Self {
        MatRef {
            data,
            rows,
            cols,
            transposed: false,
        }
    }

    pub fn t(self) -> Self {
        MatRef {
            transposed: !self.transposed,
            ..self
        }
    }

    /// Shape after applying the transpose flag.
    fn dims(&self) -> (usize, usize) {
        if self.transposed {
            (self.cols, self.rows)
        } else {
            (self.rows, self.cols)
        }
    }

    /// (row stride, column stride) of the logical matrix.
    fn strides(&self) -> (isize, isize) {
        if self.transposed {
            (1, self.cols as isize)
        } else {
            (self.cols as isize, 1)
        }
    }
}

/// `c = a * b + (accumulate ? c : 0)` with `c` row-major `m x n`.
pub fn gemm<T: Element>(a: MatRef<'_, T>, b: MatRef<'_, T>, c: &mut [T], accumulate: bool) {
    let (m, k) = a.dims();
    let (kb, n) = b.dims();
    assert_eq!(k, kb, "gemm inner dimensions");
    assert_eq!(a.data.len(), a.rows * a.cols);
    assert_eq!(b.data.len(), b.rows * b.cols);
    assert_eq!(c.len(), m * n, "gemm output size");
    if m == 0 || n == 0 {
        return;
    }
    let beta = if accumulate { T::one() } else { T::zero() };
    if k == 0 {
        if !accumulate {
            c.iter_mut().for_each(|x| *x = T::zero());
        }
        return;
    }
    let (rsa, csa) = a.strides();
    let (rsb, csb) = b.strides();
    let (a_data, b_data) = (a.data, b.data);

    let run = |row0: usize, block: &mut [T]| {
        let rows = block.len() / n;
        // SAFETY: row0 + rows <= m, strides describe the validated buffers and
        // `block` is an exclusive slice of exactly rows x n elements.
        unsafe {
            T::gemm_raw(
                rows,
                k,
                n,
                T::one(),
                a_data.as_ptr().offset(row0 as isize * rsa),
                rsa,
                csa,
                b_data.as_ptr(),
                rsb,
                csb,
                beta,
                block.as_mut_ptr(),
                n as isize,
                1,
            );
        }
    };

    if m > ROW_BLOCK && m * n * k >= PARALLEL_MIN_WORK {
        c.par_chunks_mut(ROW_BLOCK * n)
            .enumerate()
            .for_each(|(i, block)| run(i * ROW_BLOCK, block));
    } else {
        run(0, c);
    }
}
