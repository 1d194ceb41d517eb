use crate::backend::Tensor;
use crate::error::{Error, Result};

/// Fixed 2-D sinusoidal positions for an `h x w` token grid, `(h * w, dim)`.
///
/// Token `t = row * w + col`. The first `dim / 2` channels encode the column
/// (`sin` block then `cos` block), the last `dim / 2` encode the row the same
/// way, with frequencies `1 / 10000^(i / (dim / 4))`.
pub fn sinusoidal_pos_enc_2d(h: usize, w: usize, dim: usize) -> Result<Tensor<f64>> {
    if dim == 0 || dim % 4 != 0 {
        return Err(Error::Config(format!("positional dim must be a positive multiple of 4, got {dim}")));
    }
    let q = dim / 4;
    let omega: Vec<f64> = (0..q).map(|i| 1.0 / 10000f64.powf(i as f64 / q as f64)).collect();
    let mut out = Vec::with_capacity(h * w * dim);
    for row in 0..h {
        for col in 0..w {
            let (x, y) = (col as f64, row as f64);
            out.extend(omega.iter().map(|&o| (x * o).sin()));
            out.extend(omega.iter().map(|&o| (x * o).cos()));
            out.extend(omega.iter().map(|&o| (y * o).sin()));
            out.extend(omega.iter().map(|&o| (y * o).cos()));
        }
    }
    Tensor::new(vec![h * w, dim], out)
}
