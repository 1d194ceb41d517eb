use serde::{Deserialize, Serialize};

use super::{chw, crop, resize_image, CropBox};
use crate::backend::{Element, RngStream, Tensor};
use crate::error::{Error, Result};

#[derive(Copy, Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Policy {
    Train,
    Eval,
}

/// One TrivialAugment member. Strengths are signed and drawn uniformly from
/// `[-max, max]` (or `[0, max]` for identity, which ignores it).
#[derive(Copy, Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaOp {
    Identity,
    /// Degrees.
    Rotate,
    /// Horizontal shear factor.
    ShearX,
    ShearY,
    /// Fraction of the image width.
    TranslateX,
    /// Fraction of the image height.
    TranslateY,
    /// Enhancement factor `1 + s` against black.
    Brightness,
    /// Enhancement factor `1 + s` against the mean gray level.
    Contrast,
    /// Enhancement factor `1 + s` against a 3x3 smoothed copy.
    Sharpness,
}

pub const TA_OPS: [TaOp; 9] = [
    TaOp::Identity,
    TaOp::Rotate,
    TaOp::ShearX,
    TaOp::ShearY,
    TaOp::TranslateX,
    TaOp::TranslateY,
    TaOp::Brightness,
    TaOp::Contrast,
    TaOp::Sharpness,
];

impl TaOp {
    pub fn max_strength(self) -> f64 {
        match self {
            TaOp::Identity => 0.0,
            TaOp::Rotate => 30.0,
            TaOp::ShearX | TaOp::ShearY => 0.3,
            TaOp::TranslateX | TaOp::TranslateY => 0.45,
            TaOp::Brightness | TaOp::Contrast | TaOp::Sharpness => 0.9,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AugmentConfig {
    /// Range of the attention-crop threshold.
    pub crop_threshold: [f64; 2],
    /// Range of the attention-drop threshold.
    pub drop_threshold: [f64; 2],
    /// Area fraction range of the random resized crop.
    pub rrc_scale: [f64; 2],
    pub rrc_ratio: [f64; 2],
    pub flip_prob: f64,
    /// TrivialAugment members; empty disables it.
    pub trivial_augment: Vec<TaOp>,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            crop_threshold: [0.4, 0.6],
            drop_threshold: [0.2, 0.5],
            rrc_scale: [0.5, 1.0],
            rrc_ratio: [3.0 / 4.0, 4.0 / 3.0],
            flip_prob: 0.5,
            trivial_augment: TA_OPS.to_vec(),
        }
    }
}

impl AugmentConfig {
    pub fn validate(&self) -> Result<()> {
        let range = |name: &str, r: [f64; 2], lo: f64, hi: f64, open: bool| {
            let inside = |v: f64| if open { v > lo && v < hi } else { v >= lo && v <= hi };
            if inside(r[0]) && inside(r[1]) && r[0] <= r[1] {
                Ok(())
            } else {
                Err(Error::Config(format!("augment.{name} = {r:?} is not an ordered range within ({lo}, {hi})")))
            }
        };
        range("crop_threshold", self.crop_threshold, 0.0, 1.0, true)?;
        range("drop_threshold", self.drop_threshold, 0.0, 1.0, true)?;
        range("rrc_scale", self.rrc_scale, 0.0, 1.0, false)?;
        if self.rrc_scale[0] <= 0.0 {
            return Err(Error::Config("augment.rrc_scale must be positive".into()));
        }
        if !(self.rrc_ratio[0] > 0.0 && self.rrc_ratio[0] <= self.rrc_ratio[1]) {
            return Err(Error::Config(format!("augment.rrc_ratio = {:?} is invalid", self.rrc_ratio)));
        }
        if !(0.0..=1.0).contains(&self.flip_prob) {
            return Err(Error::Config(format!("augment.flip_prob = {} is not a probability", self.flip_prob)));
        }
        Ok(())
    }
}

/// `(x - mean[c]) / std[c]` per channel.
pub fn standardize<T: Element>(image: &Tensor<T>, mean: &[f64; 3], std: &[f64; 3]) -> Result<Tensor<T>> {
    let (c, h, w) = chw(image, "standardize")?;
    if c != 3 {
        return Err(Error::dim("standardize", format!("expected 3 channels, got {c}")));
    }
    let mut out = image.clone();
    for (ch, plane) in out.data_mut().chunks_mut(h * w).enumerate() {
        let (m, s) = (T::lit(mean[ch]), T::lit(1.0 / std[ch]));
        plane.iter_mut().for_each(|v| *v = (*v - m) * s);
    }
    Ok(out)
}

fn check_size(h: usize, w: usize, target: usize) -> Result<()> {
    if target == 0 || h < target || w < target {
        return Err(Error::Geometry {
            op: "standard_augment",
            detail: format!("image {h}x{w} is smaller than target size {target}"),
        });
    }
    Ok(())
}

/// Shorter side resized to `target`, then a centered `target x target` crop.
pub fn center_resize<T: Element>(image: &Tensor<T>, target: usize) -> Result<Tensor<T>> {
    let (_, h, w) = chw(image, "center_resize")?;
    check_size(h, w, target)?;
    let (rh, rw) = if h <= w {
        (target, ((w * target) as f64 / h as f64).round() as usize)
    } else {
        (((h * target) as f64 / w as f64).round() as usize, target)
    };
    let resized = resize_image(image, rh, rw)?;
    let b = CropBox {
        top: (rh - target) / 2,
        left: (rw - target) / 2,
        height: target,
        width: target,
    };
    crop(&resized, b)
}

/// Random area/aspect crop resized to `target x target`, falling back to a
/// centered crop after ten rejected proposals.
pub fn random_resized_crop<T: Element>(
    image: &Tensor<T>,
    target: usize,
    scale: [f64; 2],
    ratio: [f64; 2],
    rng: &mut RngStream,
) -> Result<Tensor<T>> {
    let (_, h, w) = chw(image, "random_resized_crop")?;
    let area = (h * w) as f64;
    let (lr0, lr1) = (ratio[0].ln(), ratio[1].ln());
    for _ in 0..10 {
        let target_area = area * rng.uniform_in(scale[0], scale[1]);
        let aspect = rng.uniform_in(lr0, lr1).exp();
        let cw = (target_area * aspect).sqrt().round() as usize;
        let ch = (target_area / aspect).sqrt().round() as usize;
        if cw > 0 && ch > 0 && cw <= w && ch <= h {
            let top = rng.below(h - ch + 1);
            let left = rng.below(w - cw + 1);
            let b = CropBox {
                top,
                left,
                height: ch,
                width: cw,
            };
            return resize_image(&crop(image, b)?, target, target);
        }
    }
    let side = h.min(w);
    let b = CropBox {
        top: (h - side) / 2,
        left: (w - side) / 2,
        height: side,
        width: side,
    };
    resize_image(&crop(image, b)?, target, target)
}

fn hflip<T: Element>(image: &Tensor<T>) -> Tensor<T> {
    let w = image.shape()[2];
    let mut out = image.clone();
    out.data_mut().chunks_mut(w).for_each(|row| row.reverse());
    out
}

/// Samples the image under the inverse map `dst -> src` with zero fill.
fn warp<T: Element>(image: &Tensor<T>, inv: impl Fn(f64, f64) -> (f64, f64)) -> Tensor<T> {
    let (c, h, w) = (image.shape()[0], image.shape()[1], image.shape()[2]);
    let d = image.data();
    let mut out = vec![T::zero(); d.len()];
    for y in 0..h {
        for x in 0..w {
            let (sx, sy) = inv(x as f64, y as f64);
            let (x0, y0) = (sx.floor(), sy.floor());
            let (fx, fy) = (sx - x0, sy - y0);
            let taps = [
                (x0, y0, (1.0 - fx) * (1.0 - fy)),
                (x0 + 1.0, y0, fx * (1.0 - fy)),
                (x0, y0 + 1.0, (1.0 - fx) * fy),
                (x0 + 1.0, y0 + 1.0, fx * fy),
            ];
            for (tx, ty, wt) in taps {
                if wt == 0.0 || tx < 0.0 || ty < 0.0 || tx >= w as f64 || ty >= h as f64 {
                    continue;
                }
                let (tx, ty) = (tx as usize, ty as usize);
                for ch in 0..c {
                    let plane = ch * h * w;
                    out[plane + y * w + x] += d[plane + ty * w + tx] * T::lit(wt);
                }
            }
        }
    }
    Tensor::new(image.shape().to_vec(), out).expect("shape preserved")
}

/// `degenerate + factor * (image - degenerate)` written as a two-point blend,
/// clamped to `[0, 1]`.
fn blend<T: Element>(image: &Tensor<T>, degenerate: &Tensor<T>, factor: f64) -> Tensor<T> {
    let (f, g) = (T::lit(factor), T::lit(1.0 - factor));
    let data = image
        .data()
        .iter()
        .zip(degenerate.data())
        .map(|(&a, &b)| (b * g + a * f).max(T::zero()).min(T::one()))
        .collect();
    Tensor::new(image.shape().to_vec(), data).expect("shape preserved")
}

fn smoothed<T: Element>(image: &Tensor<T>) -> Tensor<T> {
    let (c, h, w) = (image.shape()[0], image.shape()[1], image.shape()[2]);
    let mut out = image.clone();
    let d = image.data();
    let k = [[1.0, 1.0, 1.0], [1.0, 5.0, 1.0], [1.0, 1.0, 1.0]];
    for ch in 0..c {
        let p = ch * h * w;
        for y in 1..h.saturating_sub(1) {
            for x in 1..w.saturating_sub(1) {
                let mut s = 0.0;
                for (dy, row) in k.iter().enumerate() {
                    for (dx, kv) in row.iter().enumerate() {
                        s += kv * d[p + (y + dy - 1) * w + (x + dx - 1)].to_f64_lossy();
                    }
                }
                out.data_mut()[p + y * w + x] = T::lit(s / 13.0);
            }
        }
    }
    out
}

/// Applies one TrivialAugment member at signed `strength`. Every op is the
/// identity at zero strength.
pub fn trivial_augment_op<T: Element>(image: &Tensor<T>, op: TaOp, strength: f64) -> Result<Tensor<T>> {
    let (c, h, w) = chw(image, "trivial_augment")?;
    let (cx, cy) = ((w as f64 - 1.0) / 2.0, (h as f64 - 1.0) / 2.0);
    Ok(match op {
        TaOp::Identity => image.clone(),
        TaOp::Rotate => {
            let (s, co) = strength.to_radians().sin_cos();
            warp(image, |x, y| {
                let (dx, dy) = (x - cx, y - cy);
                (co * dx + s * dy + cx, -s * dx + co * dy + cy)
            })
        }
        TaOp::ShearX => warp(image, |x, y| (x + strength * (y - cy), y)),
        TaOp::ShearY => warp(image, |x, y| (x, y + strength * (x - cx))),
        TaOp::TranslateX => {
            let t = (strength * w as f64).round();
            warp(image, |x, y| (x - t, y))
        }
        TaOp::TranslateY => {
            let t = (strength * h as f64).round();
            warp(image, |x, y| (x, y - t))
        }
        TaOp::Brightness => blend(image, &Tensor::zeros(image.shape()), 1.0 + strength),
        TaOp::Contrast => {
            let plane = h * w;
            let d = image.data();
            let gray: f64 = if c == 3 {
                (0..plane)
                    .map(|i| {
                        0.299 * d[i].to_f64_lossy() + 0.587 * d[plane + i].to_f64_lossy() + 0.114 * d[2 * plane + i].to_f64_lossy()
                    })
                    .sum::<f64>()
                    / plane as f64
            } else {
                image.data().iter().map(|v| v.to_f64_lossy()).sum::<f64>() / image.numel() as f64
            };
            blend(image, &Tensor::full(image.shape(), T::lit(gray)), 1.0 + strength)
        }
        TaOp::Sharpness => blend(image, &smoothed(image), 1.0 + strength),
    })
}

/// Training or evaluation preprocessing of a `(3, H, W)` image in `[0, 1]`,
/// ending with per-channel standardization.
pub fn standard_augment<T: Element>(
    image: &Tensor<T>,
    policy: Policy,
    target: usize,
    mean: &[f64; 3],
    std: &[f64; 3],
    cfg: &AugmentConfig,
    rng: &mut RngStream,
) -> Result<Tensor<T>> {
    let (_, h, w) = chw(image, "standard_augment")?;
    check_size(h, w, target)?;
    let img = match policy {
        Policy::Eval => center_resize(image, target)?,
        Policy::Train => {
            let mut img = random_resized_crop(image, target, cfg.rrc_scale, cfg.rrc_ratio, rng)?;
            if rng.bernoulli(cfg.flip_prob) {
                img = hflip(&img);
            }
            if !cfg.trivial_augment.is_empty() {
                let op = cfg.trivial_augment[rng.below(cfg.trivial_augment.len())];
                let m = op.max_strength();
                let strength = rng.uniform_in(-m, m);
                img = trivial_augment_op(&img, op, strength)?;
            }
            img
        }
    };
    standardize(&img, mean, std)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hflip_reverses_rows() {
        let img = Tensor::<f64>::new(vec![1, 2, 3], vec![1., 2., 3., 4., 5., 6.]).unwrap();
        assert_eq!(hflip(&img).data(), &[3., 2., 1., 6., 5., 4.]);
    }

    #[test]
    fn translate_moves_content() {
        let mut img = Tensor::<f64>::zeros(&[1, 4, 4]);
        img.data_mut()[5] = 1.0;
        let out = trivial_augment_op(&img, TaOp::TranslateX, 0.25).unwrap();
        assert_eq!(out.data()[6], 1.0);
        assert_eq!(out.sum(), 1.0);
    }

    #[test]
    fn undersized_images_are_rejected() {
        let img = Tensor::<f64>::zeros(&[3, 8, 8]);
        let cfg = AugmentConfig::default();
        let r = standard_augment(&img, Policy::Eval, 16, &[0.; 3], &[1.; 3], &cfg, &mut RngStream::new(0));
        assert!(matches!(r, Err(Error::Geometry { .. })));
    }

    #[test]
    fn center_resize_of_square_target_is_identity() {
        let img = RngStream::new(1).uniform_tensor::<f64>(&[3, 8, 8], 0.0, 1.0);
        assert_eq!(center_resize(&img, 8).unwrap(), img);
        assert_eq!(center_resize(&img, 4).unwrap().shape(), &[3, 4, 4]);
    }
}
