//! Attention-guided cropping and dropping, plus the generic training
//! augmentation stack.
//!
//! Images are `(C, H, W)` tensors. Attention maps are `(M, h, w)` per image
//! and are bilinearly upsampled to image resolution before thresholding.

mod standard;

pub use standard::{
    center_resize, random_resized_crop, standard_augment, standardize, trivial_augment_op, AugmentConfig, Policy,
    TaOp, TA_OPS,
};

use serde::{Deserialize, Serialize};

use crate::backend::kernels::resize::bilinear_forward;
use crate::backend::{Element, RngStream, Tensor};
use crate::error::{Error, Result};

/// Rectangle in source-image pixel coordinates.
#[derive(Copy, Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CropBox {
    pub top: usize,
    pub left: usize,
    pub height: usize,
    pub width: usize,
}

impl CropBox {
    pub fn full(h: usize, w: usize) -> Self {
        CropBox {
            top: 0,
            left: 0,
            height: h,
            width: w,
        }
    }

    pub fn contains(&self, y: usize, x: usize) -> bool {
        (self.top..self.top + self.height).contains(&y) && (self.left..self.left + self.width).contains(&x)
    }
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GuidedKind {
    Crop,
    Drop,
}

impl GuidedKind {
    /// Crop on even steps, drop on odd ones.
    pub fn for_step(step: usize) -> Self {
        if step % 2 == 0 {
            GuidedKind::Crop
        } else {
            GuidedKind::Drop
        }
    }
}

#[derive(Clone, Debug)]
pub struct AugmentedPair<T> {
    pub original: Tensor<T>,
    pub augmented: Tensor<T>,
    pub kind: GuidedKind,
    pub crop_box: Option<CropBox>,
    pub map_index: usize,
}

fn chw<T: Element>(t: &Tensor<T>, what: &'static str) -> Result<(usize, usize, usize)> {
    match *t.shape() {
        [c, h, w] if c > 0 && h > 0 && w > 0 => Ok((c, h, w)),
        ref s => Err(Error::Dimension {
            op: what,
            detail: format!("expected a non-empty (C, H, W) tensor, got {s:?}"),
        }),
    }
}

fn hw<T: Element>(t: &Tensor<T>, what: &'static str) -> Result<(usize, usize)> {
    match *t.shape() {
        [h, w] if h > 0 && w > 0 => Ok((h, w)),
        ref s => Err(Error::Dimension {
            op: what,
            detail: format!("expected a non-empty (H, W) map, got {s:?}"),
        }),
    }
}

fn check_threshold(op: &'static str, theta: f64) -> Result<()> {
    if theta > 0.0 && theta < 1.0 {
        Ok(())
    } else {
        Err(Error::Parameter {
            op,
            detail: format!("threshold must lie in (0, 1), got {theta}"),
        })
    }
}

/// Samples one map with probability proportional to its spatial mean and
/// min-max normalizes it to `[0, 1]`.
///
/// All-zero means fall back to a uniform draw; a constant map normalizes to
/// zeros.
pub fn select_attention_map<T: Element>(maps: &Tensor<T>, rng: &mut RngStream) -> Result<(usize, Tensor<T>)> {
    let (m, h, w) = chw(maps, "select_attention_map")?;
    let plane = h * w;
    let means: Vec<f64> = maps
        .data()
        .chunks(plane)
        .map(|p| p.iter().map(|v| v.to_f64_lossy()).sum::<f64>() / plane as f64)
        .collect();
    if means.iter().any(|v| *v < 0.0 || !v.is_finite()) {
        return Err(Error::Parameter {
            op: "select_attention_map",
            detail: "attention maps must be finite and non-negative".into(),
        });
    }
    let total: f64 = means.iter().sum();
    let index = if total > 0.0 {
        let u = rng.uniform() * total;
        let mut acc = 0.0;
        let mut pick = m - 1;
        for (i, v) in means.iter().enumerate() {
            acc += v;
            if u < acc && *v > 0.0 {
                pick = i;
                break;
            }
        }
        // the fallback must also carry weight
        while means[pick] == 0.0 {
            pick -= 1;
        }
        pick
    } else {
        rng.below(m)
    };
    let src = &maps.data()[index * plane..(index + 1) * plane];
    let lo = src.iter().copied().fold(T::infinity(), T::min);
    let hi = src.iter().copied().fold(T::neg_infinity(), T::max);
    let norm = if hi > lo {
        let span = hi - lo;
        src.iter().map(|&v| (v - lo) / span).collect()
    } else {
        vec![T::zero(); plane]
    };
    Ok((index, Tensor::new(vec![h, w], norm)?))
}

/// `map` resized to `(h, w)` with the backend's bilinear convention.
pub fn upsample_map<T: Element>(map: &Tensor<T>, h: usize, w: usize) -> Result<Tensor<T>> {
    let (mh, mw) = hw(map, "upsample_map")?;
    let up = bilinear_forward(&map.clone().reshape(&[1, 1, mh, mw])?, h, w)?;
    up.reshape(&[h, w])
}

/// Tight bounding box of `{map >= theta}`, or `None` when the set is empty.
pub fn mask_bounding_box<T: Element>(map: &Tensor<T>, theta: f64) -> Result<Option<CropBox>> {
    let (h, w) = hw(map, "mask_bounding_box")?;
    let theta = T::lit(theta);
    let (mut y0, mut y1, mut x0, mut x1) = (usize::MAX, 0, usize::MAX, 0);
    for (i, v) in map.data().iter().enumerate() {
        if *v >= theta {
            let (y, x) = (i / w, i % w);
            y0 = y0.min(y);
            y1 = y1.max(y);
            x0 = x0.min(x);
            x1 = x1.max(x);
        }
    }
    if y0 == usize::MAX {
        return Ok(None);
    }
    debug_assert!(y1 < h);
    Ok(Some(CropBox {
        top: y0,
        left: x0,
        height: y1 - y0 + 1,
        width: x1 - x0 + 1,
    }))
}

/// Copy of the `box` region of a `(C, H, W)` image.
pub fn crop<T: Element>(image: &Tensor<T>, b: CropBox) -> Result<Tensor<T>> {
    let (c, h, w) = chw(image, "crop")?;
    if b.height == 0 || b.width == 0 || b.top + b.height > h || b.left + b.width > w {
        return Err(Error::Geometry {
            op: "crop",
            detail: format!("box {b:?} outside {h}x{w} image"),
        });
    }
    let d = image.data();
    let mut out = Vec::with_capacity(c * b.height * b.width);
    for ch in 0..c {
        for y in b.top..b.top + b.height {
            let row = (ch * h + y) * w;
            out.extend_from_slice(&d[row + b.left..row + b.left + b.width]);
        }
    }
    Tensor::new(vec![c, b.height, b.width], out)
}

/// Resize a `(C, H, W)` image with the backend's bilinear kernel.
pub fn resize_image<T: Element>(image: &Tensor<T>, out_h: usize, out_w: usize) -> Result<Tensor<T>> {
    let (c, h, w) = chw(image, "resize_image")?;
    let out = bilinear_forward(&image.clone().reshape(&[1, c, h, w])?, out_h, out_w)?;
    out.reshape(&[c, out_h, out_w])
}

/// Crops the bounding box of the thresholded, upsampled map and resizes it
/// back to the image size. An empty mask keeps the full image.
pub fn attention_crop<T: Element>(image: &Tensor<T>, map: &Tensor<T>, theta_c: f64) -> Result<(Tensor<T>, CropBox)> {
    check_threshold("attention_crop", theta_c)?;
    let (_, h, w) = chw(image, "attention_crop")?;
    let up = upsample_map(map, h, w)?;
    let b = mask_bounding_box(&up, theta_c)?.unwrap_or(CropBox::full(h, w));
    let out = resize_image(&crop(image, b)?, h, w)?;
    Ok((out, b))
}

/// Zeroes every pixel (all channels) where the upsampled map is at least
/// `theta_d`.
pub fn attention_drop<T: Element>(image: &Tensor<T>, map: &Tensor<T>, theta_d: f64) -> Result<Tensor<T>> {
    check_threshold("attention_drop", theta_d)?;
    let (_, h, w) = chw(image, "attention_drop")?;
    let up = upsample_map(map, h, w)?;
    let theta = T::lit(theta_d);
    let mut out = image.clone();
    let plane = h * w;
    for ch in out.data_mut().chunks_mut(plane) {
        for (v, m) in ch.iter_mut().zip(up.data()) {
            if *m >= theta {
                *v = T::zero();
            }
        }
    }
    Ok(out)
}

/// One guided view of `image` from its `(M, h, w)` attention maps, with the
/// threshold drawn from the configured range.
pub fn guided_augment<T: Element>(
    image: &Tensor<T>,
    maps: &Tensor<T>,
    kind: GuidedKind,
    cfg: &AugmentConfig,
    rng: &mut RngStream,
) -> Result<AugmentedPair<T>> {
    let (map_index, map) = select_attention_map(maps, rng)?;
    let (augmented, crop_box) = match kind {
        GuidedKind::Crop => {
            let theta = rng.uniform_in(cfg.crop_threshold[0], cfg.crop_threshold[1]);
            let (img, b) = attention_crop(image, &map, theta)?;
            (img, Some(b))
        }
        GuidedKind::Drop => {
            let theta = rng.uniform_in(cfg.drop_threshold[0], cfg.drop_threshold[1]);
            (attention_drop(image, &map, theta)?, None)
        }
    };
    Ok(AugmentedPair {
        original: image.clone(),
        augmented,
        kind,
        crop_box,
        map_index,
    })
}

/// Guided views for a `(N, C, H, W)` batch given `(N, M, h, w)` maps; sample
/// `i` draws from `rngs[i]`.
pub fn guided_batch<T: Element>(
    images: &Tensor<T>,
    maps: &Tensor<T>,
    kind: GuidedKind,
    cfg: &AugmentConfig,
    rngs: &mut [RngStream],
) -> Result<Tensor<T>> {
    let n = images.shape().first().copied().unwrap_or(0);
    if images.ndim() != 4 || maps.ndim() != 4 || maps.shape()[0] != n || rngs.len() != n {
        return Err(Error::dim(
            "guided_batch",
            format!(
                "images {:?}, maps {:?}, {} rng streams",
                images.shape(),
                maps.shape(),
                rngs.len()
            ),
        ));
    }
    let views = (0..n)
        .map(|i| {
            let pair = guided_augment(&images.index_axis0(i), &maps.index_axis0(i), kind, cfg, &mut rngs[i])?;
            Ok(pair.augmented)
        })
        .collect::<Result<Vec<_>>>()?;
    Tensor::stack(&views)
}
