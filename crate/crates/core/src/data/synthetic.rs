//! Procedural fine-grained benchmark.
//!
//! Every image is a randomized background with a few small glyphs pasted at
//! random positions and orientations. All classes draw backgrounds from the
//! same distribution; they differ only in their glyphs, which blend a shared
//! prototype with a class-specific one according to `similarity`.

use std::fs;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{channel_stats, load_image, save_png, DatasetManifest, Sample, Split, MANIFEST_FILE};
use crate::backend::{RngStream, Tensor};
use crate::error::{Error, Result};

#[derive(Copy, Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Background {
    /// Sum of low-frequency color gratings.
    Smooth,
    /// One oriented stripe pattern with random period.
    Stripes,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticSpec {
    pub num_classes: usize,
    pub train_per_class: usize,
    pub val_per_class: usize,
    pub test_per_class: usize,
    pub image_size: usize,
    pub background: Background,
    /// Side length of a glyph in pixels.
    pub cue_size: usize,
    pub cues_per_image: usize,
    /// 0 keeps glyphs fully class-specific, 1 makes all classes identical.
    pub similarity: f64,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            num_classes: 10,
            train_per_class: 200,
            val_per_class: 50,
            test_per_class: 50,
            image_size: 64,
            background: Background::Smooth,
            cue_size: 12,
            cues_per_image: 3,
            similarity: 0.7,
            seed: 0,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(format!("synthetic spec: {m}")));
        if self.num_classes < 2 {
            return bad("need at least two classes".into());
        }
        if self.train_per_class == 0 {
            return bad("train_per_class must be positive".into());
        }
        if self.cue_size == 0 || 4 * self.cue_size >= self.image_size {
            return bad(format!(
                "cue_size {} must be positive and below image_size / 4 = {}",
                self.cue_size,
                self.image_size as f64 / 4.0
            ));
        }
        if self.cues_per_image == 0 {
            return bad("cues_per_image must be positive".into());
        }
        if !(0.0..=1.0).contains(&self.similarity) {
            return bad(format!("similarity {} outside [0, 1]", self.similarity));
        }
        Ok(())
    }

    fn count(&self, split: Split) -> usize {
        match split {
            Split::Train => self.train_per_class,
            Split::Val => self.val_per_class,
            Split::Test => self.test_per_class,
        }
    }
}

/// A glyph: per-pixel opacity and one RGB color.
#[derive(Clone, Debug)]
struct Glyph {
    alpha: Vec<f64>,
    color: [f64; 3],
}

fn hsv(h: f64, s: f64, v: f64) -> [f64; 3] {
    let i = (h * 6.0).floor();
    let f = h * 6.0 - i;
    let (p, q, t) = (v * (1.0 - s), v * (1.0 - f * s), v * (1.0 - (1.0 - f) * s));
    match (i as i64).rem_euclid(6) {
        0 => [v, t, p],
        1 => [q, v, p],
        2 => [p, v, t],
        3 => [p, q, v],
        4 => [t, p, v],
        _ => [v, p, q],
    }
}

/// Blocky random shape on a 4x4 cell grid, upscaled to `size`.
fn random_shape(size: usize, rng: &mut RngStream) -> Vec<f64> {
    let mut cells = [false; 16];
    while cells.iter().filter(|c| **c).count() < 5 {
        cells = std::array::from_fn(|_| rng.bernoulli(0.5));
    }
    (0..size * size)
        .map(|i| {
            let (y, x) = (i / size, i % size);
            if cells[(y * 4 / size) * 4 + x * 4 / size] {
                1.0
            } else {
                0.0
            }
        })
        .collect()
}

fn class_glyphs(spec: &SyntheticSpec) -> Vec<Vec<Glyph>> {
    let k = spec.cues_per_image;
    let mut shared_rng = RngStream::derive(spec.seed, &[0x5EED, 0]);
    let shared: Vec<Glyph> = (0..k)
        .map(|_| Glyph {
            alpha: random_shape(spec.cue_size, &mut shared_rng),
            color: [0.5; 3],
        })
        .collect();
    let s = spec.similarity;
    (0..spec.num_classes)
        .map(|c| {
            let mut rng = RngStream::derive(spec.seed, &[0x5EED, 1 + c as u64]);
            let hue = (c as f64 + 0.5 * rng.uniform()) / spec.num_classes as f64;
            shared
                .iter()
                .enumerate()
                .map(|(j, base)| {
                    let own = random_shape(spec.cue_size, &mut rng);
                    let own_color = hsv((hue + j as f64 / (3.0 * k as f64)).fract(), 0.8, 0.9);
                    Glyph {
                        alpha: base.alpha.iter().zip(&own).map(|(b, o)| s * b + (1.0 - s) * o).collect(),
                        color: std::array::from_fn(|ch| s * base.color[ch] + (1.0 - s) * own_color[ch]),
                    }
                })
                .collect()
        })
        .collect()
}

fn background(spec: &SyntheticSpec, rng: &mut RngStream) -> Vec<f64> {
    let n = spec.image_size;
    let mut img = vec![0.0; 3 * n * n];
    let base: [f64; 3] = std::array::from_fn(|_| rng.uniform_in(0.3, 0.7));
    match spec.background {
        Background::Smooth => {
            for ch in 0..3 {
                let waves: Vec<(f64, f64, f64, f64)> = (0..3)
                    .map(|_| {
                        let f = std::f64::consts::TAU / n as f64;
                        (
                            rng.uniform_in(-2.0, 2.0) * f,
                            rng.uniform_in(-2.0, 2.0) * f,
                            rng.uniform_in(0.0, std::f64::consts::TAU),
                            rng.uniform_in(0.02, 0.08),
                        )
                    })
                    .collect();
                for y in 0..n {
                    for x in 0..n {
                        let v: f64 = waves.iter().map(|(fx, fy, ph, a)| a * (fx * x as f64 + fy * y as f64 + ph).sin()).sum();
                        img[(ch * n + y) * n + x] = base[ch] + v;
                    }
                }
            }
        }
        Background::Stripes => {
            let angle = rng.uniform_in(0.0, std::f64::consts::PI);
            let period = rng.uniform_in(4.0, 12.0);
            let amp = rng.uniform_in(0.03, 0.1);
            let phase = rng.uniform_in(0.0, std::f64::consts::TAU);
            let (s, c) = angle.sin_cos();
            for y in 0..n {
                for x in 0..n {
                    let v = amp * ((c * x as f64 + s * y as f64) * std::f64::consts::TAU / period + phase).sin();
                    for ch in 0..3 {
                        img[(ch * n + y) * n + x] = base[ch] + v;
                    }
                }
            }
        }
    }
    for v in img.iter_mut() {
        *v += 0.02 * rng.normal();
    }
    img
}

/// Destination offset of glyph pixel `(y, x)` under one of the eight
/// square symmetries.
fn orient(y: usize, x: usize, size: usize, o: usize) -> (usize, usize) {
    let m = size - 1;
    let (y, x) = match o % 4 {
        0 => (y, x),
        1 => (x, m - y),
        2 => (m - y, m - x),
        _ => (m - x, y),
    };
    if o >= 4 {
        (y, m - x)
    } else {
        (y, x)
    }
}

/// Renders one image of `class` in `[0, 1]`.
fn render(spec: &SyntheticSpec, glyphs: &[Glyph], rng: &mut RngStream) -> Tensor<f32> {
    let (n, g) = (spec.image_size, spec.cue_size);
    let mut img = background(spec, rng);
    for glyph in glyphs {
        let top = rng.below(n - g + 1);
        let left = rng.below(n - g + 1);
        let o = rng.below(8);
        for y in 0..g {
            for x in 0..g {
                let a = glyph.alpha[y * g + x];
                if a == 0.0 {
                    continue;
                }
                let (dy, dx) = orient(y, x, g, o);
                for ch in 0..3 {
                    let p = &mut img[(ch * n + top + dy) * n + left + dx];
                    *p = (1.0 - a) * *p + a * glyph.color[ch];
                }
            }
        }
    }
    let data = img.into_iter().map(|v| v.clamp(0.0, 1.0) as f32).collect();
    Tensor::new(vec![3, n, n], data).expect("sized to image")
}

/// Writes the benchmark as PNGs under `root/{split}/{class}/` plus a
/// manifest, and returns the manifest. Output is a pure function of `spec`.
pub fn generate_synthetic_fgir(spec: &SyntheticSpec, root: &Path) -> Result<DatasetManifest> {
    spec.validate()?;
    let glyphs = class_glyphs(spec);
    let classes: Vec<String> = (0..spec.num_classes).map(|c| format!("class_{c:03}")).collect();
    let mut jobs = Vec::new();
    for split in Split::ALL {
        for (c, name) in classes.iter().enumerate() {
            let count = spec.count(split);
            if count == 0 {
                continue;
            }
            let dir = root.join(split.as_str()).join(name);
            fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
            for i in 0..count {
                jobs.push((split, c, i, format!("{}/{name}/{i:05}.png", split.as_str())));
            }
        }
    }
    jobs.par_iter()
        .map(|(split, c, i, rel)| {
            let mut rng = RngStream::derive(spec.seed, &[*split as u64, *c as u64, *i as u64]);
            save_png(&render(spec, &glyphs[*c], &mut rng), &root.join(rel))
        })
        .collect::<Result<Vec<()>>>()?;
    // statistics from the quantized files, as a reload would see them
    let train: Vec<Tensor<f32>> = jobs
        .par_iter()
        .filter(|j| j.0 == Split::Train)
        .map(|j| load_image(&root.join(&j.3)))
        .collect::<Result<_>>()?;
    let (mean, std) = channel_stats(&train)?;
    let manifest = DatasetManifest {
        root: root.to_path_buf(),
        classes,
        mean,
        std,
        image_size: spec.image_size,
        samples: jobs
            .into_iter()
            .map(|(split, class, _, path)| Sample { path, class, split })
            .collect(),
    };
    manifest.validate(true)?;
    manifest.save(&root.join(MANIFEST_FILE))?;
    Ok(manifest)
}

/// Renders the images of a spec in memory without touching disk, in the
/// same sample order as [`generate_synthetic_fgir`].
pub fn render_in_memory(spec: &SyntheticSpec) -> Result<(DatasetManifest, Vec<Tensor<f32>>)> {
    spec.validate()?;
    let glyphs = class_glyphs(spec);
    let classes: Vec<String> = (0..spec.num_classes).map(|c| format!("class_{c:03}")).collect();
    let mut samples = Vec::new();
    let mut images = Vec::new();
    for split in Split::ALL {
        for (c, name) in classes.iter().enumerate() {
            for i in 0..spec.count(split) {
                let mut rng = RngStream::derive(spec.seed, &[split as u64, c as u64, i as u64]);
                // same 8-bit quantization as the PNG files
                let img = render(spec, &glyphs[c], &mut rng).map(|v| (v * 255.0).round() / 255.0);
                images.push(img);
                samples.push(Sample {
                    path: format!("{}/{name}/{i:05}.png", split.as_str()),
                    class: c,
                    split,
                });
            }
        }
    }
    let train: Vec<&Tensor<f32>> = samples
        .iter()
        .zip(&images)
        .filter(|(s, _)| s.split == Split::Train)
        .map(|(_, i)| i)
        .collect();
    let (mean, std) = channel_stats(train)?;
    let manifest = DatasetManifest {
        root: Default::default(),
        classes,
        mean,
        std,
        image_size: spec.image_size,
        samples,
    };
    Ok((manifest, images))
}
