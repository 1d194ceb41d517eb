//! Dataset manifests, image decoding, batching, and the synthetic
//! fine-grained benchmark.

mod synthetic;

pub use synthetic::{generate_synthetic_fgir, render_in_memory, Background, SyntheticSpec};

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::backend::{RngStream, Tensor};
use crate::error::{Error, Result};

pub const MANIFEST_FILE: &str = "manifest.json";
const RAW_MAGIC: &[u8; 8] = b"TGDAIMG\0";

#[derive(Copy, Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(Error::Config(format!("unknown split {other:?}; expected train, val or test"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Sample {
    /// Relative to the manifest root, `/`-separated.
    pub path: String,
    pub class: usize,
    pub split: Split,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    #[serde(skip)]
    pub root: PathBuf,
    pub classes: Vec<String>,
    pub mean: [f64; 3],
    pub std: [f64; 3],
    pub image_size: usize,
    pub samples: Vec<Sample>,
}

impl DatasetManifest {
    pub fn num_classes(&self) -> usize {
        self.classes.len()
    }

    /// Indices into `samples` belonging to `split`, in manifest order.
    pub fn split_indices(&self, split: Split) -> Vec<usize> {
        (0..self.samples.len()).filter(|&i| self.samples[i].split == split).collect()
    }

    pub fn path_of(&self, i: usize) -> PathBuf {
        self.root.join(&self.samples[i].path)
    }

    /// Structural checks; `check_files` also requires every path to exist.
    pub fn validate(&self, check_files: bool) -> Result<()> {
        if self.classes.is_empty() {
            return Err(Error::Data("manifest has no classes".into()));
        }
        let mut seen = BTreeSet::new();
        let mut used = vec![false; self.classes.len()];
        for s in &self.samples {
            if s.class >= self.classes.len() {
                return Err(Error::Data(format!(
                    "sample {} has class {} but only {} classes exist",
                    s.path,
                    s.class,
                    self.classes.len()
                )));
            }
            used[s.class] = true;
            if !seen.insert(s.path.as_str()) {
                return Err(Error::Data(format!("sample {} is listed more than once", s.path)));
            }
            if check_files && !self.root.join(&s.path).is_file() {
                return Err(Error::Data(format!("missing image {}", self.root.join(&s.path).display())));
            }
        }
        if let Some(c) = used.iter().position(|u| !u) {
            return Err(Error::Data(format!("class {:?} has no samples", self.classes[c])));
        }
        if self.std.iter().any(|s| !(*s > 0.0)) {
            return Err(Error::Data(format!("channel std must be positive, got {:?}", self.std)));
        }
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_json()?).map_err(|e| Error::io(path, e))
    }

    /// Reads a manifest file; the root becomes the file's directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut m: DatasetManifest =
            serde_json::from_str(&text).map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
        m.root = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Ok(m)
    }
}

fn image_err(path: &Path, reason: impl ToString) -> Error {
    Error::Image {
        path: path.to_path_buf(),
        reason: reason.to_string(),
    }
}

/// Decodes a PNG or raw planar image into a `(3, H, W)` tensor in `[0, 1]`.
pub fn load_image(path: &Path) -> Result<Tensor<f32>> {
    let bytes = fs::read(path).map_err(|e| image_err(path, e))?;
    if bytes.starts_with(RAW_MAGIC) {
        return decode_raw(&bytes).map_err(|e| image_err(path, e));
    }
    let img = image::load_from_memory_with_format(&bytes, image::ImageFormat::Png)
        .map_err(|e| image_err(path, e))?
        .to_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let raw = img.into_raw();
    let mut data = vec![0f32; 3 * h * w];
    for (i, px) in raw.chunks_exact(3).enumerate() {
        for c in 0..3 {
            data[c * h * w + i] = px[c] as f32 / 255.0;
        }
    }
    Tensor::new(vec![3, h, w], data)
}

/// Raw planar layout: magic, `u32` channels/height/width, then `f32` planes,
/// all little-endian.
pub fn encode_raw(image: &Tensor<f32>) -> Result<Vec<u8>> {
    let [c, h, w] = *image.shape() else {
        return Err(Error::dim("encode_raw", format!("expected (C, H, W), got {:?}", image.shape())));
    };
    let mut out = RAW_MAGIC.to_vec();
    for d in [c, h, w] {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    out.extend_from_slice(&image.to_le_bytes());
    Ok(out)
}

fn decode_raw(bytes: &[u8]) -> std::result::Result<Tensor<f32>, String> {
    if bytes.len() < 20 {
        return Err("truncated raw header".into());
    }
    let dim = |i: usize| u32::from_le_bytes(bytes[8 + 4 * i..12 + 4 * i].try_into().unwrap()) as usize;
    let (c, h, w) = (dim(0), dim(1), dim(2));
    if c != 3 {
        return Err(format!("raw image has {c} channels, expected 3"));
    }
    Tensor::from_le_bytes(&[c, h, w], &bytes[20..]).map_err(|e| e.to_string())
}

pub fn save_png(image: &Tensor<f32>, path: &Path) -> Result<()> {
    let [3, h, w] = *image.shape() else {
        return Err(Error::dim("save_png", format!("expected (3, H, W), got {:?}", image.shape())));
    };
    let d = image.data();
    let mut raw = Vec::with_capacity(3 * h * w);
    for i in 0..h * w {
        for c in 0..3 {
            raw.push((d[c * h * w + i].clamp(0.0, 1.0) * 255.0).round() as u8);
        }
    }
    let buf = image::RgbImage::from_raw(w as u32, h as u32, raw).expect("buffer sized to image");
    buf.save_with_format(path, image::ImageFormat::Png)
        .map_err(|e| image_err(path, e))
}

fn sorted_entries(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .map(|e| e.map(|e| e.path()).map_err(|err| Error::io(dir, err)))
        .collect::<Result<_>>()?;
    out.sort();
    Ok(out)
}

fn is_image(p: &Path) -> bool {
    matches!(p.extension().and_then(|e| e.to_str()), Some("png" | "tgr"))
}

/// Per-channel mean and population standard deviation over all pixels.
pub fn channel_stats<'a>(images: impl IntoIterator<Item = &'a Tensor<f32>>) -> Result<([f64; 3], [f64; 3])> {
    let (mut s, mut s2, mut n) = ([0f64; 3], [0f64; 3], 0usize);
    for img in images {
        let plane = img.numel() / 3;
        for (c, p) in img.data().chunks(plane).enumerate() {
            for &v in p {
                let v = v as f64;
                s[c] += v;
                s2[c] += v * v;
            }
        }
        n += plane;
    }
    if n == 0 {
        return Err(Error::Data("no training pixels to compute channel statistics".into()));
    }
    let mean = s.map(|v| v / n as f64);
    let mut std = [0.0; 3];
    for c in 0..3 {
        std[c] = (s2[c] / n as f64 - mean[c] * mean[c]).max(0.0).sqrt().max(1e-6);
    }
    Ok((mean, std))
}

fn folder_manifest(root: &Path) -> Result<DatasetManifest> {
    let mut per_split: BTreeMap<Split, Vec<(String, Vec<PathBuf>)>> = BTreeMap::new();
    for split in Split::ALL {
        let dir = root.join(split.as_str());
        if !dir.is_dir() {
            continue;
        }
        let mut classes = Vec::new();
        for class_dir in sorted_entries(&dir)?.into_iter().filter(|p| p.is_dir()) {
            let name = class_dir.file_name().unwrap().to_string_lossy().into_owned();
            let files: Vec<PathBuf> = sorted_entries(&class_dir)?.into_iter().filter(|p| is_image(p)).collect();
            if files.is_empty() {
                return Err(Error::Data(format!("class directory {} has no images", class_dir.display())));
            }
            classes.push((name, files));
        }
        per_split.insert(split, classes);
    }
    let train = per_split
        .get(&Split::Train)
        .ok_or_else(|| Error::Data(format!("{} has neither {MANIFEST_FILE} nor a train/ directory", root.display())))?;
    let classes: Vec<String> = train.iter().map(|(n, _)| n.clone()).collect();
    let index: BTreeMap<&str, usize> = classes.iter().enumerate().map(|(i, n)| (n.as_str(), i)).collect();
    let mut samples = Vec::new();
    for (split, dirs) in &per_split {
        for (name, files) in dirs {
            let class = *index
                .get(name.as_str())
                .ok_or_else(|| Error::Data(format!("class {name:?} in {} is absent from train", split.as_str())))?;
            for f in files {
                let rel = f.strip_prefix(root).expect("listed under root");
                let path = rel.components().map(|c| c.as_os_str().to_string_lossy()).collect::<Vec<_>>().join("/");
                samples.push(Sample {
                    path,
                    class,
                    split: *split,
                });
            }
        }
    }
    Ok(DatasetManifest {
        root: root.to_path_buf(),
        classes,
        mean: [0.0; 3],
        std: [1.0; 3],
        image_size: 0,
        samples,
    })
}

/// Builds a manifest from `root/manifest.json` if present, otherwise from a
/// `split/class/image` folder tree. Folder scans compute channel statistics
/// from the train split.
pub fn load_image_folder(root: &Path) -> Result<DatasetManifest> {
    let file = root.join(MANIFEST_FILE);
    if file.is_file() {
        let m = DatasetManifest::load(&file)?;
        m.validate(true)?;
        return Ok(m);
    }
    let mut m = folder_manifest(root)?;
    let train = m.split_indices(Split::Train);
    let images = train
        .par_iter()
        .map(|&i| load_image(&m.path_of(i)))
        .collect::<Result<Vec<_>>>()?;
    let (mean, std) = channel_stats(&images)?;
    m.mean = mean;
    m.std = std;
    m.image_size = images[0].shape()[1];
    m.validate(true)?;
    Ok(m)
}

/// Sample indices grouped into batches. The train split is shuffled by
/// `(seed, epoch)`; other splits keep manifest order. The last batch may be
/// short.
pub fn make_batches(
    manifest: &DatasetManifest,
    split: Split,
    batch_size: usize,
    epoch: usize,
    seed: u64,
) -> Result<Vec<Vec<usize>>> {
    if batch_size == 0 {
        return Err(Error::Config("batch_size must be at least 1".into()));
    }
    let mut idx = manifest.split_indices(split);
    if split == Split::Train {
        let perm = RngStream::derive(seed, &[0xBA7C, epoch as u64]).permutation(idx.len());
        idx = perm.into_iter().map(|p| idx[p]).collect();
    }
    Ok(idx.chunks(batch_size).map(<[usize]>::to_vec).collect())
}

/// A manifest with every image decoded in memory.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub manifest: DatasetManifest,
    pub images: Vec<Tensor<f32>>,
}

impl Dataset {
    pub fn load(root: &Path) -> Result<Self> {
        let manifest = load_image_folder(root)?;
        let images = (0..manifest.samples.len())
            .into_par_iter()
            .map(|i| load_image(&manifest.path_of(i)))
            .collect::<Result<Vec<_>>>()?;
        Self::from_parts(manifest, images)
    }

    /// Pairs a manifest with already-decoded images (one per sample).
    pub fn from_parts(manifest: DatasetManifest, images: Vec<Tensor<f32>>) -> Result<Self> {
        manifest.validate(false)?;
        if images.len() != manifest.samples.len() {
            return Err(Error::Data(format!(
                "{} images for {} samples",
                images.len(),
                manifest.samples.len()
            )));
        }
        let s = manifest.image_size;
        for (i, img) in images.iter().enumerate() {
            if img.shape() != [3, s, s] {
                return Err(Error::Data(format!(
                    "{} decodes to {:?}, expected (3, {s}, {s})",
                    manifest.samples[i].path,
                    img.shape()
                )));
            }
        }
        Ok(Dataset { manifest, images })
    }

    pub fn label(&self, i: usize) -> usize {
        self.manifest.samples[i].class
    }
}
