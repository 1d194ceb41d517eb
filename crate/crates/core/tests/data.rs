use std::collections::BTreeSet;
use std::fs;
use std::path::Path;

use proptest::prelude::*;
use tgda_core::data::{
    generate_synthetic_fgir, load_image, load_image_folder, make_batches, render_in_memory, save_png, Dataset, Split,
    SyntheticSpec, MANIFEST_FILE,
};
use tgda_core::{Error, RngStream, Tensor};

fn spec(classes: usize, per_class: usize, size: usize, cue: usize) -> SyntheticSpec {
    SyntheticSpec {
        num_classes: classes,
        train_per_class: per_class,
        val_per_class: 2,
        test_per_class: 1,
        image_size: size,
        cue_size: cue,
        ..SyntheticSpec::default()
    }
}

fn tree_bytes(root: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else if p.file_name().unwrap() != MANIFEST_FILE {
                out.push((p.strip_prefix(root).unwrap().display().to_string(), fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

#[test]
fn generation_is_a_pure_function_of_the_spec() {
    let s = spec(3, 3, 24, 5);
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let ma = generate_synthetic_fgir(&s, a.path()).unwrap();
    let mb = generate_synthetic_fgir(&s, b.path()).unwrap();
    let (ta, tb) = (tree_bytes(a.path()), tree_bytes(b.path()));
    assert_eq!(ta.len(), 3 * (3 + 2 + 1));
    assert_eq!(ta, tb);
    assert_eq!((ma.mean, ma.std), (mb.mean, mb.std));

    let other = SyntheticSpec { seed: 1, ..s };
    let c = tempfile::tempdir().unwrap();
    generate_synthetic_fgir(&other, c.path()).unwrap();
    assert_ne!(ta, tree_bytes(c.path()));
}

#[test]
fn in_memory_rendering_matches_the_files() {
    let s = spec(2, 2, 20, 4);
    let dir = tempfile::tempdir().unwrap();
    let m = generate_synthetic_fgir(&s, dir.path()).unwrap();
    let (mm, images) = render_in_memory(&s).unwrap();
    assert_eq!(mm.samples, m.samples);
    for (i, img) in images.iter().enumerate() {
        assert_eq!(&load_image(&m.path_of(i)).unwrap(), img, "{}", m.samples[i].path);
    }
    assert_eq!(mm.mean, m.mean);
}

#[test]
fn generated_manifests_are_well_formed() {
    let dir = tempfile::tempdir().unwrap();
    let m = generate_synthetic_fgir(&spec(4, 3, 20, 4), dir.path()).unwrap();
    let paths: BTreeSet<&str> = m.samples.iter().map(|s| s.path.as_str()).collect();
    assert_eq!(paths.len(), m.samples.len(), "splits are disjoint");
    for (i, s) in m.samples.iter().enumerate() {
        assert!(s.class < 4);
        assert_eq!(load_image(&m.path_of(i)).unwrap().shape(), [3, 20, 20]);
    }
    let reloaded = load_image_folder(dir.path()).unwrap();
    assert_eq!(reloaded.samples, m.samples);
    let json: serde_json::Value = serde_json::from_str(&fs::read_to_string(dir.path().join(MANIFEST_FILE)).unwrap()).unwrap();
    for key in ["classes", "mean", "std", "image_size", "samples"] {
        assert!(json.get(key).is_some(), "{key}");
    }
    let s0 = &json["samples"][0];
    assert!(s0["path"].is_string() && s0["class"].is_number() && s0["split"].is_string());
}

fn write_folder(root: &Path, layout: &[(&str, &str, usize)], seed: u64) {
    let mut rng = RngStream::new(seed);
    for (split, class, n) in layout {
        let dir = root.join(split).join(class);
        fs::create_dir_all(&dir).unwrap();
        for i in 0..*n {
            let img = rng.uniform_tensor::<f32>(&[3, 6, 6], 0.0, 1.0);
            save_png(&img, &dir.join(format!("img{i}.png"))).unwrap();
        }
    }
}

#[test]
fn folder_scan_sorts_classes_and_is_repeatable() {
    let dir = tempfile::tempdir().unwrap();
    write_folder(dir.path(), &[("train", "zebra", 3), ("train", "aardvark", 3)], 1);
    let m = load_image_folder(dir.path()).unwrap();
    assert_eq!(m.classes, ["aardvark", "zebra"]);
    assert_eq!(m.samples.len(), 6);
    assert_eq!(m.samples[0].path, "train/aardvark/img0.png");
    assert!(m.samples[..3].iter().all(|s| s.class == 0) && m.samples[3..].iter().all(|s| s.class == 1));
    assert_eq!(m, load_image_folder(dir.path()).unwrap());
}

#[test]
fn folder_statistics_match_a_pixel_sum_oracle() {
    let dir = tempfile::tempdir().unwrap();
    write_folder(dir.path(), &[("train", "a", 4), ("train", "b", 3), ("val", "a", 2)], 2);
    let m = load_image_folder(dir.path()).unwrap();
    // two passes over every decoded train pixel
    let train: Vec<Tensor<f32>> = m
        .samples
        .iter()
        .enumerate()
        .filter(|(_, s)| s.split == Split::Train)
        .map(|(i, _)| load_image(&m.path_of(i)).unwrap())
        .collect();
    for c in 0..3 {
        let px: Vec<f64> = train.iter().flat_map(|t| t.data()[c * 36..(c + 1) * 36].iter().map(|&v| v as f64)).collect();
        let mean = px.iter().sum::<f64>() / px.len() as f64;
        let var = px.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / px.len() as f64;
        assert!((m.mean[c] - mean).abs() < 1e-5, "channel {c}");
        assert!((m.std[c] - var.sqrt()).abs() < 1e-5, "channel {c}");
    }
}

#[test]
fn folder_errors_are_data_errors() {
    let dir = tempfile::tempdir().unwrap();
    write_folder(dir.path(), &[("train", "a", 2)], 3);
    fs::create_dir_all(dir.path().join("train/empty")).unwrap();
    let err = load_image_folder(dir.path()).unwrap_err();
    assert!(matches!(&err, Error::Data(m) if m.contains("empty")), "{err}");

    let dir = tempfile::tempdir().unwrap();
    write_folder(dir.path(), &[("train", "a", 2)], 3);
    fs::write(dir.path().join("train/a/img1.png"), b"garbage").unwrap();
    let err = load_image_folder(dir.path()).unwrap_err();
    assert_eq!(err.class(), tgda_core::ErrorClass::Data);
    assert!(err.to_string().contains("img1.png"), "{err}");

    let dir = tempfile::tempdir().unwrap();
    assert_eq!(load_image_folder(&dir.path().join("nothing")).unwrap_err().class(), tgda_core::ErrorClass::Data);
}

#[test]
fn a_manifest_pointing_at_missing_files_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let m = generate_synthetic_fgir(&spec(2, 1, 20, 4), dir.path()).unwrap();
    fs::remove_file(m.path_of(0)).unwrap();
    assert_eq!(load_image_folder(dir.path()).unwrap_err().class(), tgda_core::ErrorClass::Data);
}

fn manifest_of(train: usize) -> tgda_core::data::DatasetManifest {
    let s = SyntheticSpec {
        num_classes: 2,
        train_per_class: train.div_ceil(2),
        val_per_class: 3,
        test_per_class: 0,
        image_size: 20,
        cue_size: 4,
        ..SyntheticSpec::default()
    };
    render_in_memory(&s).unwrap().0
}

#[test]
fn shuffled_batches_cover_ten_thousand_samples_once() {
    let m = manifest_of(10_000);
    let train = m.split_indices(Split::Train);
    assert_eq!(train.len(), 10_000);
    let batches = make_batches(&m, Split::Train, 64, 3, 11).unwrap();
    assert_eq!(batches.len(), 10_000usize.div_ceil(64));
    assert_eq!(batches.last().unwrap().len(), 10_000 % 64);
    let mut seen: Vec<usize> = batches.concat();
    assert_ne!(seen, train, "the train split is shuffled");
    seen.sort_unstable();
    assert_eq!(seen, train);

    assert_eq!(batches, make_batches(&m, Split::Train, 64, 3, 11).unwrap());
    assert_ne!(batches, make_batches(&m, Split::Train, 64, 4, 11).unwrap());
    assert_ne!(batches, make_batches(&m, Split::Train, 64, 3, 12).unwrap());
}

#[test]
fn eval_batches_keep_manifest_order() {
    let m = manifest_of(6);
    let val = m.split_indices(Split::Val);
    assert_eq!(make_batches(&m, Split::Val, 4, 9, 9).unwrap().concat(), val);
    let one = make_batches(&m, Split::Train, 100, 0, 0).unwrap();
    assert_eq!(one.len(), 1);
    assert_eq!(one[0].len(), 6);
    assert!(make_batches(&m, Split::Test, 4, 0, 0).unwrap().is_empty());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn batches_partition_the_split(n in 1usize..300, bs in 1usize..40, epoch in 0usize..5, seed in 0u64..1000) {
        let m = manifest_of(n);
        let train = m.split_indices(Split::Train);
        let batches = make_batches(&m, Split::Train, bs, epoch, seed).unwrap();
        prop_assert!(batches.iter().all(|b| !b.is_empty() && b.len() <= bs));
        prop_assert!(batches[..batches.len() - 1].iter().all(|b| b.len() == bs));
        let mut all = batches.concat();
        all.sort_unstable();
        prop_assert_eq!(all, train);
    }
}

fn features(ds: &Dataset, split: Split, f: impl Fn(&Tensor<f32>) -> Vec<f64>) -> (Vec<Vec<f64>>, Vec<usize>) {
    ds.manifest
        .split_indices(split)
        .into_iter()
        .map(|i| (f(&ds.images[i]), ds.label(i)))
        .unzip()
}

fn standardize_columns(train: &mut [Vec<f64>], other: &mut [Vec<f64>]) {
    let d = train[0].len();
    for j in 0..d {
        let mean = train.iter().map(|r| r[j]).sum::<f64>() / train.len() as f64;
        let sd = (train.iter().map(|r| (r[j] - mean).powi(2)).sum::<f64>() / train.len() as f64).sqrt().max(1e-8);
        for r in train.iter_mut().chain(other.iter_mut()) {
            r[j] = (r[j] - mean) / sd;
        }
    }
}

/// Binary logistic regression by full-batch gradient descent with an L2
/// penalty; returns the accuracy on `(xv, yv)`.
fn logistic_probe(x: &[Vec<f64>], y: &[usize], xv: &[Vec<f64>], yv: &[usize]) -> f64 {
    let d = x[0].len();
    let (mut w, mut b) = (vec![0.0; d], 0.0);
    let (lr, l2) = (0.5, 1e-2);
    for _ in 0..300 {
        let mut gw = vec![0.0; d];
        let mut gb = 0.0;
        for (xi, &yi) in x.iter().zip(y) {
            let z: f64 = b + xi.iter().zip(&w).map(|(a, b)| a * b).sum::<f64>();
            let err = 1.0 / (1.0 + (-z).exp()) - yi as f64;
            gb += err;
            gw.iter_mut().zip(xi).for_each(|(g, v)| *g += err * v);
        }
        let n = x.len() as f64;
        for (wj, gj) in w.iter_mut().zip(&gw) {
            *wj -= lr * (gj / n + l2 * *wj);
        }
        b -= lr * gb / n;
    }
    let hits = xv
        .iter()
        .zip(yv)
        .filter(|(xi, &yi)| {
            let z: f64 = b + xi.iter().zip(&w).map(|(a, b)| a * b).sum::<f64>();
            (z > 0.0) as usize == yi
        })
        .count();
    hits as f64 / xv.len() as f64
}

#[test]
fn dissimilar_large_cues_are_linearly_separable() {
    let s = SyntheticSpec {
        num_classes: 2,
        train_per_class: 150,
        val_per_class: 100,
        test_per_class: 0,
        image_size: 32,
        cue_size: 7,
        cues_per_image: 16,
        similarity: 0.0,
        seed: 4,
        ..SyntheticSpec::default()
    };
    let (m, images) = render_in_memory(&s).unwrap();
    let ds = Dataset::from_parts(m, images).unwrap();
    let raw = |t: &Tensor<f32>| t.data().iter().map(|&v| v as f64).collect();
    let (mut x, y) = features(&ds, Split::Train, raw);
    let (mut xv, yv) = features(&ds, Split::Val, raw);
    standardize_columns(&mut x, &mut xv);
    let acc = logistic_probe(&x, &y, &xv, &yv);
    assert!(acc > 0.9, "linear probe val top1 {acc}");
}

fn mean_color(t: &Tensor<f32>) -> Vec<f64> {
    let plane = t.numel() / 3;
    t.data().chunks(plane).map(|p| p.iter().map(|&v| v as f64).sum::<f64>() / plane as f64).collect()
}

/// Nearest-centroid accuracy on the average image color.
fn color_centroid_accuracy(s: &SyntheticSpec) -> f64 {
    let (m, images) = render_in_memory(s).unwrap();
    let ds = Dataset::from_parts(m, images).unwrap();
    let (x, y) = features(&ds, Split::Train, mean_color);
    let (xv, yv) = features(&ds, Split::Val, mean_color);
    let c = s.num_classes;
    let mut centroids = vec![vec![0.0; 3]; c];
    let mut counts = vec![0.0; c];
    for (xi, &yi) in x.iter().zip(&y) {
        centroids[yi].iter_mut().zip(xi).for_each(|(a, b)| *a += b);
        counts[yi] += 1.0;
    }
    for (ct, n) in centroids.iter_mut().zip(&counts) {
        ct.iter_mut().for_each(|v| *v /= n);
    }
    let dist = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(p, q)| (p - q).powi(2)).sum::<f64>();
    let hits = xv
        .iter()
        .zip(&yv)
        .filter(|(xi, &yi)| {
            let pred = (0..c).min_by(|&i, &j| dist(xi, &centroids[i]).total_cmp(&dist(xi, &centroids[j]))).unwrap();
            pred == yi
        })
        .count();
    hits as f64 / xv.len() as f64
}

#[test]
fn near_identical_cues_defeat_a_global_color_classifier() {
    let s = SyntheticSpec {
        train_per_class: 200,
        val_per_class: 50,
        test_per_class: 0,
        similarity: 0.9,
        ..SyntheticSpec::default()
    };
    let acc = color_centroid_accuracy(&s);
    assert!((acc - 0.1).abs() <= 0.05, "global color top1 {acc}");
}
