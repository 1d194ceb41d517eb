use proptest::prelude::*;
use tgda_core::augment::{
    attention_crop, attention_drop, guided_augment, guided_batch, select_attention_map, standard_augment,
    trivial_augment_op, upsample_map, AugmentConfig, CropBox, GuidedKind, Policy, TA_OPS,
};
use tgda_core::{RngStream, Tensor};

/// Box spanned by every row and column holding at least one pixel at or
/// above `theta`.
fn brute_force_box(up: &Tensor<f64>, theta: f64) -> Option<CropBox> {
    let [h, w] = up.shape().try_into().unwrap();
    let hit = |y: usize, x: usize| up.data()[y * w + x] >= theta;
    let rows: Vec<usize> = (0..h).filter(|&y| (0..w).any(|x| hit(y, x))).collect();
    let cols: Vec<usize> = (0..w).filter(|&x| (0..h).any(|y| hit(y, x))).collect();
    let (&top, &bottom) = (rows.first()?, rows.last()?);
    let (&left, &right) = (cols.first()?, cols.last()?);
    Some(CropBox {
        top,
        left,
        height: bottom - top + 1,
        width: right - left + 1,
    })
}

fn argmax(t: &Tensor<f64>) -> usize {
    (0..t.numel()).max_by(|&a, &b| t.data()[a].total_cmp(&t.data()[b])).unwrap()
}

/// A random attention map: sparse bumps on a nonnegative floor, min-max
/// normalized like the selected map is.
fn random_map(rng: &mut RngStream, h: usize, w: usize) -> Tensor<f64> {
    let mut m = rng.uniform_tensor::<f64>(&[h, w], 0.0, 0.3);
    for _ in 0..1 + rng.below(3) {
        let i = rng.below(h * w);
        m.data_mut()[i] += rng.uniform_in(0.5, 2.0);
    }
    let (lo, hi) = (m.data().iter().cloned().fold(f64::INFINITY, f64::min), m.data().iter().cloned().fold(0.0, f64::max));
    m.map(|v| (v - lo) / (hi - lo))
}

#[test]
fn crop_box_matches_brute_force_on_a_thousand_maps() {
    let mut rng = RngStream::new(1);
    let mut boxes_smaller_than_image = 0;
    for trial in 0..1000 {
        let (mh, mw) = (2 + rng.below(7), 2 + rng.below(7));
        let (h, w) = (8 + rng.below(25), 8 + rng.below(25));
        let map = random_map(&mut rng, mh, mw);
        let theta = rng.uniform_in(0.05, 0.95);
        let image = rng.normal_tensor::<f64>(&[3, h, w], 1.0);
        let (out, b) = attention_crop(&image, &map, theta).unwrap();
        let up = upsample_map(&map, h, w).unwrap();
        let want = brute_force_box(&up, theta);
        assert_eq!(b, want.unwrap_or(CropBox::full(h, w)), "trial {trial}");
        assert_eq!(out.shape(), [3, h, w]);
        if want.is_some() {
            let (y, x) = (argmax(&up) / w, argmax(&up) % w);
            assert!(b.contains(y, x), "trial {trial}: argmax ({y}, {x}) outside {b:?}");
        }
        boxes_smaller_than_image += (b != CropBox::full(h, w)) as usize;
    }
    assert!(boxes_smaller_than_image > 500, "{boxes_smaller_than_image}");
}

#[test]
fn crop_of_a_delta_map_resizes_the_marked_region() {
    // upsampling 4x4 -> 8x8 spreads the peak to 0.75^2 over the matching
    // 2x2 block and at most 0.25 beyond it
    let mut map = Tensor::<f64>::zeros(&[4, 4]);
    map.data_mut()[4 + 1] = 1.0;
    let image = Tensor::from_fn(&[1, 8, 8], |i| i as f64);
    let (out, b) = attention_crop(&image, &map, 0.5).unwrap();
    assert_eq!(
        b,
        CropBox {
            top: 2,
            left: 2,
            height: 2,
            width: 2
        }
    );
    // resizing the patch [[18, 19], [26, 27]] by 4 clamps the borders
    assert_eq!(&out.data()[..4], &[18.0, 18.0, 18.125, 18.375]);
    assert_eq!(out.data()[63], 27.0);
}

#[test]
fn empty_masks_keep_the_full_image() {
    let map = Tensor::<f64>::zeros(&[3, 3]);
    let image = RngStream::new(2).normal_tensor::<f64>(&[3, 9, 9], 1.0);
    let (out, b) = attention_crop(&image, &map, 0.5).unwrap();
    assert_eq!(b, CropBox::full(9, 9));
    assert_eq!(out, image);
    assert_eq!(attention_drop(&image, &map, 0.5).unwrap(), image);
}

#[test]
fn drop_matches_elementwise_oracle() {
    let mut rng = RngStream::new(3);
    for _ in 0..200 {
        let (h, w) = (4 + rng.below(20), 4 + rng.below(20));
        let (mh, mw) = (2 + rng.below(6), 2 + rng.below(6));
        let map = random_map(&mut rng, mh, mw);
        let theta = rng.uniform_in(0.05, 0.95);
        let image = rng.normal_tensor::<f64>(&[3, h, w], 1.0);
        let out = attention_drop(&image, &map, theta).unwrap();
        let up = upsample_map(&map, h, w).unwrap();
        for c in 0..3 {
            for p in 0..h * w {
                let want = if up.data()[p] >= theta { 0.0 } else { image.data()[c * h * w + p] };
                assert_eq!(out.data()[c * h * w + p], want);
            }
        }
    }
}

#[test]
fn map_selection_follows_mean_activation() {
    let means = [0.5, 0.0, 1.5, 2.0];
    let maps = Tensor::from_fn(&[4, 2, 2], |i| {
        let k = i / 4;
        // same mean, varied shape
        means[k] * [0.5, 1.5, 1.0, 1.0][i % 4]
    });
    let mut rng = RngStream::new(4);
    let draws = 40_000;
    let mut counts = [0usize; 4];
    for _ in 0..draws {
        counts[select_attention_map(&maps, &mut rng).unwrap().0] += 1;
    }
    let total: f64 = means.iter().sum();
    for (k, &m) in means.iter().enumerate() {
        let p = m / total;
        let sd = (p * (1.0 - p) / draws as f64).sqrt();
        let freq = counts[k] as f64 / draws as f64;
        assert!((freq - p).abs() <= 5.0 * sd + 1e-12, "map {k}: {freq} vs {p}");
    }
    assert_eq!(counts[1], 0);
}

#[test]
fn all_zero_maps_fall_back_to_uniform_choice() {
    let maps = Tensor::<f64>::zeros(&[4, 3, 3]);
    let mut rng = RngStream::new(5);
    let mut counts = [0usize; 4];
    for _ in 0..4000 {
        let (k, m) = select_attention_map(&maps, &mut rng).unwrap();
        assert!(m.data().iter().all(|&v| v == 0.0));
        counts[k] += 1;
    }
    assert!(counts.iter().all(|&c| (800..1200).contains(&c)), "{counts:?}");
}

#[test]
fn selected_maps_are_min_max_normalized() {
    let mut rng = RngStream::new(6);
    let maps = rng.uniform_tensor::<f64>(&[5, 4, 6], 0.2, 3.0);
    let (k, m) = select_attention_map(&maps, &mut rng).unwrap();
    let src = &maps.data()[k * 24..(k + 1) * 24];
    let (lo, hi) = (src.iter().cloned().fold(f64::INFINITY, f64::min), src.iter().cloned().fold(0.0, f64::max));
    for (a, b) in m.data().iter().zip(src) {
        assert!((a - (b - lo) / (hi - lo)).abs() < 1e-12);
    }
    assert!(select_attention_map(&maps.map(|v| -v), &mut rng).is_err());
}

#[test]
fn guided_thresholds_are_drawn_from_the_configured_range() {
    // a linear ramp map makes the crop box a direct readout of the threshold
    let map = Tensor::from_fn(&[1, 1, 101], |i| i as f64 / 100.0);
    let image = Tensor::<f64>::zeros(&[1, 1, 101]);
    let cfg = AugmentConfig::default();
    let mut rng = RngStream::new(7);
    let mut lefts = Vec::new();
    for _ in 0..500 {
        let pair = guided_augment(&image, &map, GuidedKind::Crop, &cfg, &mut rng).unwrap();
        lefts.push(pair.crop_box.unwrap().left);
        assert_eq!(pair.map_index, 0);
    }
    let (lo, hi) = (*lefts.iter().min().unwrap(), *lefts.iter().max().unwrap());
    assert!(lo >= 40 && hi <= 60, "{lo}..{hi}");
    assert!(lo < 45 && hi > 55, "{lo}..{hi}");
}

#[test]
fn guided_batch_is_deterministic_per_sample() {
    let mut rng = RngStream::new(8);
    let images = rng.normal_tensor::<f64>(&[3, 3, 16, 16], 1.0);
    let maps = rng.uniform_tensor::<f64>(&[3, 4, 4, 4], 0.0, 1.0);
    let cfg = AugmentConfig::default();
    let streams = || (0..3).map(|i| RngStream::derive(9, &[i])).collect::<Vec<_>>();
    for kind in [GuidedKind::Crop, GuidedKind::Drop] {
        let a = guided_batch(&images, &maps, kind, &cfg, &mut streams()).unwrap();
        let b = guided_batch(&images, &maps, kind, &cfg, &mut streams()).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.shape(), images.shape());
        // sample 1 alone gets the same view
        let one = guided_augment(&images.index_axis0(1), &maps.index_axis0(1), kind, &cfg, &mut RngStream::derive(9, &[1]))
            .unwrap();
        assert_eq!(a.index_axis0(1), one.augmented);
    }
    assert!(guided_batch(&images, &maps, GuidedKind::Crop, &cfg, &mut streams()[..2].to_vec()).is_err());
    assert_eq!(GuidedKind::for_step(0), GuidedKind::Crop);
    assert_eq!(GuidedKind::for_step(7), GuidedKind::Drop);
}

#[test]
fn eval_policy_is_deterministic_and_standardized() {
    let img = RngStream::new(10).uniform_tensor::<f64>(&[3, 20, 24], 0.0, 1.0);
    let (mean, std) = ([0.5, 0.4, 0.3], [0.2, 0.25, 0.3]);
    let cfg = AugmentConfig::default();
    let a = standard_augment(&img, Policy::Eval, 20, &mean, &std, &cfg, &mut RngStream::new(1)).unwrap();
    let b = standard_augment(&img, Policy::Eval, 20, &mean, &std, &cfg, &mut RngStream::new(2)).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.shape(), [3, 20, 20]);
    // the short side already matches, so eval is a centered crop
    for c in 0..3 {
        for y in 0..20 {
            for x in 0..20 {
                let want = (img.at(&[c, y, x + 2]) - mean[c]) / std[c];
                assert!((a.at(&[c, y, x]) - want).abs() < 1e-12);
            }
        }
    }
}

#[test]
fn train_policy_varies_with_the_stream() {
    let img = RngStream::new(11).uniform_tensor::<f64>(&[3, 32, 32], 0.0, 1.0);
    let cfg = AugmentConfig::default();
    let run = |seed| standard_augment(&img, Policy::Train, 24, &[0.5; 3], &[0.25; 3], &cfg, &mut RngStream::new(seed)).unwrap();
    assert_eq!(run(3), run(3));
    assert_ne!(run(3), run(4));
    assert_eq!(run(3).shape(), [3, 24, 24]);
}

#[test]
fn trivial_augment_ops_are_identities_at_zero_strength() {
    let img = RngStream::new(12).uniform_tensor::<f64>(&[3, 9, 11], 0.0, 1.0);
    for op in TA_OPS {
        let out = trivial_augment_op(&img, op, 0.0).unwrap();
        assert!(out.max_abs_diff(&img) < 1e-12, "{op:?}");
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn crop_box_stays_inside_and_covers_the_mask(
        seed in 0u64..10_000, h in 4usize..40, w in 4usize..40, theta in 0.01f64..0.99,
    ) {
        let mut rng = RngStream::new(seed);
        let (mh, mw) = (1 + rng.below(8), 1 + rng.below(8));
        let map = random_map(&mut rng, mh, mw);
        let image = Tensor::<f64>::zeros(&[1, h, w]);
        let (_, b) = attention_crop(&image, &map, theta).unwrap();
        prop_assert!(b.height > 0 && b.width > 0 && b.top + b.height <= h && b.left + b.width <= w);
        let up = upsample_map(&map, h, w).unwrap();
        for p in 0..h * w {
            if up.data()[p] >= theta {
                prop_assert!(b.contains(p / w, p % w));
            }
        }
    }

    #[test]
    fn drop_only_ever_zeroes(seed in 0u64..10_000, theta in 0.01f64..0.99) {
        let mut rng = RngStream::new(seed);
        let map = random_map(&mut rng, 3, 5);
        let image = rng.uniform_tensor::<f64>(&[3, 12, 10], 0.1, 1.0);
        let out = attention_drop(&image, &map, theta).unwrap();
        for (o, i) in out.data().iter().zip(image.data()) {
            prop_assert!(*o == *i || *o == 0.0);
        }
    }
}
