//! Property tests for the numeric and geometric invariants.

use brushwork::network::{CinLayout, IntensityRegressor};
use brushwork::ops::cin_forward;
use brushwork::pipeline::{blend_image_space, crop_unrotate, rotate_mask, rotate_pad, LevelMask, PreviewSet, RotationFrame};
use brushwork::train::cycle_factor;
use brushwork::{ImagePlane, Tensor};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

fn noise(c: usize, h: usize, w: usize, seed: u64, scale: f32, offset: f32) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(c, h, w, |_, _, _| offset + scale * rng.sample::<f32, _>(StandardNormal))
}

fn uniform_weights(l: usize, h: usize, w: usize, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(l, h, w, |_, _, _| rng.gen_range(0.0..1.0))
}

fn image(h: usize, w: usize, seed: u64) -> ImagePlane {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    ImagePlane::from_fn(h, w, |_, _| [rng.gen(), rng.gen(), rng.gen()])
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn cin_with_unit_gamma_zero_beta_standardizes(
        c in 1usize..8, h in 2usize..14, w in 2usize..14,
        seed: u64, scale in 0.5f32..10.0, offset in -10.0f32..10.0,
    ) {
        let x = noise(c, h, w, seed, scale, offset);
        let y = cin_forward(&x, &vec![1.0; c], &vec![0.0; c]).unwrap();
        for ch in 0..c {
            let p = y.plane(ch);
            let n = p.len() as f64;
            let mean = p.iter().map(|&v| v as f64).sum::<f64>() / n;
            let var = p.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / n;
            prop_assert!(mean.abs() < 1e-5, "mean {mean}");
            prop_assert!((var.sqrt() - 1.0).abs() < 1e-4, "std {}", var.sqrt());
        }
    }

    #[test]
    fn regressor_is_affine_in_intensity(seed: u64, a in 0.0f32..4.0, b in 0.0f32..4.0) {
        let layout = CinLayout::new(vec![("l0".into(), 5), ("l1".into(), 3)]);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let p = layout.param_count();
        let reg = IntensityRegressor {
            weight: (0..p).map(|_| rng.gen_range(-0.5..0.5)).collect(),
            bias: (0..p).map(|_| rng.gen_range(-1.5..1.5)).collect(),
        };
        let mid = reg.params(&layout, (a + b) / 2.0).unwrap();
        let pa = reg.params(&layout, a).unwrap();
        let pb = reg.params(&layout, b).unwrap();
        for ((m, x), y) in mid.flat().iter().zip(pa.flat()).zip(pb.flat()) {
            let avg = (*x as f64 + *y as f64) / 2.0;
            prop_assert!((*m as f64 - avg).abs() <= 1e-6, "{m} vs {avg}");
        }
    }

    #[test]
    fn image_space_blend_is_linear_in_the_mask(
        l in 2usize..5, h in 1usize..12, w in 1usize..12, seed: u64,
    ) {
        let previews = PreviewSet {
            images: (0..l).map(|i| image(h, w, seed ^ i as u64)).collect(),
            blended: image(h, w, seed),
        };
        let ma = LevelMask::from_weights(uniform_weights(l, h, w, seed.wrapping_add(1))).unwrap();
        let mb = LevelMask::from_weights(uniform_weights(l, h, w, seed.wrapping_add(2))).unwrap();
        let mut mid = ma.weights().clone();
        for (v, o) in mid.data_mut().iter_mut().zip(mb.weights().data()) {
            *v = (*v + o) / 2.0;
        }
        let mm = LevelMask::from_weights(mid).unwrap();
        let ba = blend_image_space(&previews, &ma).unwrap();
        let bb = blend_image_space(&previews, &mb).unwrap();
        let bm = blend_image_space(&previews, &mm).unwrap();
        for ((m, x), y) in bm.data().iter().zip(ba.data()).zip(bb.data()) {
            prop_assert!((m - (x + y) / 2.0).abs() <= 1e-6);
        }
    }

    #[test]
    fn binary_masks_select_pixels_exactly(l in 2usize..5, h in 1usize..12, w in 1usize..12, seed: u64) {
        let images: Vec<ImagePlane> = (0..l).map(|i| image(h, w, seed ^ (i as u64 * 7919))).collect();
        let previews = PreviewSet { blended: images[0].clone(), images };
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let labels: Vec<u8> = (0..h * w).map(|_| rng.gen_range(0..l as u8)).collect();
        let mask = LevelMask::from_labels(&labels, l, h, w).unwrap();
        let out = blend_image_space(&previews, &mask).unwrap();
        for y in 0..h {
            for x in 0..w {
                let k = labels[y * w + x] as usize;
                prop_assert_eq!(out.pixel(y, x), previews.images[k].pixel(y, x));
            }
        }
    }

    #[test]
    fn rotated_masks_stay_convex(
        l in 1usize..5, h in 4usize..24, w in 4usize..24, seed: u64, tau in 0.0f32..360.0,
    ) {
        let mask = LevelMask::from_weights(uniform_weights(l, h, w, seed)).unwrap();
        let frame = RotationFrame::new(tau, (h, w));
        let rotated = rotate_mask(&mask, &frame).unwrap();
        prop_assert!(rotated.max_sum_error() <= 1e-6);
        prop_assert_eq!(rotated.extent(), frame.padded_extent);
    }

    #[test]
    fn quarter_turns_round_trip_exactly(h in 1usize..20, w in 1usize..20, seed: u64, q in 0usize..4) {
        let img = image(h, w, seed);
        let (rotated, frame) = rotate_pad(&img, 90.0 * q as f32);
        prop_assert_eq!(crop_unrotate(&rotated, &frame).unwrap(), img);
    }

    #[test]
    fn factors_are_used_evenly(n in 1usize..400) {
        let cycle = [2.0, 4.0];
        let twos = (0..n).filter(|&s| cycle_factor(&cycle, s) == 2.0).count();
        let fours = n - twos;
        prop_assert!(twos == n.div_ceil(2) || twos == n / 2);
        prop_assert!(fours == n.div_ceil(2) || fours == n / 2);
    }
}
