//! Randomized invariants across modules.

use proptest::prelude::*;

use crate::autodiff::{Shape, Tape, Tensor};
use crate::data::{crop_back, decode_netpbm, encode_netpbm, pad_to_multiple};
use crate::eval::{psnr, ssim};
use crate::image::Image;
use crate::retinex::{csd_divide, guidance_parts, EPS};
use crate::train::relativistic_losses;

fn plane(max_side: usize) -> impl Strategy<Value = (usize, usize, Vec<f64>)> {
    (1..=max_side, 1..=max_side).prop_flat_map(|(h, w)| (Just(h), Just(w), prop::collection::vec(0.0f64..1.0, h * w)))
}

fn image(max_side: usize) -> impl Strategy<Value = Image> {
    (1..=max_side, 1..=max_side, prop_oneof![Just(1usize), Just(3usize)]).prop_flat_map(|(h, w, c)| {
        prop::collection::vec(0.0f32..=1.0, h * w * c).prop_map(move |d| Image::new(h, w, c, d).unwrap())
    })
}

/// At least one SSIM window in each direction.
fn image_pair(max_side: usize) -> impl Strategy<Value = (Image, Image)> {
    (8..=max_side, 8..=max_side, prop_oneof![Just(1usize), Just(3usize)]).prop_flat_map(|(h, w, c)| {
        let px = move || prop::collection::vec(0.0f32..=1.0, h * w * c);
        (px(), px()).prop_map(move |(a, b)| (Image::new(h, w, c, a).unwrap(), Image::new(h, w, c, b).unwrap()))
    })
}

fn guidance(h: usize, w: usize, p: &[f64]) -> Vec<f64> {
    let (a, b) = guidance_parts(h, w, p);
    a.iter().zip(&b).map(|(x, y)| x + y).collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn guidance_shifts_with_the_input((h, w, p) in plane(12), c in -2.0f64..2.0) {
        let shifted: Vec<f64> = p.iter().map(|v| v + c).collect();
        let (base, moved) = (guidance(h, w, &p), guidance(h, w, &shifted));
        for (x, y) in base.iter().zip(&moved) {
            prop_assert!((y - x - c).abs() < 1e-12);
        }
    }

    #[test]
    fn guidance_bounds_the_input((h, w, p) in plane(12)) {
        for (g, v) in guidance(h, w, &p).iter().zip(&p) {
            prop_assert!(g >= v);
        }
    }

    #[test]
    fn edge_term_ignores_offsets((h, w, p) in plane(12), c in -2.0f64..2.0) {
        let shifted: Vec<f64> = p.iter().map(|v| v + c).collect();
        let (_, b0) = guidance_parts(h, w, &p);
        let (_, b1) = guidance_parts(h, w, &shifted);
        for (x, y) in b0.iter().zip(&b1) {
            prop_assert!(*x >= 0.0 && (x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn dividing_by_ones_is_identity(values in prop::collection::vec(0.0f32..=1.0, 2 * 4 * 8 * 8)) {
        let shape = Shape::new(2, 4, 8, 8);
        let mut tape = Tape::<f32>::default();
        let f = tape.constant(Tensor::new(shape, values.clone()).unwrap());
        let ones = tape.constant(Tensor::ones(shape));
        let q = csd_divide(&mut tape, f, ones, EPS).unwrap();
        for (a, b) in tape.value(q).data().iter().zip(&values) {
            prop_assert!((a - b).abs() <= 2.0 * EPS * b.abs());
        }
    }

    #[test]
    fn pad_then_crop_is_lossless(img in image(20), k in 1usize..17) {
        let (padded, extents) = pad_to_multiple(&img, k).unwrap();
        prop_assert_eq!(padded.height() % k, 0);
        prop_assert_eq!(padded.width() % k, 0);
        prop_assert_eq!(crop_back(&padded, extents).unwrap(), img);
    }

    #[test]
    fn netpbm_roundtrip_is_within_half_a_level(img in image(12)) {
        let back = decode_netpbm(&encode_netpbm(&img), std::path::Path::new("mem")).unwrap();
        prop_assert!(back.max_abs_diff(&img) <= 1.0 / 510.0);
    }

    #[test]
    fn psnr_and_ssim_are_symmetric((a, b) in image_pair(12)) {
        prop_assert_eq!(psnr(&a, &b).unwrap().to_bits(), psnr(&b, &a).unwrap().to_bits());
        prop_assert!((ssim(&a, &b).unwrap() - ssim(&b, &a).unwrap()).abs() < 1e-12);
        prop_assert_eq!(ssim(&a, &a).unwrap(), 1.0);
    }

    #[test]
    fn psnr_falls_as_the_gap_grows(base in 0.0f32..0.4, d1 in 0.01f32..0.3, extra in 0.01f32..0.3) {
        let a = Image::filled(4, 4, 3, base).unwrap();
        let near = Image::filled(4, 4, 3, base + d1).unwrap();
        let far = Image::filled(4, 4, 3, base + d1 + extra).unwrap();
        prop_assert!(psnr(&a, &near).unwrap() > psnr(&a, &far).unwrap());
    }

    #[test]
    fn relativistic_losses_ignore_score_offsets(
        scores in prop::collection::vec(-3.0f64..3.0, 16),
        c in -10.0f64..10.0,
    ) {
        let eval = |shift: f64| {
            let mut tape = Tape::<f64>::default();
            let maps: Vec<_> = scores
                .chunks(4)
                .map(|s| tape.constant(Tensor::new(Shape::new(1, 1, 2, 2), s.iter().map(|v| v + shift).collect()).unwrap()))
                .collect();
            let (d, g) = relativistic_losses(&mut tape, &maps[..2], &maps[2..]).unwrap();
            (tape.value(d).item(), tape.value(g).item())
        };
        let ((d0, g0), (d1, g1)) = (eval(0.0), eval(c));
        prop_assert!(d0 >= 0.0 && g0 >= 0.0);
        prop_assert!((d0 - d1).abs() < 1e-9 && (g0 - g1).abs() < 1e-9);
    }
}
