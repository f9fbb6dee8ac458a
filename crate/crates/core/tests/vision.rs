use mvlt_core::rng;
use mvlt_core::vision::{apply_mask, make_mask_plan, normalize, unit_budget, Image, MaskPlan, MaskStyle, ZERO_FILL};
use mvlt_core::Float;
use proptest::prelude::*;
use rand::Rng;

fn random_image(seed: u64, size: usize) -> Image {
    let mut r = rng::seeded(seed);
    let data = (0..3 * size * size).map(|_| r.gen_range(0.0..1.0)).collect();
    Image::new(size, size, data).unwrap()
}

#[test]
fn normalize_extremes() {
    let img = normalize(&[0; 2 * 2 * 3], 2, 2, 3).unwrap();
    assert!(img.data().iter().all(|&v| v == 0.0));
    let img = normalize(&[255; 2 * 2 * 3], 2, 2, 3).unwrap();
    assert!(img.data().iter().all(|&v| v == 1.0));
    let img = normalize(&[128; 3], 1, 1, 3).unwrap();
    assert_eq!(img.pixel(0, 0, 0), 128.0 / 255.0);
}

#[test]
fn default_plan_has_256_units_and_masks_half() {
    let mut r = rng::seeded(0);
    let plan = make_mask_plan(256, 256, 4, 4, 0.5, MaskStyle::RandomGrid, &mut r).unwrap();
    assert_eq!(plan.unit_count(), 256);
    assert_eq!(plan.len(), 128);
    assert_eq!(plan.unit_edge(), 16);
    let img = random_image(1, 256);
    let masked = apply_mask(&img, &plan).unwrap();
    let plane = 256 * 256;
    for c in 0..3 {
        let count = masked.data()[c * plane..(c + 1) * plane]
            .iter()
            .filter(|&&v| v == ZERO_FILL)
            .count();
        assert_eq!(count, 128 * 16 * 16);
        assert_eq!(count, 32_768);
    }
}

#[test]
fn alpha_eight_gives_32px_units() {
    let mut r = rng::seeded(0);
    let plan = make_mask_plan(256, 256, 4, 8, 0.5, MaskStyle::RandomGrid, &mut r).unwrap();
    assert_eq!(plan.unit_edge(), 32);
    assert_eq!(plan.unit_count(), 64);
    assert_eq!(plan.len(), 32);
}

#[test]
fn ratio_extremes() {
    let mut r = rng::seeded(0);
    for style in MaskStyle::ALL {
        let none = make_mask_plan(64, 64, 4, 2, 0.0, style, &mut r).unwrap();
        assert!(none.is_empty(), "{style}");
        let all = make_mask_plan(64, 64, 4, 2, 1.0, style, &mut r).unwrap();
        assert_eq!(all.units, (0..64).collect::<Vec<_>>(), "{style}");
    }
    let img = random_image(2, 64);
    let none = make_mask_plan(64, 64, 4, 2, 0.0, MaskStyle::RandomGrid, &mut r).unwrap();
    assert!(apply_mask(&img, &none).unwrap() == img);
    let all = make_mask_plan(64, 64, 4, 2, 1.0, MaskStyle::RandomGrid, &mut r).unwrap();
    assert!(apply_mask(&img, &all).unwrap().data().iter().all(|&v| v == ZERO_FILL));
}

#[test]
fn invalid_geometry_and_ratio_are_rejected() {
    let mut r = rng::seeded(0);
    assert!(make_mask_plan(250, 250, 4, 4, 0.5, MaskStyle::Grid, &mut r).is_err());
    assert!(make_mask_plan(256, 256, 4, 4, 1.2, MaskStyle::Grid, &mut r).is_err());
    let plan = make_mask_plan(64, 64, 4, 4, 0.5, MaskStyle::Grid, &mut r).unwrap();
    assert!(apply_mask(&random_image(3, 32), &plan).is_err());
}

#[test]
fn every_style_hits_the_swept_ratios() {
    let q = 256;
    for style in MaskStyle::ALL {
        for ratio in [0.1, 0.3, 0.5, 0.7, 0.9] {
            let a = make_mask_plan(256, 256, 4, 4, ratio, style, &mut rng::seeded(11)).unwrap();
            let b = make_mask_plan(256, 256, 4, 4, ratio, style, &mut rng::seeded(11)).unwrap();
            assert_eq!(a, b, "{style} not deterministic");
            let mut sorted = a.units.clone();
            sorted.dedup();
            assert_eq!(sorted.len(), a.len());
            assert!(a.units.iter().all(|&u| u < q));
            let gap = ratio - a.achieved_ratio();
            if style == MaskStyle::Center {
                assert!(gap >= -1.0 / q as f64, "center overshoots at {ratio}");
            } else {
                assert!(gap.abs() <= 1.0 / q as f64, "{style} at {ratio}: {}", a.achieved_ratio());
                assert_eq!(a.len(), unit_budget(ratio, q));
            }
        }
    }
}

#[test]
fn plan_text_round_trip() {
    let mut r = rng::seeded(4);
    let plan = make_mask_plan(128, 128, 4, 2, 0.3, MaskStyle::Stroke, &mut r).unwrap();
    let text = plan.to_text();
    assert!(text.starts_with("2 4 256 stroke\n"));
    let back = MaskPlan::from_text(&text, 128).unwrap();
    assert_eq!(back.units, plan.units);
    assert_eq!(back.style, plan.style);
    assert!(MaskPlan::from_text("2 4 999 stroke\n1\n", 128).is_err());
    assert!(MaskPlan::from_text("2 4 256 stroke\n5\n3\n", 128).is_err());
}

#[test]
fn png_round_trip_preserves_bytes() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("x.png");
    let bytes: Vec<u8> = (0..8 * 8 * 3).map(|i| (i * 7 % 256) as u8).collect();
    let img = normalize(&bytes, 8, 8, 3).unwrap();
    img.save_png(&path).unwrap();
    let back = Image::load_png(&path).unwrap();
    assert_eq!(back.to_bytes(), bytes);
    assert_eq!(back, img);
}

proptest! {
    #[test]
    fn masked_fraction_is_exact_and_masking_idempotent(
        seed in 0u64..1000,
        ratio in 0.0f64..=1.0,
        style_idx in 0usize..4,
        alpha in 1usize..=2,
    ) {
        let style = MaskStyle::ALL[style_idx];
        let mut r = rng::seeded(seed);
        let plan = make_mask_plan(32, 32, 4, alpha, ratio, style, &mut r).unwrap();
        let img = random_image(seed, 32);
        let once = apply_mask(&img, &plan).unwrap();
        let twice = apply_mask(&once, &plan).unwrap();
        prop_assert!(once == twice);
        let mask = plan.pixel_mask();
        let masked = mask.iter().filter(|&&m| m).count();
        prop_assert_eq!(masked * plan.unit_count(), plan.len() * 32 * 32);
        for (i, &m) in mask.iter().enumerate() {
            let v: Float = once.data()[i];
            if m {
                prop_assert_eq!(v, ZERO_FILL);
            } else {
                prop_assert_eq!(v.to_bits(), img.data()[i].to_bits());
            }
        }
    }

    #[test]
    fn random_styles_are_seed_deterministic(seed in 0u64..1000, ratio in 0.0f64..=1.0) {
        for style in [MaskStyle::RandomGrid, MaskStyle::Stroke] {
            let a = make_mask_plan(64, 64, 4, 1, ratio, style, &mut rng::seeded(seed)).unwrap();
            let b = make_mask_plan(64, 64, 4, 1, ratio, style, &mut rng::seeded(seed)).unwrap();
            prop_assert_eq!(a, b);
        }
    }
}
