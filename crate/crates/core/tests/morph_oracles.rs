mod common;

use common::{naive_erode, naive_fill, random_mask};
use dtvit_core::morph::{
    build_mask, erode_disk, fill_holes, mask_and_export, preprocess, Connectivity, MorphParams, Window,
};
use dtvit_core::phantom::{generate, PhantomClass, PhantomSpec};
use dtvit_core::raster::RawScan;
use dtvit_core::SplitMix64;

#[test]
fn erosion_matches_brute_force() {
    for radius in 1..=3 {
        let mut rng = SplitMix64::keyed(1, "erode", &[radius as u64]);
        for _ in 0..100 {
            let m = random_mask(&mut rng, 64);
            let fast = erode_disk(&m, radius);
            assert_eq!(fast, naive_erode(&m, radius), "radius {radius}");
            assert!(fast.is_subset_of(&m));
        }
    }
}

#[test]
fn hole_fill_matches_breadth_first_oracle() {
    for (k, conn) in [Connectivity::Four, Connectivity::Eight].into_iter().enumerate() {
        let mut rng = SplitMix64::keyed(2, "fill", &[k as u64]);
        let mut filled_any = false;
        for _ in 0..100 {
            let m = random_mask(&mut rng, 64);
            let fast = fill_holes(&m, conn);
            assert_eq!(fast, naive_fill(&m, conn), "{conn:?}");
            assert!(m.is_subset_of(&fast));
            filled_any |= fast.count() > m.count();
        }
        assert!(filled_any, "the random masks should contain holes");
    }
}

#[test]
fn export_stays_in_range_and_zero_outside_mask() {
    let mut rng = SplitMix64::new(77);
    for i in 0..50 {
        let px: Vec<i16> = (0..48 * 48).map(|_| rng.uniform(-1200.0, 2000.0) as i16).collect();
        let scan = RawScan::new(48, 48, px).unwrap();
        let mask = random_mask(&mut rng, 48);
        let window = (i % 2 == 0).then_some(Window {
            center: 40.0,
            width: 80.0,
        });
        let out = mask_and_export(&scan, &mask, window).unwrap();
        for (p, &m) in out.pixels().iter().zip(mask.bits()) {
            if !m {
                assert_eq!(*p, 0);
            }
        }
    }
}

#[test]
fn second_pass_keeps_zeroed_pixels_zero() {
    let params = MorphParams::default();
    for seed in 0..10 {
        let p = generate(PhantomClass::ALL[seed as usize % 4], &PhantomSpec::default(), seed).unwrap();
        let once = preprocess(&p.scan, &params).unwrap();
        let as_raw = RawScan::new(
            once.height(),
            once.width(),
            once.pixels().iter().map(|&v| i16::from(v)).collect(),
        )
        .unwrap();
        let twice = preprocess(&as_raw, &params).unwrap();
        for (a, b) in once.pixels().iter().zip(twice.pixels()) {
            if *a == 0 {
                assert_eq!(*b, 0);
            }
        }
    }
}

#[test]
fn preprocess_strips_brace_and_keeps_brain() {
    let (removed, retained) = common::brace_and_brain_coverage(0..100);
    assert!(removed >= 0.99, "brace removal {removed}");
    assert!(retained >= 0.95, "brain retention {retained}");
}

#[test]
fn exported_brace_pixels_are_dark() {
    let params = MorphParams::default();
    for seed in 0..10u64 {
        let p = generate(PhantomClass::ALL[seed as usize % 4], &PhantomSpec::default(), seed).unwrap();
        let mask = build_mask(&p.scan, &params).unwrap();
        let img = preprocess(&p.scan, &params).unwrap();
        let lit = p.brace.bits().iter().zip(img.pixels()).filter(|(b, v)| **b && **v > 0).count();
        assert!(lit <= p.brace.overlap(&mask));
    }
}
