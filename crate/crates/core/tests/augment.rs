use hemogan::augment::{
    affine_pair, augment_dataset, blur_kernel, gaussian_blur, photometric, Affine, AffineParams, AugmentPolicy,
};
use hemogan::phantom::generate_dataset;
use hemogan::rng::seeded;
use proptest::prelude::*;
use rand::Rng;

fn phantom(seed: u64) -> (Vec<f64>, Vec<u8>) {
    let s = generate_dataset(1, 1, 64, seed).unwrap().train.swap_remove(0);
    (s.image, s.mask)
}

#[test]
fn identity_is_bit_exact() {
    let (img, mask) = phantom(1);
    let (i2, m2) = affine_pair(&img, &mask, AffineParams::IDENTITY).unwrap();
    assert_eq!(i2, img);
    assert_eq!(m2, mask);
}

#[test]
fn half_turn_reverses_indices() {
    let (img, mask) = phantom(2);
    let a = Affine::new(AffineParams { rotation_deg: 180.0, ..AffineParams::IDENTITY }, 64);
    let (ri, rm) = (a.apply_image(&img), a.apply_mask(&mask));
    for i in 0..64 {
        for j in 0..64 {
            let src = (63 - i) * 64 + (63 - j);
            assert_eq!(ri[i * 64 + j], img[src]);
            assert_eq!(rm[i * 64 + j], mask[src]);
        }
    }
}

/// Independent inverse map: undo rotation, then scale, then shear, each
/// as its own step about the centre.
fn oracle_source(i: usize, j: usize, p: AffineParams, n: usize) -> (f64, f64) {
    let c = (n as f64 - 1.0) / 2.0;
    let (x, y) = (j as f64 - c, i as f64 - c);
    let t = -p.rotation_deg.to_radians();
    let (x, y) = (x * t.cos() - y * t.sin(), x * t.sin() + y * t.cos());
    let s = 1.0 + p.rescale_pct / 100.0;
    let (x, y) = (x / s, y / s);
    let k = p.shear_px / (n as f64 / 2.0);
    (y + c, x - k * y + c)
}

#[test]
fn affine_mask_matches_per_pixel_oracle() {
    let mut r = seeded(3);
    let (mut agree, mut total) = (0usize, 0usize);
    for trial in 0..20 {
        let (img, mask) = phantom(10 + trial);
        let p = AffineParams {
            rotation_deg: r.random_range(-25.0..25.0),
            rescale_pct: r.random_range(-15.0..15.0),
            shear_px: r.random_range(-10.0..10.0),
        };
        let (_, out) = affine_pair(&img, &mask, p).unwrap();
        for i in 0..64 {
            for j in 0..64 {
                if out[i * 64 + j] == 0 {
                    continue;
                }
                let (y, x) = oracle_source(i, j, p, 64);
                if ((y.fract().abs() - 0.5).abs() < 1e-6) || ((x.fract().abs() - 0.5).abs() < 1e-6) {
                    continue;
                }
                let (ry, rx) = (y.round() as isize, x.round() as isize);
                let want = if (0..64).contains(&ry) && (0..64).contains(&rx) { mask[(ry * 64 + rx) as usize] } else { 0 };
                total += 1;
                agree += (want == out[i * 64 + j]) as usize;
            }
        }
    }
    assert!(total > 0);
    assert!(agree as f64 >= 0.995 * total as f64, "{agree}/{total}");
}

#[test]
fn photometric_examples() {
    let flat = vec![0.42; 32 * 32];
    let blurred = photometric(&flat, true, 0.0).unwrap();
    assert!(blurred.iter().all(|v| (v - 0.42).abs() < 1e-12));
    let (img, _) = phantom(4);
    assert_eq!(photometric(&img, false, 0.0).unwrap(), img);
    let bright = photometric(&img, false, 0.5).unwrap();
    assert!(bright.iter().zip(&img).all(|(b, a)| *b >= *a && *b <= 1.0));
}

#[test]
fn blur_preserves_mass_away_from_border() {
    let k = blur_kernel();
    assert!((k.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    let mut r = seeded(5);
    let mut img = vec![0.0; 32 * 32];
    for y in 2..30 {
        for x in 2..30 {
            img[y * 32 + x] = r.random_range(0.0..1.0);
        }
    }
    let b = gaussian_blur(&img, 32, 32);
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    assert!((mean(&b) - mean(&img)).abs() < 1e-9);
}

#[test]
fn augment_dataset_is_sized_and_deterministic() {
    let ds = generate_dataset(3, 1, 64, 6).unwrap();
    let policy = AugmentPolicy::new(17);
    let a = augment_dataset(&ds.train, &policy).unwrap();
    let b = augment_dataset(&ds.train, &policy).unwrap();
    assert_eq!(a.len(), ds.train.len());
    assert_eq!(a, b);
    assert_ne!(a, augment_dataset(&ds.train, &AugmentPolicy::new(18)).unwrap());
    for (x, y) in a.iter().zip(&ds.train) {
        assert_eq!((&x.patient, x.slice), (&y.patient, y.slice));
    }
}

#[test]
fn max_rescale_area_change_is_bounded() {
    let ds = generate_dataset(4, 1, 64, 7).unwrap();
    let mut changes = Vec::new();
    for pct in [-15.0, 15.0] {
        for s in &ds.train {
            let (_, m) = affine_pair(&s.image, &s.mask, AffineParams { rescale_pct: pct, ..AffineParams::IDENTITY }).unwrap();
            for c in 1..6u8 {
                let before = s.mask.iter().filter(|&&v| v == c).count();
                if before > 0 {
                    let after = m.iter().filter(|&&v| v == c).count();
                    changes.push((after as f64 - before as f64).abs() / before as f64);
                }
            }
        }
    }
    let avg = changes.iter().sum::<f64>() / changes.len() as f64;
    assert!(avg < 0.35, "average relative change {avg}");
}

#[test]
fn policy_validation() {
    assert!(AugmentPolicy::new(0).validate().is_ok());
    let bad = AugmentPolicy { rotation_deg: 40.0, ..AugmentPolicy::new(0) };
    assert!(augment_dataset(&[], &bad).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn labels_never_grow_and_intensities_stay_in_range(seed in 0u64..10_000) {
        let ds = generate_dataset(1, 1, 32, seed % 50).unwrap();
        let out = augment_dataset(&ds.train[..2], &AugmentPolicy::new(seed)).unwrap();
        for (a, s) in out.iter().zip(&ds.train) {
            let before: std::collections::HashSet<u8> = s.mask.iter().copied().collect();
            prop_assert!(a.mask.iter().all(|c| *c == 0 || before.contains(c)));
            prop_assert!(a.image.iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }
}
