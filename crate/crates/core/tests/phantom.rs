use std::collections::HashSet;
use std::path::Path;

use hemogan::data::{manifest, read_dataset, write_dataset, Split};
use hemogan::exec::Exec;
use hemogan::phantom::{
    brain_frame, generate_dataset, generate_dataset_with, generate_patient, slice_scale, subset_by_patients, Lesion,
    PatientSpec, DEEP_LIMIT, SKULL_BAND,
};
use proptest::prelude::*;

fn specs(n: usize, seed: u64) -> Vec<PatientSpec> {
    (0..n).map(|i| PatientSpec::random(format!("p{i}"), seed * 1000 + i as u64)).collect()
}

#[test]
fn every_slice_has_a_lesion_and_lesions_are_hyperdense() {
    for spec in specs(120, 1) {
        for s in generate_patient(&spec, 64).unwrap() {
            let lesion: Vec<f64> = s.image.iter().zip(&s.mask).filter(|(_, &m)| m > 0).map(|(v, _)| *v).collect();
            assert!(!lesion.is_empty(), "{} slice {} has no lesion", s.patient, s.slice);
            let scale = slice_scale(s.slice as usize, spec.slices);
            let brain: Vec<f64> = (0..64 * 64)
                .filter(|&p| {
                    let b = brain_frame(&spec.head, scale, (p % 64) as f64 / 64.0 + 1.0 / 128.0, (p / 64) as f64 / 64.0 + 1.0 / 128.0);
                    b.rho < 1.0 && s.mask[p] == 0
                })
                .map(|p| s.image[p])
                .collect();
            let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
            assert!(mean(&lesion) > mean(&brain), "{} slice {}", s.patient, s.slice);
        }
    }
}

#[test]
fn lesions_respect_their_zones() {
    for spec in specs(150, 2) {
        for s in generate_patient(&spec, 64).unwrap() {
            let scale = slice_scale(s.slice as usize, spec.slices);
            for (p, &m) in s.mask.iter().enumerate() {
                if m == 0 {
                    continue;
                }
                let b = brain_frame(&spec.head, scale, ((p % 64) as f64 + 0.5) / 64.0, ((p / 64) as f64 + 0.5) / 64.0);
                assert!(b.rho < 1.0, "lesion pixel on skull");
                match Lesion::from_index(m).unwrap() {
                    Lesion::Edh | Lesion::Sdh => assert!(b.rho >= 1.0 - SKULL_BAND, "rho {}", b.rho),
                    Lesion::Iph | Lesion::Ivh => assert!(b.rho <= DEEP_LIMIT, "rho {}", b.rho),
                    Lesion::Sah => assert!(b.rho >= 0.65),
                }
            }
        }
    }
}

#[test]
fn same_spec_renders_identically() {
    let spec = PatientSpec::random("x", 99);
    assert_eq!(generate_patient(&spec, 64).unwrap(), generate_patient(&spec, 64).unwrap());
    assert_eq!(generate_patient(&spec, 256).unwrap().len(), spec.slices);
}

#[test]
fn rejects_tiny_images() {
    assert!(generate_patient(&PatientSpec::random("x", 1), 16).is_err());
}

#[test]
fn dataset_scale_and_disjoint_splits() {
    let ds = generate_dataset(200, 60, 32, 5).unwrap();
    assert!((1600..=3200).contains(&ds.train.len()), "{}", ds.train.len());
    let train: HashSet<String> = ds.patients(Split::Train).into_iter().collect();
    let test: HashSet<String> = ds.patients(Split::Test).into_iter().collect();
    assert_eq!((train.len(), test.len()), (200, 60));
    assert!(train.is_disjoint(&test));
}

#[test]
fn class_frequency_audit() {
    for seed in 0..10 {
        let ds = generate_dataset(200, 1, 32, seed).unwrap();
        let m = manifest(&ds);
        for (class, count) in &m.class_inventory["train"] {
            assert!(count.patients >= 20, "seed {seed}: {class} in {} patients", count.patients);
        }
    }
}

#[test]
fn parallel_and_sequential_generation_agree() {
    let a = generate_dataset_with(Exec::Sequential, 6, 2, 32, 8).unwrap();
    let b = generate_dataset_with(Exec::default(), 6, 2, 32, 8).unwrap();
    assert_eq!(a, b);
}

#[test]
fn subset_by_patients_semantics() {
    let ds = generate_dataset(40, 2, 32, 3).unwrap();
    assert_eq!(subset_by_patients(&ds, 100.0, 1).unwrap(), ds);
    assert!(subset_by_patients(&ds, 0.0, 1).is_err());
    assert!(subset_by_patients(&ds, 100.5, 1).is_err());
    for (pct, want) in [(2.5, 1), (10.0, 4), (25.0, 10), (26.0, 11)] {
        let sub = subset_by_patients(&ds, pct, 1).unwrap();
        assert_eq!(sub.patients(Split::Train).len(), want, "{pct}%");
        assert_eq!(sub.test, ds.test);
    }
}

fn dir_bytes(root: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push((p.strip_prefix(root).unwrap().display().to_string(), std::fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

#[test]
fn dataset_disk_round_trip() {
    let mut ds = generate_dataset(3, 2, 32, 4).unwrap();
    let dir = tempfile::tempdir().unwrap();
    write_dataset(&ds, dir.path()).unwrap();
    assert!(dir.path().join("train/tr0000/000.img.pgm").exists());
    assert!(dir.path().join("test/te0001/000.mask.pgm").exists());
    let loaded = read_dataset(dir.path()).unwrap();
    ds.quantize();
    assert_eq!(loaded, ds);

    let again = tempfile::tempdir().unwrap();
    write_dataset(&generate_dataset(3, 2, 32, 4).unwrap(), again.path()).unwrap();
    assert_eq!(dir_bytes(dir.path()), dir_bytes(again.path()));
}

#[test]
fn missing_dataset_root_names_path() {
    let err = read_dataset(Path::new("/no/such/dataset")).unwrap_err();
    assert!(err.to_string().contains("/no/such/dataset"));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn subsets_nest_and_keep_whole_patients(a in 0.5f64..100.0, b in 0.5f64..100.0, seed in 0u64..1000) {
        let ds = generate_dataset(30, 1, 32, 11).unwrap();
        let (lo, hi) = if a < b { (a, b) } else { (b, a) };
        let small = subset_by_patients(&ds, lo, seed).unwrap();
        let large = subset_by_patients(&ds, hi, seed).unwrap();
        let ps: HashSet<String> = small.patients(Split::Train).into_iter().collect();
        let pl: HashSet<String> = large.patients(Split::Train).into_iter().collect();
        prop_assert!(ps.is_subset(&pl));
        prop_assert_eq!(ps.len(), ((lo * 30.0 / 100.0) - 1e-9).ceil() as usize);
        for p in &ps {
            let full = ds.train.iter().filter(|s| &s.patient == p).count();
            let kept = small.train.iter().filter(|s| &s.patient == p).count();
            prop_assert_eq!(full, kept);
        }
    }
}
