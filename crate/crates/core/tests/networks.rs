mod common;

use common::{patch_span, patch_support};
use hemogan::nn::{
    argmax_classes, build_classifier, build_discriminator, build_generator, build_segmenter, load_checkpoint,
    one_hot, read_checkpoint, save_checkpoint, write_checkpoint, CheckpointError, ForwardCtx, Mode, Network,
    NetworkSpec, NUM_CLASSES,
};
use hemogan::rng::seeded;
use hemogan::tensor::{Tape, Tensor};
use hemogan::Error;
use rand::Rng;

fn random_masks(n: usize, size: usize, seed: u64) -> Vec<u8> {
    let mut r = seeded(seed);
    (0..n * size * size).map(|_| r.random_range(0..NUM_CLASSES as u8)).collect()
}

#[test]
fn generator_preserves_spatial_shape() {
    let gen = build_generator(NetworkSpec::generator(64, 16), 1).unwrap();
    let x = one_hot(&random_masks(2, 64, 1), 2, 64);
    let y = gen.infer(&x, Mode::Train, &mut seeded(2)).unwrap();
    assert_eq!(y.shape(), &[2, 1, 64, 64]);
    assert!(y.data().iter().all(|v| (-1.0..=1.0).contains(v)));
}

#[test]
fn generator_symmetric_for_all_sizes() {
    for size in [4, 8, 16, 32] {
        let gen = build_generator(NetworkSpec::generator(size, 2), 3).unwrap();
        let x = one_hot(&random_masks(2, size, size as u64), 2, size);
        let y = gen.infer(&x, Mode::Train, &mut seeded(4)).unwrap();
        assert_eq!(y.shape(), &[2, 1, size, size]);
    }
}

#[test]
fn generator_depth_and_widths() {
    let spec = NetworkSpec::generator(256, 64);
    assert_eq!(spec.depth(), 7);
    let gen = build_generator(NetworkSpec::generator(64, 16), 0).unwrap();
    let widths: Vec<usize> = (0..5).map(|i| gen.params[&format!("enc{i}.w")].shape()[0]).collect();
    assert_eq!(widths, vec![16, 32, 64, 128, 128]);
}

#[test]
fn generator_skips_are_live() {
    let gen = build_generator(NetworkSpec::generator(32, 4), 5).unwrap();
    let x = one_hot(&random_masks(2, 32, 6), 2, 32);
    let run = |skip: Option<usize>| {
        let mut rng = seeded(9);
        let mut tape = Tape::new();
        let bound = gen.bind(&mut tape, false);
        let xv = tape.constant(x.clone());
        let mut ctx = ForwardCtx::new(Mode::Train, &mut rng);
        ctx.zero_skip = skip;
        let y = gen.forward(&mut tape, &bound, xv, &mut ctx).unwrap();
        tape.value(y).clone()
    };
    let base = run(None);
    assert_eq!(base, run(None));
    for level in 0..gen.spec.depth() - 1 {
        assert_ne!(base, run(Some(level)), "skip at level {level} has no effect");
    }
}

#[test]
fn builds_are_seed_deterministic() {
    let a = build_generator(NetworkSpec::generator(32, 4), 11).unwrap();
    let b = build_generator(NetworkSpec::generator(32, 4), 11).unwrap();
    let c = build_generator(NetworkSpec::generator(32, 4), 12).unwrap();
    assert_eq!(a, b);
    assert_ne!(a, c);
}

#[test]
fn init_statistics() {
    let gen = build_generator(NetworkSpec::generator(64, 16), 0).unwrap();
    let w = gen.params["enc3.w"].data();
    let mean = w.iter().sum::<f64>() / w.len() as f64;
    let std = (w.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / w.len() as f64).sqrt();
    assert!(mean.abs() < 1e-3);
    assert!((std - 0.02).abs() < 1e-3, "std {std}");
    assert!(gen.params["enc3.bn.g"].data().iter().all(|&v| v == 1.0));
    assert!(gen.params["enc0.bias"].data().iter().all(|&v| v == 0.0));
}

#[test]
fn rejects_bad_specs() {
    assert!(matches!(build_generator(NetworkSpec::generator(48, 8), 0), Err(Error::InvalidSpec(_))));
    assert!(matches!(build_generator(NetworkSpec::discriminator(64, 8), 0), Err(Error::InvalidSpec(_))));
    assert!(matches!(build_discriminator(NetworkSpec::discriminator(16, 8), 0), Err(Error::InvalidSpec(_))));
    let mut spec = NetworkSpec::segmenter(64, 8);
    spec.base_filters = 0;
    assert!(build_segmenter(spec, 0).is_err());
}

#[test]
fn forward_rejects_wrong_input_shape() {
    let seg = build_segmenter(NetworkSpec::segmenter(32, 4), 0).unwrap();
    let err = seg.infer(&Tensor::zeros(&[1, 1, 16, 16]), Mode::Eval, &mut seeded(0)).unwrap_err();
    assert!(matches!(err, Error::InvalidInput(_)));
}

#[test]
fn discriminator_grid_at_64() {
    let disc = build_discriminator(NetworkSpec::discriminator(64, 4), 0).unwrap();
    let x = Tensor::zeros(&[3, NUM_CLASSES + 1, 64, 64]);
    let y = disc.infer(&x, Mode::Train, &mut seeded(0)).unwrap();
    assert_eq!(y.shape(), &[3, 1, 6, 6]);
}

#[test]
fn discriminator_grid_at_256() {
    let disc = build_discriminator(NetworkSpec::discriminator(256, 2), 0).unwrap();
    let x = Tensor::zeros(&[1, NUM_CLASSES + 1, 256, 256]);
    let y = disc.infer(&x, Mode::Eval, &mut seeded(0)).unwrap();
    assert_eq!(y.shape(), &[1, 1, 30, 30]);
}

#[test]
fn discriminator_patch_locality() {
    let disc = build_discriminator(NetworkSpec::discriminator(256, 2), 3).unwrap();
    let units = [(3, 3), (12, 20), (26, 26), (0, 0), (29, 15)];
    let readouts: Vec<Tensor> = units
        .iter()
        .map(|&(i, j)| {
            let mut r = Tensor::zeros(&[1, 1, 30, 30]);
            r.data_mut()[i * 30 + j] = 1.0;
            r
        })
        .collect();
    let support = patch_support(&disc, &readouts, 1);
    for (&(i, j), s) in units.iter().zip(&support) {
        let (r0, r1, c0, c1) = s.expect("nonzero support");
        assert_eq!((r0, r1), patch_span(i, 256), "unit ({i},{j})");
        assert_eq!((c0, c1), patch_span(j, 256), "unit ({i},{j})");
        if (3..=26).contains(&i) && (3..=26).contains(&j) {
            assert_eq!((r1 - r0 + 1, c1 - c0 + 1), (70, 70));
        }
    }
}

#[test]
fn segmenter_emits_class_logits() {
    let seg = build_segmenter(NetworkSpec::segmenter(32, 4), 2).unwrap();
    let x = Tensor::randn(&[2, 1, 32, 32], 1.0, &mut seeded(1));
    for mode in [Mode::Train, Mode::Eval] {
        let y = seg.infer(&x, mode, &mut seeded(0)).unwrap();
        assert_eq!(y.shape(), &[2, 6, 32, 32]);
        let m = argmax_classes(&y);
        assert_eq!(m.len(), 2 * 32 * 32);
        assert!(m.iter().all(|&c| (c as usize) < NUM_CLASSES));
    }
}

#[test]
fn classifier_emits_one_logit() {
    let clf = build_classifier(NetworkSpec::classifier(64, 4), 0).unwrap();
    let y = clf.infer(&Tensor::zeros(&[5, 1, 64, 64]), Mode::Train, &mut seeded(0)).unwrap();
    assert_eq!(y.shape(), &[5, 1]);
}

#[test]
fn running_stats_track_batches() {
    let mut seg = build_segmenter(NetworkSpec::segmenter(16, 2), 0).unwrap();
    let x = Tensor::randn(&[2, 1, 16, 16], 2.0, &mut seeded(3)).map(|v| v + 5.0);
    let mut rng = seeded(0);
    let mut tape = Tape::new();
    let bound = seg.bind(&mut tape, false);
    let xv = tape.constant(x);
    let mut ctx = ForwardCtx::new(Mode::Train, &mut rng);
    seg.forward(&mut tape, &bound, xv, &mut ctx).unwrap();
    let stats = std::mem::take(&mut ctx.stats);
    assert_eq!(stats.len(), 5);
    let stem = &stats.iter().find(|(n, _)| n == "stem.bn").unwrap().1;
    seg.update_running_stats(&stats);
    let got = seg.running["stem.bn.mean"].data()[0];
    assert!((got - 0.1 * stem.mean[0]).abs() < 1e-15);
    let var = seg.running["stem.bn.var"].data()[0];
    assert!((var - (0.9 + 0.1 * stem.var[0])).abs() < 1e-15);
}

fn all_kinds() -> Vec<Network> {
    vec![
        build_generator(NetworkSpec::generator(32, 4), 1).unwrap(),
        build_discriminator(NetworkSpec::discriminator(32, 4), 2).unwrap(),
        build_segmenter(NetworkSpec::segmenter(32, 4), 3).unwrap(),
        build_classifier(NetworkSpec::classifier(32, 4), 4).unwrap(),
    ]
}

#[test]
fn checkpoint_round_trip_is_forward_equal() {
    let dir = tempfile::tempdir().unwrap();
    for (i, net) in all_kinds().into_iter().enumerate() {
        let path = dir.path().join(format!("net{i}.ckpt"));
        save_checkpoint(&net, &path).unwrap();
        let loaded = load_checkpoint(&path).unwrap();
        let mut quantized = net.clone();
        quantized.quantize_f32();
        assert_eq!(loaded, quantized);

        let input = Tensor::randn(&[2, net.spec.in_channels, 32, 32], 1.0, &mut seeded(i as u64));
        for mode in [Mode::Train, Mode::Eval] {
            let a = quantized.infer(&input, mode, &mut seeded(5)).unwrap();
            let b = loaded.infer(&input, mode, &mut seeded(5)).unwrap();
            assert_eq!(a, b);
        }
    }
}

#[test]
fn checkpoint_rejects_corruption() {
    let net = build_segmenter(NetworkSpec::segmenter(16, 2), 0).unwrap();
    let mut bytes = Vec::new();
    write_checkpoint(&net, &mut bytes).unwrap();

    let mut bad = bytes.clone();
    bad[0] ^= 0xff;
    assert!(matches!(read_checkpoint(&mut bad.as_slice()), Err(CheckpointError::BadMagic(_))));

    let mut bad = bytes.clone();
    bad[4] = 9;
    assert_eq!(read_checkpoint(&mut bad.as_slice()), Err(CheckpointError::UnsupportedVersion(9)));

    let mut bad = bytes.clone();
    bad[8] = 42;
    assert_eq!(read_checkpoint(&mut bad.as_slice()), Err(CheckpointError::UnknownKind(42)));

    let cut = &bytes[..bytes.len() - 3];
    assert_eq!(read_checkpoint(&mut &cut[..]), Err(CheckpointError::Truncated));

    // First record name starts at byte 15; "stem.w" becomes "xtem.w".
    let mut bad = bytes.clone();
    assert_eq!(&bad[15..21], b"stem.w");
    bad[15] = b'x';
    assert_eq!(read_checkpoint(&mut bad.as_slice()), Err(CheckpointError::UnknownParameter("xtem.w".into())));
}

#[test]
fn checkpoint_reports_missing_parameter() {
    let net = build_segmenter(NetworkSpec::segmenter(16, 2), 0).unwrap();
    let mut trimmed = net.clone();
    trimmed.params.shift_remove("ctx.w");
    let mut bytes = Vec::new();
    write_checkpoint(&trimmed, &mut bytes).unwrap();
    assert_eq!(read_checkpoint(&mut bytes.as_slice()), Err(CheckpointError::MissingParameter("ctx.w".into())));
}

#[test]
fn desk_generator_checkpoint_is_small() {
    let gen = build_generator(NetworkSpec::generator(64, 16), 0).unwrap();
    let mut bytes = Vec::new();
    write_checkpoint(&gen, &mut bytes).unwrap();
    let params = gen.param_count() + gen.running.values().map(Tensor::len).sum::<usize>();
    assert!(bytes.len() >= 4 * params);
    assert!(bytes.len() < 10 * 1024 * 1024, "{} bytes", bytes.len());
}

#[test]
fn load_reports_missing_file() {
    let err = load_checkpoint("/nonexistent/dir/net.ckpt").unwrap_err();
    assert!(err.to_string().contains("/nonexistent/dir/net.ckpt"));
}
