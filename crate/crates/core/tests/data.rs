use forma_core::data::augment::{hflip, vflip};
use forma_core::data::perturb::{gaussian_blur, jpeg_compress, resample};
use forma_core::data::{
    augment, load_image, load_mask, perturb, read_manifest, save_image, save_mask, synth_set,
    synth_tamper, write_manifest, AugmentConfig, ManifestEntry, PerturbKind, Perturbation,
    TamperKind,
};
use forma_core::{Error, Tensor};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[test]
fn same_seed_same_sample() {
    for kind in [TamperKind::Splice, TamperKind::CopyMove, TamperKind::Authentic] {
        assert_eq!(synth_tamper(42, 64, 48, kind).unwrap(), synth_tamper(42, 64, 48, kind).unwrap());
    }
    assert_ne!(
        synth_tamper(1, 64, 64, TamperKind::Splice).unwrap().image,
        synth_tamper(2, 64, 64, TamperKind::Splice).unwrap().image
    );
}

#[test]
fn authentic_mask_is_empty() {
    for seed in 0..20 {
        let s = synth_tamper(seed, 32, 32, TamperKind::Authentic).unwrap();
        assert!(s.mask.data().iter().all(|&v| v == 0.0));
    }
}

#[test]
fn splice_area_stays_in_range_over_a_thousand_seeds() {
    for seed in 0..1000 {
        let s = synth_tamper(seed, 64, 64, TamperKind::Splice).unwrap();
        let frac = s.mask.sum() / 4096.0;
        assert!((0.01..=0.30).contains(&frac), "seed {seed}: {frac}");
    }
}

#[test]
fn copy_move_area_stays_in_range() {
    for seed in 0..200 {
        let s = synth_tamper(seed, 64, 64, TamperKind::CopyMove).unwrap();
        let frac = s.tampered_fraction();
        assert!((0.01..=0.30).contains(&frac), "seed {seed}: {frac}");
    }
}

#[test]
fn images_are_in_unit_range_and_masks_are_binary() {
    for s in synth_set(9, 12, 32, 64, &TamperKind::TAMPERED).unwrap() {
        assert_eq!(s.image.shape(), &[3, 32, 64]);
        assert_eq!(s.mask.shape(), &[32, 64]);
        assert!(s.image.data().iter().all(|v| (0.0..=1.0).contains(v)));
        assert!(s.mask.data().iter().all(|&v| v == 0.0 || v == 1.0));
    }
}

#[test]
fn tiny_canvas_is_rejected() {
    assert!(synth_tamper(0, 8, 64, TamperKind::Splice).is_err());
}

fn sample() -> forma_core::data::Sample {
    synth_tamper(5, 32, 40, TamperKind::Splice).unwrap()
}

#[test]
fn zero_probabilities_leave_the_sample_alone() {
    let s = sample();
    for seed in 0..10 {
        assert_eq!(augment(&s, seed, &AugmentConfig::disabled()).unwrap(), s);
    }
}

#[test]
fn augment_is_deterministic_in_its_seed() {
    let s = sample();
    let cfg = AugmentConfig::default();
    assert_eq!(augment(&s, 77, &cfg).unwrap(), augment(&s, 77, &cfg).unwrap());
}

#[test]
fn forced_flips_move_image_and_mask_together() {
    let s = sample();
    let cfg = AugmentConfig {
        p_hflip: 1.0,
        p_vflip: 1.0,
        ..AugmentConfig::disabled()
    };
    let a = augment(&s, 3, &cfg).unwrap();
    let (h, w) = (32, 40);
    for y in 0..h {
        for x in 0..w {
            let (sy, sx) = (h - 1 - y, w - 1 - x);
            assert_eq!(a.mask.at(&[y, x]), s.mask.at(&[sy, sx]));
            for c in 0..3 {
                assert_eq!(a.image.at(&[c, y, x]), s.image.at(&[c, sy, sx]));
            }
        }
    }
}

#[test]
fn photometric_augmentations_keep_the_mask() {
    let s = sample();
    let cfg = AugmentConfig {
        p_blur: 1.0,
        p_jpeg: 1.0,
        p_noise: 1.0,
        ..AugmentConfig::disabled()
    };
    let a = augment(&s, 4, &cfg).unwrap();
    assert_eq!(a.mask, s.mask);
    assert_ne!(a.image, s.image);
    assert!(a.image.data().iter().all(|v| (0.0..=1.0).contains(v)));
}

proptest! {
    #[test]
    fn flips_are_involutions(c in 1usize..4, h in 1usize..7, w in 1usize..7, seed in any::<u64>()) {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        let t = Tensor::uniform(&[c, h, w], 0.0, 1.0, &mut r);
        prop_assert_eq!(hflip(&hflip(&t)), t.clone());
        prop_assert_eq!(vflip(&vflip(&t)), t.clone());
        prop_assert_eq!(hflip(&vflip(&t)), vflip(&hflip(&t)));
    }

    #[test]
    fn perturbations_preserve_shape_and_range(
        kind in 0usize..4,
        u in 0.0f64..1.0,
        h in 8usize..20,
        w in 8usize..20,
        seed in any::<u64>(),
    ) {
        let kind = [
            PerturbKind::JpegQuality,
            PerturbKind::GaussianBlur,
            PerturbKind::GaussianNoise,
            PerturbKind::Resize,
        ][kind];
        let (lo, hi) = kind.range();
        let p = Perturbation::new(kind, lo + u * (hi - lo)).unwrap();
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        let x = Tensor::uniform(&[3, h, w], 0.0, 1.0, &mut r);
        let y = perturb(&x, p, &mut r).unwrap();
        prop_assert_eq!(y.shape(), x.shape());
        prop_assert!(y.data().iter().all(|v| (0.0..=1.0).contains(v)));
    }
}

#[test]
fn quality_hundred_is_near_identity() {
    let s = synth_tamper(11, 64, 64, TamperKind::CopyMove).unwrap();
    let y = jpeg_compress(&s.image, 100.0).unwrap();
    assert!(y.max_abs_diff(&s.image) < 2.0 / 255.0);
}

#[test]
fn lower_quality_loses_more() {
    let s = synth_tamper(12, 64, 64, TamperKind::Splice).unwrap();
    let err = |q| jpeg_compress(&s.image, q).unwrap().max_abs_diff(&s.image);
    assert!(err(30.0) > err(95.0));
}

#[test]
fn identity_strengths_are_identities() {
    let s = sample();
    assert_eq!(gaussian_blur(&s.image, 0.0).unwrap(), s.image);
    assert_eq!(resample(&s.image, 1.0).unwrap(), s.image);
    let mut r = ChaCha8Rng::seed_from_u64(0);
    for kind in [PerturbKind::GaussianBlur, PerturbKind::GaussianNoise, PerturbKind::Resize] {
        let p = Perturbation::new(kind, kind.identity().unwrap()).unwrap();
        assert!(p.is_identity());
        assert_eq!(perturb(&s.image, p, &mut r).unwrap(), s.image, "{kind}");
    }
}

#[test]
fn out_of_range_strengths_are_rejected() {
    for (kind, s) in [
        (PerturbKind::JpegQuality, 20.0),
        (PerturbKind::JpegQuality, 101.0),
        (PerturbKind::GaussianBlur, -0.1),
        (PerturbKind::GaussianNoise, f64::NAN),
        (PerturbKind::Resize, 2.5),
        (PerturbKind::Resize, 0.0),
    ] {
        assert!(matches!(Perturbation::new(kind, s), Err(Error::Domain { .. })), "{kind} {s}");
    }
}

#[test]
fn ppm_round_trip_is_bit_identical() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("x.ppm");
    let img = sample().image.map(|v| (v * 255.0).round() / 255.0);
    save_image(&path, &img).unwrap();
    let back = load_image(&path).unwrap();
    assert_eq!(back, img);
    save_image(&path, &back).unwrap();
    assert_eq!(load_image(&path).unwrap(), back);
}

#[test]
fn mask_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let m = sample().mask;
    for name in ["m.png", "m.pgm"] {
        let p = dir.path().join(name);
        save_mask(&p, &m).unwrap();
        assert_eq!(load_mask(&p).unwrap(), m);
    }
}

#[test]
fn gray_mask_names_the_offending_value() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("g.pgm");
    std::fs::write(&path, b"P5\n3 2\n255\n\x00\xff\x00\x00\x80\x00").unwrap();
    let err = load_mask(&path).unwrap_err();
    assert!(matches!(err, Error::Format { .. }));
    let msg = err.to_string();
    assert!(msg.contains("128") && msg.contains("row 1") && msg.contains("column 1"), "{msg}");
}

#[test]
fn missing_file_names_the_path() {
    let path = std::path::Path::new("/nonexistent/dir/img.png");
    for err in [load_image(path).unwrap_err(), load_mask(path).unwrap_err()] {
        assert!(matches!(err, Error::Io { .. }));
        assert!(err.to_string().contains("/nonexistent/dir/img.png"), "{err}");
    }
}

#[test]
fn manifest_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.jsonl");
    let entries = vec![
        ManifestEntry {
            image_path: dir.path().join("a.png"),
            mask_path: dir.path().join("a_gt.png"),
            dataset_name: "one".into(),
            prob_path: None,
        },
        ManifestEntry {
            image_path: dir.path().join("b.png"),
            mask_path: dir.path().join("b_gt.png"),
            dataset_name: "two".into(),
            prob_path: Some(dir.path().join("b_prob.pgm")),
        },
    ];
    write_manifest(&path, &entries).unwrap();
    assert_eq!(read_manifest(&path).unwrap(), entries);
}
