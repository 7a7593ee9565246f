mod common;

use std::collections::HashSet;

use neighborwise::data::{export_pgm, export_pgm_grid, generate_dataset, inject_label_noise, load_dataset, save_dataset, FRAMES_PER_GROUP};
use neighborwise::{Error, Tensor};
use proptest::prelude::*;

#[test]
fn generation_is_deterministic_per_seed() {
    let a = common::tiny_dataset(11, 70);
    let b = common::tiny_dataset(11, 70);
    let c = common::tiny_dataset(12, 70);
    assert_eq!(a, b);
    assert_ne!(a.train[20].image, c.train[20].image);
}

#[test]
fn noise_hits_the_configured_rate_and_never_the_clean_class() {
    let ds = common::tiny_dataset(13, 200);
    assert_eq!(ds.manifest.noisy_count, 50);
    for s in &ds.train {
        assert_eq!(s.is_noisy, s.observed_label != s.clean_label);
    }
    assert!(ds.test.iter().all(|s| !s.is_noisy && s.observed_label == s.clean_label));
}

#[test]
fn splits_have_expected_shapes_and_ranges() {
    let ds = common::tiny_dataset(14, 84);
    assert_eq!((ds.train.len(), ds.test.len(), ds.sequences.len()), (84, 70, 14));
    for s in ds.train.iter().chain(&ds.test) {
        assert_eq!(s.image.shape(), &[1, 16, 16]);
        assert!(s.image.data().iter().all(|v| (0.0..=1.0).contains(v)));
    }
    // Balanced test split.
    assert!(ds.manifest.histograms.test.iter().all(|&n| n == 10));
    for (i, g) in ds.sequences.iter().enumerate() {
        g.validate(i).unwrap();
        assert_eq!(g.frames.len(), FRAMES_PER_GROUP);
        assert_eq!(g.test_frames().len(), 4);
        assert_eq!(ds.train[g.train_index].image, g.peak().image);
        assert_eq!(ds.train[g.train_index].clean_label, g.clean_label);
    }
}

#[test]
fn save_and_load_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let mut ds = common::tiny_dataset(15, 42);
    save_dataset(&mut ds, dir.path()).unwrap();
    assert_eq!(load_dataset(dir.path()).unwrap(), ds);
}

#[test]
fn corrupted_payload_fails_the_checksum() {
    let dir = tempfile::tempdir().unwrap();
    let mut ds = common::tiny_dataset(16, 42);
    save_dataset(&mut ds, dir.path()).unwrap();
    let name = ds.manifest.checksums.keys().next().unwrap().clone();
    let path = dir.path().join(&name);
    let mut bytes = std::fs::read(&path).unwrap();
    let last = bytes.len() - 1;
    bytes[last] ^= 1;
    std::fs::write(&path, bytes).unwrap();
    assert!(matches!(load_dataset(dir.path()), Err(Error::Checksum { .. })));
}

#[test]
fn pgm_files_have_header_and_rounded_pixels() {
    let dir = tempfile::tempdir().unwrap();
    let img = Tensor::new(vec![1, 2, 3], vec![0.0, 0.5, 1.0, 0.25, 0.75, 0.001]).unwrap();
    let path = dir.path().join("a.pgm");
    export_pgm(&img, &path).unwrap();
    let bytes = std::fs::read(&path).unwrap();
    let header = b"P5\n3 2\n255\n";
    assert_eq!(&bytes[..header.len()], header);
    assert_eq!(&bytes[header.len()..], &[0, 128, 255, 64, 191, 0]);

    let rows = vec![vec![img.clone(), img.clone()], vec![img.clone()]];
    let grid = dir.path().join("g.pgm");
    export_pgm_grid(&rows, &grid).unwrap();
    let bytes = std::fs::read(&grid).unwrap();
    assert!(bytes.starts_with(b"P5\n7 5\n255\n"));
}

#[test]
fn invalid_specs_are_rejected() {
    let mut spec = common::tiny_spec(0, 40);
    spec.intensity_range = [0.8, 0.2];
    assert!(matches!(generate_dataset(&spec), Err(Error::InvalidConfig { .. })));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn label_noise_flips_exact_count(n in 1usize..120, rate in 0.0f64..0.9, seed in any::<u64>()) {
        let mut ds = common::tiny_dataset(1, 28);
        let mut split: Vec<_> = (0..n).map(|i| ds.train[i % ds.train.len()].clone()).collect();
        for s in &mut split {
            s.observed_label = s.clean_label;
            s.is_noisy = false;
        }
        let flipped = inject_label_noise(&mut split, 7, rate, seed).unwrap();
        prop_assert_eq!(flipped, (rate * n as f64).round() as usize);
        prop_assert_eq!(split.iter().filter(|s| s.is_noisy).count(), flipped);
        for s in &split {
            prop_assert!(s.observed_label < 7);
            prop_assert_eq!(s.is_noisy, s.observed_label != s.clean_label);
        }
        ds.train.clear();
    }

    #[test]
    fn noise_spreads_over_wrong_classes(seed in any::<u64>()) {
        let mut ds = common::tiny_dataset(2, 28);
        let mut split: Vec<_> = (0..700).map(|i| ds.train[i % 28].clone()).collect();
        for s in &mut split {
            s.observed_label = s.clean_label;
            s.is_noisy = false;
        }
        inject_label_noise(&mut split, 7, 0.5, seed).unwrap();
        let wrong: HashSet<usize> = split.iter().filter(|s| s.is_noisy).map(|s| (s.observed_label + 7 - s.clean_label) % 7).collect();
        prop_assert!(wrong.len() >= 5);
        ds.train.clear();
    }
}
