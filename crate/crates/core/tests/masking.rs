mod common;

use neighborwise::classifier::{train_baseline, Classifier, ProbabilityVector};
use neighborwise::data::batch_images;
use neighborwise::masked::{
    batch_threshold, fixed_threshold_mask, masked_step, train_masked, DivergenceRecord, MaskVector, MaskingConfig, NeighborMode, ThresholdMode,
};
use neighborwise::neighbor::Autoencoder;
use proptest::prelude::*;

fn records(divs: &[f64]) -> Vec<DivergenceRecord> {
    divs.iter()
        .enumerate()
        .map(|(i, &div)| DivergenceRecord { sample_id: i, div, original: ProbabilityVector::uniform(3), neighbor: ProbabilityVector::uniform(3) })
        .collect()
}

fn masking(threshold: ThresholdMode) -> MaskingConfig {
    MaskingConfig { threshold, sigma: None, head: Default::default(), neighbors: Default::default(), norm: Default::default() }
}

#[test]
fn worked_batch_threshold() {
    let r = records(&[0.1, 0.2, 0.3, 0.6]);
    let t = batch_threshold(&r).unwrap();
    assert!((t - 0.3).abs() < 1e-15);
    let m = fixed_threshold_mask(&r, 0.3);
    assert_eq!(m.masks, vec![true, true, false, false]);
    assert_eq!(m.survivors, 2);
    assert_eq!(fixed_threshold_mask(&r, t).masks, vec![true, true, false, false]);
}

#[test]
fn equal_divergences_mask_everything() {
    let r = records(&[0.25; 5]);
    let m = fixed_threshold_mask(&r, batch_threshold(&r).unwrap());
    assert_eq!(m.survivors, 0);
}

#[test]
fn empty_batch_has_no_threshold() {
    assert!(batch_threshold(&[]).is_err());
}

proptest! {
    #[test]
    fn mask_is_strict_indicator(divs in prop::collection::vec(0.0f64..5.0, 1..40), t in 0.0f64..5.0) {
        let m = fixed_threshold_mask(&records(&divs), t);
        for (d, &keep) in divs.iter().zip(&m.masks) {
            prop_assert_eq!(keep, *d < t);
        }
        prop_assert_eq!(m.survivors, m.masks.iter().filter(|&&k| k).count());
    }

    #[test]
    fn boundary_equality_masks_out(divs in prop::collection::vec(0.0f64..5.0, 1..40), pick in any::<prop::sample::Index>()) {
        let t = divs[pick.index(divs.len())];
        let m = fixed_threshold_mask(&records(&divs), t);
        for (d, &keep) in divs.iter().zip(&m.masks) {
            if *d == t {
                prop_assert!(!keep);
            }
        }
    }

    #[test]
    fn lower_threshold_never_adds_survivors(divs in prop::collection::vec(0.0f64..5.0, 1..40), a in 0.0f64..5.0, b in 0.0f64..5.0) {
        let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
        let r = records(&divs);
        prop_assert!(fixed_threshold_mask(&r, lo).survivors <= fixed_threshold_mask(&r, hi).survivors);
    }

    #[test]
    fn batch_threshold_is_the_mean(divs in prop::collection::vec(0.0f64..5.0, 1..40)) {
        let mean = divs.iter().sum::<f64>() / divs.len() as f64;
        prop_assert!((batch_threshold(&records(&divs)).unwrap() - mean).abs() <= 1e-12);
    }
}

#[test]
fn masked_step_matches_survivor_oracle() {
    let gap = common::survivor_step_gap(100);
    assert!(gap <= 1e-12, "{gap}");
}

#[test]
fn all_masked_step_changes_nothing() {
    let ds = common::tiny_dataset(4, 60);
    let idx: Vec<usize> = (0..14).collect();
    let labels: Vec<usize> = idx.iter().map(|&i| ds.train[i].observed_label).collect();
    let mut cls = Classifier::<f64>::new(common::tiny_cls(), 1).unwrap();
    let before = cls.store.clone();
    let out = masked_step(&mut cls, &batch_images(&ds.train, &idx), &labels, &MaskVector::from_divs(&[1.0; 14], 0.5), 0.1, 0.9, 0.01, 0).unwrap();
    assert!(out.skipped);
    assert!(cls.store.values_equal(&before));
    for (a, b) in cls.store.buffers().iter().zip(before.buffers()) {
        assert_eq!(a.value, b.value);
    }
}

#[test]
fn enormous_threshold_reduces_to_baseline() {
    let ds = common::tiny_dataset(5, 200);
    let sched = common::tiny_schedule(2);
    let ae = Autoencoder::<f64>::new(common::tiny_ae(), 2).unwrap();
    let mut base = Classifier::<f64>::new(common::tiny_cls(), 9).unwrap();
    train_baseline(&mut base, &ds.train, &sched, 11).unwrap();
    let mut masked = Classifier::<f64>::new(common::tiny_cls(), 9).unwrap();
    let log = train_masked(&mut masked, &ds.train, &ae, &sched, &masking(ThresholdMode::Fixed { t: 1e9 }), 0.1, 11).unwrap();
    assert!(log.iterations.iter().all(|r| r.mask == 1));
    for (a, b) in base.store.params().iter().zip(masked.store.params()) {
        let (a, b) = (a.value.to_f64_vec(), b.value.to_f64_vec());
        assert!(a.iter().zip(&b).all(|(x, y)| x.to_bits() == y.to_bits()));
    }
    for (a, b) in base.store.buffers().iter().zip(masked.store.buffers()) {
        assert_eq!(a.value, b.value);
    }
}

#[test]
fn masked_training_leaves_autoencoder_untouched() {
    let ds = common::tiny_dataset(6, 84);
    let ae = Autoencoder::<f64>::new(common::tiny_ae(), 3).unwrap();
    let before = ae.store.clone();
    let mut cls = Classifier::<f64>::new(common::tiny_cls(), 4).unwrap();
    train_masked(&mut cls, &ds.train, &ae, &common::tiny_schedule(1), &masking(ThresholdMode::Batch), 0.1, 5).unwrap();
    assert!(ae.store.values_equal(&before));
    assert!(ae.store.params().iter().all(|p| p.grad.data().iter().all(|&g| g == 0.0)));
}

#[test]
fn batch_masks_are_recomputed_each_iteration() {
    let ds = common::tiny_dataset(7, 140);
    let ae = Autoencoder::<f64>::new(common::tiny_ae(), 3).unwrap();
    let mut cls = Classifier::<f64>::new(common::tiny_cls(), 4).unwrap();
    let log = train_masked(&mut cls, &ds.train, &ae, &common::tiny_schedule(3), &masking(ThresholdMode::Batch), 0.1, 5).unwrap();
    let iters = log.iterations.iter().map(|r| r.iteration).max().unwrap() + 1;
    assert_eq!(iters, 3 * log.iterations_per_epoch);
    assert!(log.mask_transitions() > 0);
    for it in 0..iters {
        let rows: Vec<_> = log.iterations.iter().filter(|r| r.iteration == it).collect();
        let mean = rows.iter().map(|r| r.div).sum::<f64>() / rows.len() as f64;
        for r in &rows {
            assert!((r.threshold - mean).abs() < 1e-12);
            assert_eq!(r.mask == 1, r.div < r.threshold);
        }
    }
}

#[test]
fn calibrated_threshold_is_fixed_after_warmup() {
    let ds = common::tiny_dataset(8, 140);
    let ae = Autoencoder::<f64>::new(common::tiny_ae(), 3).unwrap();
    let mut cls = Classifier::<f64>::new(common::tiny_cls(), 4).unwrap();
    let cfg = masking(ThresholdMode::Calibrated { percentile: 60.0, warmup_epochs: 1 });
    let log = train_masked(&mut cls, &ds.train, &ae, &common::tiny_schedule(3), &cfg, 0.1, 5).unwrap();
    let t = log.calibrated_threshold.expect("threshold after warm-up");
    let per = log.iterations_per_epoch;
    assert!(log.iterations.iter().filter(|r| r.iteration < per).all(|r| r.mask == 1));
    assert!(log.iterations.iter().filter(|r| r.iteration >= per).all(|r| r.threshold == t && (r.mask == 1) == (r.div < t)));
}

#[test]
fn cached_neighbors_repeat_divergence_inputs() {
    let ds = common::tiny_dataset(9, 84);
    let ae = Autoencoder::<f64>::new(common::tiny_ae(), 3).unwrap();
    let mut cfg = masking(ThresholdMode::Fixed { t: 1e9 });
    cfg.neighbors = NeighborMode::Cached;
    let sched = common::tiny_schedule(1);
    let mut a = Classifier::<f64>::new(common::tiny_cls(), 4).unwrap();
    let la = train_masked(&mut a, &ds.train, &ae, &sched, &cfg, 0.1, 5).unwrap();
    let mut b = Classifier::<f64>::new(common::tiny_cls(), 4).unwrap();
    let lb = train_masked(&mut b, &ds.train, &ae, &sched, &cfg, 0.1, 5).unwrap();
    assert_eq!(la.iterations, lb.iterations);
}
