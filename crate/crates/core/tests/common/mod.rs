#![allow(dead_code)]

pub mod nets;

use neighborwise::bench::ExperimentConfig;
use neighborwise::classifier::{Classifier, ClsConfig, ClsSchedule};
use neighborwise::data::{batch_images, generate_dataset, Dataset, DatasetSpec};
use neighborwise::masked::{masked_step, MaskVector};
use neighborwise::neighbor::{AEConfig, PretrainSchedule, RefineSchedule};
use neighborwise::optim::StepDecay;
use neighborwise::{Graph, Mode, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn tiny_spec(seed: u64, train: usize) -> DatasetSpec {
    DatasetSpec {
        side: 16,
        train_samples: train,
        test_samples: 70,
        sequence_groups: 14,
        identities: 12,
        seed,
        ..Default::default()
    }
}

pub fn tiny_dataset(seed: u64, train: usize) -> Dataset {
    generate_dataset(&tiny_spec(seed, train)).unwrap()
}

pub fn tiny_cls() -> ClsConfig {
    ClsConfig {
        side: 16,
        full_widths: vec![4, 8],
        half_widths: vec![4, 6],
        full_conv5: 8,
        half_conv5: 6,
        full_embedding: 8,
        half_embedding: 6,
        ..Default::default()
    }
}

pub fn tiny_ae() -> AEConfig {
    AEConfig {
        side: 16,
        encoder_widths: vec![4, 6],
        latent: 8,
        alpha: vec![4.0, 1.0, 1.0],
        decoder_res_blocks: vec![1, 1, 1],
        decoder_top_width: 4,
        ..Default::default()
    }
}

pub fn tiny_schedule(epochs: usize) -> ClsSchedule {
    ClsSchedule { epochs, batch_size: 14, lr: StepDecay { initial: 1e-3, factor: 0.1, every: 10 }, ..Default::default() }
}

/// Gradient of the summed loss over `keep`, one backward per sample, each on
/// the same full-batch forward.
pub fn brute_force_grads(cls: &Classifier<f64>, x: &Tensor<f64>, labels: &[usize], keep: &[bool], seed: u64) -> Vec<Vec<f64>> {
    let mut total: Vec<Vec<f64>> = cls.store.params().iter().map(|p| vec![0.0; p.value.len()]).collect();
    for i in (0..labels.len()).filter(|&i| keep[i]) {
        let mut g = Graph::train(seed);
        let xi = g.input(x.clone());
        let nodes = cls.forward(&mut g, xi, Mode::Train).unwrap();
        let per = cls.loss_node(&mut g, &nodes, labels).unwrap();
        let onehot: Vec<f64> = (0..labels.len()).map(|j| if j == i { 1.0 } else { 0.0 }).collect();
        let li = g.weighted_sum(per, &onehot).unwrap();
        let grads = g.backward(li).unwrap();
        for (slot, id) in total.iter_mut().zip(cls.store.ids()) {
            if let Some(gr) = grads.get(cls.store.id(), id) {
                for (s, v) in slot.iter_mut().zip(gr.data()) {
                    *s += v;
                }
            }
        }
    }
    total
}

/// Runs `cases` random masked steps and returns the largest per-coordinate
/// gap between the applied delta and the survivor-only oracle.
pub fn survivor_step_gap(cases: u64) -> f64 {
    let ds = tiny_dataset(3, 120);
    let mut worst = 0.0f64;
    let mut rng = ChaCha8Rng::seed_from_u64(41);
    let (lr, wd) = (0.05, 0.002);
    for case in 0..cases {
        let n = rng.random_range(1..=16);
        let idx: Vec<usize> = (0..n).map(|_| rng.random_range(0..ds.train.len())).collect();
        let labels: Vec<usize> = idx.iter().map(|&i| ds.train[i].observed_label).collect();
        let keep: Vec<bool> = (0..n).map(|_| rng.random_bool(0.6)).collect();
        let x = batch_images::<f64>(&ds.train, &idx);
        let mut cls = Classifier::<f64>::new(tiny_cls(), case).unwrap();
        let before: Vec<Vec<f64>> = cls.store.params().iter().map(|p| p.value.to_f64_vec()).collect();
        let oracle = brute_force_grads(&cls, &x, &labels, &keep, case);
        let divs: Vec<f64> = keep.iter().map(|&k| if k { 0.0 } else { 1.0 }).collect();
        let masks = MaskVector::from_divs(&divs, 0.5);
        let out = masked_step(&mut cls, &x, &labels, &masks, lr, 0.9, wd, case).unwrap();
        assert_eq!(out.skipped, masks.survivors == 0);
        for ((p, w0), g) in cls.store.params().iter().zip(&before).zip(&oracle) {
            for ((&w1, &w0), &g) in p.value.data().iter().zip(w0).zip(g) {
                // First step: velocity starts at zero.
                let expected = if masks.survivors == 0 { 0.0 } else { -lr * (g + wd * w0) };
                worst = worst.max(((w1 - w0) - expected).abs());
            }
        }
    }
    worst
}

/// Three arms, two seeds, tiny models: a full run takes a few seconds.
pub fn tiny_experiment() -> ExperimentConfig {
    let mut c = ExperimentConfig::desk();
    c.dataset = tiny_spec(0, 70);
    c.autoencoder = tiny_ae();
    c.classifier = tiny_cls();
    c.schedule = tiny_schedule(2);
    c.pretrain = PretrainSchedule { epochs: 1, batch_size: 14, ..Default::default() };
    c.refine = RefineSchedule { epochs: 1, batch_size: 14, critic_widths: [4, 4, 4], ..Default::default() };
    c.seeds = vec![0, 1];
    c
}
