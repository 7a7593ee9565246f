//! Acceptance run: one PASS/FAIL line per criterion.
//!
//! The deterministic criteria (1-6, 10, 11) fail the run when they fail.
//! The empirical benchmark criteria (7-9) are reported but only fail the run
//! with `NW_ACCEPT_STRICT=1`. `NW_ACCEPT_SKIP_BENCH=1` skips them.

mod common;

use std::collections::BTreeSet;
use std::path::Path;
use std::time::{Duration, Instant};

use common::nets::{check_net, ALL_KINDS};
use neighborwise::bench::{run_experiment, train_neighbor_model, ExperimentConfig, MetricsReport, BASELINE_ARM, BATCH_ARM, FIXED_ARM};
use neighborwise::classifier::{train_baseline, Classifier, ProbabilityVector};
use neighborwise::data::{batch_images, generate_dataset};
use neighborwise::masked::{batch_threshold, fixed_threshold_mask, sym_divergence, train_masked, DivergenceRecord, MaskingConfig, ThresholdMode};
use neighborwise::neighbor::Autoencoder;
use neighborwise::seed;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp1};

struct Verdict {
    pass: bool,
    detail: String,
}

fn verdict(pass: bool, detail: impl Into<String>) -> Verdict {
    Verdict { pass, detail: detail.into() }
}

struct Run {
    hard_failures: Vec<usize>,
    soft_failures: Vec<usize>,
}

impl Run {
    fn check(&mut self, n: usize, name: &str, limit: Option<Duration>, soft: bool, f: impl FnOnce() -> Verdict) {
        let start = Instant::now();
        let v = f();
        let took = start.elapsed();
        let in_time = limit.is_none_or(|l| took <= l);
        let pass = v.pass && in_time;
        let timing = match limit {
            Some(l) => format!("{:.1}s of {}s", took.as_secs_f64(), l.as_secs()),
            None => format!("{:.1}s", took.as_secs_f64()),
        };
        println!("criterion {n:>2} {}: {name}: {} [{timing}]", if pass { "PASS" } else { "FAIL" }, v.detail);
        if !pass {
            if soft { &mut self.soft_failures } else { &mut self.hard_failures }.push(n);
        }
    }
}

fn records(divs: &[f64]) -> Vec<DivergenceRecord> {
    divs.iter()
        .enumerate()
        .map(|(i, &div)| DivergenceRecord { sample_id: i, div, original: ProbabilityVector::uniform(2), neighbor: ProbabilityVector::uniform(2) })
        .collect()
}

fn gradients() -> Verdict {
    let mut covered = BTreeSet::new();
    let mut worst = 0.0f64;
    let nets = 24;
    for id in 0..nets {
        let (report, kinds) = check_net(id);
        worst = worst.max(report.max_error());
        covered.extend(kinds);
    }
    let missing: Vec<_> = ALL_KINDS.iter().filter(|k| !covered.contains(*k)).collect();
    verdict(worst <= 1e-4 && missing.is_empty(), format!("{nets} nets, max relative error {worst:.2e}, missing kinds {missing:?}"))
}

fn divergence() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let simplex = |k: usize, rng: &mut ChaCha8Rng| {
        let e: Vec<f64> = (0..k).map(|_| Exp1.sample(rng)).collect();
        let s: f64 = e.iter().sum();
        ProbabilityVector::new(e.iter().map(|v| v / s).collect()).unwrap()
    };
    let (mut asym, mut min, mut self_max) = (0usize, f64::INFINITY, 0.0f64);
    for _ in 0..1000 {
        let k = rng.random_range(2..=10);
        let (p, q) = (simplex(k, &mut rng), simplex(k, &mut rng));
        let pq = sym_divergence(&p, &q).unwrap();
        asym += usize::from(pq.to_bits() != sym_divergence(&q, &p).unwrap().to_bits());
        min = min.min(pq);
        self_max = self_max.max(sym_divergence(&p, &p).unwrap().abs());
    }
    let worked = sym_divergence(&ProbabilityVector::new(vec![0.5, 0.5]).unwrap(), &ProbabilityVector::new(vec![0.9, 0.1]).unwrap()).unwrap();
    verdict(
        asym == 0 && min >= -1e-9 && self_max == 0.0 && (worked - 0.439445).abs() <= 1e-6,
        format!("asymmetric pairs {asym}, min {min:.3e}, max self-divergence {self_max:e}, worked pair {worked:.6}"),
    )
}

fn thresholds() -> Verdict {
    let r = records(&[0.1, 0.2, 0.3, 0.6]);
    let t = batch_threshold(&r).unwrap();
    let m = fixed_threshold_mask(&r, t);
    let worked = t == 0.3 && m.masks == [true, true, false, false];
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut bad = 0;
    for _ in 0..2000 {
        let n = rng.random_range(1..=32);
        // Coarse grid so exact ties with the threshold occur.
        let divs: Vec<f64> = (0..n).map(|_| rng.random_range(0..8) as f64 / 4.0).collect();
        let t = if rng.random_bool(0.5) { divs[rng.random_range(0..n)] } else { batch_threshold(&records(&divs)).unwrap() };
        let m = fixed_threshold_mask(&records(&divs), t);
        bad += usize::from(m.masks.iter().zip(&divs).any(|(&k, &d)| k != (d < t)) || m.survivors != m.masks.iter().filter(|&&k| k).count());
    }
    verdict(worked && bad == 0, format!("worked batch T={t} masks {:?}, {bad} of 2000 random batches disagree", m.masks))
}

fn reduction() -> Verdict {
    let ds = common::tiny_dataset(5, 200);
    let sched = common::tiny_schedule(2);
    let ae = Autoencoder::<f64>::new(common::tiny_ae(), 2).unwrap();
    let mut base = Classifier::<f64>::new(common::tiny_cls(), 9).unwrap();
    train_baseline(&mut base, &ds.train, &sched, 11).unwrap();
    let mut masked = Classifier::<f64>::new(common::tiny_cls(), 9).unwrap();
    let cfg = MaskingConfig { threshold: ThresholdMode::Fixed { t: 1e9 }, sigma: None, head: Default::default(), neighbors: Default::default(), norm: Default::default() };
    train_masked(&mut masked, &ds.train, &ae, &sched, &cfg, 0.1, 11).unwrap();
    let mut differing = 0;
    for (a, b) in base.store.params().iter().zip(masked.store.params()) {
        differing += a.value.to_f64_vec().iter().zip(b.value.to_f64_vec()).filter(|(x, y)| x.to_bits() != y.to_bits()).count();
    }
    let buffers_equal = base.store.buffers().iter().zip(masked.store.buffers()).all(|(a, b)| a.value == b.value);
    verdict(differing == 0 && buffers_equal, format!("{differing} differing parameter values, buffers equal: {buffers_equal}"))
}

fn neighbors() -> Verdict {
    let ds = common::tiny_dataset(2, 40);
    let mut ae = Autoencoder::<f64>::new(common::tiny_ae(), 8).unwrap();
    let sched = neighborwise::neighbor::PretrainSchedule { epochs: 1, batch_size: 8, ..Default::default() };
    neighborwise::neighbor::pretrain_ae(&mut ae, &ds.train, &sched, 3).unwrap();
    let x = batch_images::<f64>(&ds.train, &(0..8).collect::<Vec<_>>());
    let rec = ae.reconstruct(&x).unwrap();
    let zero = ae.synthesize_with(&x, 0.0, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
    let exact = rec.data().iter().zip(zero.data()).all(|(a, b)| a.to_bits() == b.to_bits());
    let dist: Vec<f64> = [0.05, 0.1, 0.2, 0.4]
        .iter()
        .map(|&sigma| {
            let mut rng = ChaCha8Rng::seed_from_u64(5);
            (0..32)
                .map(|_| {
                    let nb = ae.synthesize_with(&x, sigma, &mut rng).unwrap();
                    nb.data().iter().zip(rec.data()).map(|(a, b)| (a - b) * (a - b)).sum::<f64>()
                })
                .sum::<f64>()
                / 32.0
        })
        .collect();
    let monotone = dist.windows(2).all(|w| w[1] >= w[0]);
    verdict(exact && monotone, format!("sigma 0 bit-exact: {exact}, mean squared distances {dist:.4?}"))
}

fn mean<I: IntoIterator<Item = f64>>(xs: I) -> Option<f64> {
    let v: Vec<f64> = xs.into_iter().collect();
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

fn arm<'a>(reports: &'a [MetricsReport], label: &'a str) -> impl Iterator<Item = &'a MetricsReport> {
    reports.iter().filter(move |r| r.arm == label)
}

fn headline(reports: &[MetricsReport]) -> Verdict {
    let acc = |label| mean(arm(reports, label).filter_map(|r| r.accuracy)).unwrap_or(f64::NAN);
    let (base, t, bt) = (acc(BASELINE_ARM), acc(FIXED_ARM), acc(BATCH_ARM));
    verdict(
        bt - base >= 0.02 && t - base >= 0.01,
        format!(
            "mean accuracy baseline {:.2}%, T {:.2}% ({:+.2} pp), BT {:.2}% ({:+.2} pp); BT >= T: {}",
            100.0 * base,
            100.0 * t,
            100.0 * (t - base),
            100.0 * bt,
            100.0 * (bt - base),
            bt >= t
        ),
    )
}

fn lift(reports: &[MetricsReport]) -> Verdict {
    let audits: Vec<_> = arm(reports, BATCH_ARM).filter_map(|r| r.mask_audit.as_ref()?.epochs.last().cloned()).collect();
    let real = mean(audits.iter().filter_map(|e| e.lift)).unwrap_or(f64::NAN);
    let shuffled = mean(audits.iter().filter_map(|e| e.shuffled_lift)).unwrap_or(f64::NAN);
    let noisy = mean(audits.iter().filter_map(|e| e.masked_noisy)).unwrap_or(f64::NAN);
    let clean = mean(audits.iter().filter_map(|e| e.masked_clean)).unwrap_or(f64::NAN);
    verdict(
        real >= 1.5 && (0.8..=1.2).contains(&shuffled),
        format!("final-epoch lift {real:.3} (masked noisy {noisy:.3}, masked clean {clean:.3}), shuffled control {shuffled:.3}, {} seeds", audits.len()),
    )
}

fn failure_cases(reports: &[MetricsReport]) -> Verdict {
    let fc = |label| mean(arm(reports, label).filter_map(|r| r.sequences.as_ref().map(|s| s.fc as f64))).unwrap_or(f64::NAN);
    let (base, bt) = (fc(BASELINE_ARM), fc(BATCH_ARM));
    let cfc_ok = reports.iter().filter_map(|r| r.sequences.as_ref()).all(|s| s.cfc <= s.fc && s.groups.iter().all(|g| !g.cfc || g.fc));
    verdict(bt < base && cfc_ok, format!("mean FC baseline {base:.1}, BT {bt:.1}; CFC <= FC everywhere: {cfc_ok}"))
}

fn determinism() -> Verdict {
    let c = common::tiny_experiment();
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    run_experiment(&c, a.path()).unwrap();
    run_experiment(&c, b.path()).unwrap();
    let files = report_files(a.path());
    let differing: Vec<_> = files.iter().filter(|n| std::fs::read(a.path().join(n)).ok() != std::fs::read(b.path().join(n)).ok()).collect();
    verdict(differing.is_empty() && files == report_files(b.path()), format!("{} CSV/JSON files compared, differing {differing:?}", files.len()))
}

fn report_files(dir: &Path) -> Vec<String> {
    let mut names: Vec<String> = std::fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().file_name().into_string().unwrap())
        .filter(|n| n.ends_with(".csv") || n.ends_with(".json"))
        .collect();
    names.sort();
    names
}

fn autoencoder() -> Verdict {
    // Default benchmark scale, seed 0, with the unmasked classifier as the
    // perceptual feature extractor.
    let config = ExperimentConfig::desk();
    let ds = generate_dataset(&config.dataset_for(0)).unwrap();
    let mut cls = Classifier::<f64>::new(config.classifier.clone(), seed::derive(0, "classifier-init")).unwrap();
    train_baseline(&mut cls, &ds.train, &config.schedule, 0).unwrap();
    let frozen = cls.store.clone();
    let model = train_neighbor_model(&config, &ds, &cls, 0).unwrap();
    let losses = &model.pretrain.epoch_loss;
    let decreasing = losses.last() < losses.first();
    let refined = model.perceptual_after < model.perceptual_before;
    let clip = config.refine.clip;
    let worst = model.refine.critic_max_abs.iter().cloned().fold(0.0, f64::max);
    let clipped = !model.refine.critic_max_abs.is_empty() && worst <= clip;
    verdict(
        decreasing && refined && clipped && cls.store.values_equal(&frozen),
        format!(
            "Loss_AE {:.4} -> {:.4}, held-out perceptual {:.4} -> {:.4}, max |critic weight| {worst:.4} over {} critic steps (clip {clip})",
            losses.first().unwrap(),
            losses.last().unwrap(),
            model.perceptual_before,
            model.perceptual_after,
            model.refine.critic_max_abs.len()
        ),
    )
}

fn flag(name: &str) -> bool {
    std::env::var(name).is_ok_and(|v| v == "1")
}

fn main() {
    let strict = flag("NW_ACCEPT_STRICT");
    let mut run = Run { hard_failures: Vec::new(), soft_failures: Vec::new() };
    let secs = Duration::from_secs;

    run.check(1, "gradient fidelity", Some(secs(120)), false, gradients);
    run.check(2, "divergence oracle", Some(secs(10)), false, divergence);
    run.check(3, "mask and threshold semantics", Some(secs(5)), false, thresholds);
    run.check(4, "subset equivalence", Some(secs(120)), false, || {
        let gap = common::survivor_step_gap(100);
        verdict(gap <= 1e-12, format!("100 cases, max |delta - oracle| {gap:.2e}"))
    });
    run.check(5, "reduction to baseline", Some(secs(300)), false, reduction);
    run.check(6, "neighbor degeneracy", Some(secs(180)), false, neighbors);

    if flag("NW_ACCEPT_SKIP_BENCH") {
        for (n, name) in [(7, "headline direction"), (8, "noise-detection lift"), (9, "FC/CFC direction")] {
            println!("criterion {n:>2} SKIP: {name}: NW_ACCEPT_SKIP_BENCH is set");
        }
    } else {
        let dir = tempfile::tempdir().unwrap();
        let config = ExperimentConfig::desk();
        let start = Instant::now();
        let reports = run_experiment(&config, dir.path());
        let took = start.elapsed();
        match reports {
            Ok(reports) => {
                // The three criteria share one benchmark run; its wall time
                // counts against criterion 7.
                run.check(7, "headline direction", None, !strict, || {
                    let v = headline(&reports);
                    let in_time = took <= secs(25 * 60);
                    verdict(v.pass && in_time, format!("{}; benchmark {:.1} min of 25", v.detail, took.as_secs_f64() / 60.0))
                });
                run.check(8, "noise-detection lift", None, !strict, || lift(&reports));
                run.check(9, "FC/CFC direction", None, !strict, || failure_cases(&reports));
            }
            Err(e) => {
                for n in 7..=9 {
                    run.check(n, "benchmark", None, !strict, || verdict(false, format!("benchmark failed: {e}")));
                }
            }
        }
    }

    run.check(10, "determinism", None, false, determinism);
    run.check(11, "autoencoder training sanity", None, false, autoencoder);

    if !run.soft_failures.is_empty() {
        println!("benchmark criteria {:?} failed; reported only (set NW_ACCEPT_STRICT=1 to enforce)", run.soft_failures);
    }
    if !run.hard_failures.is_empty() {
        println!("failed criteria: {:?}", run.hard_failures);
        std::process::exit(1);
    }
}
