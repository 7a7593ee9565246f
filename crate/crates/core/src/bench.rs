//! Experiment harness: the three-arm comparison, metrics and report files.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::classifier::{train_baseline, Classifier, ClsConfig, ClsSchedule};
use crate::data::{batch_images, export_pgm_grid, generate_dataset, Dataset, DatasetSpec, SequenceGroup};
use crate::error::{Error, Result};
use crate::masked::{train_masked, MaskingConfig, ThresholdMode, TrainLog};
use crate::neighbor::{
    perceptual_loss, pretrain_ae, refine_ae, AEConfig, Autoencoder, Discriminator, PerceptualExtractor, PretrainLog, PretrainSchedule,
    RefineLog, RefineSchedule,
};
use crate::scalar::Scalar;
use crate::seed;
use crate::tensor::Tensor;

pub const CONFIG_VERSION: u32 = 1;

pub const BASELINE_ARM: &str = "w/o Ours";
pub const FIXED_ARM: &str = "with Ours(T)";
pub const BATCH_ARM: &str = "with Ours(BT)";

/// Batch sizes and learning-rate factors of the batch-size sweep.
pub const SWEEP: [(usize, f64); 4] = [(63, 1.0), (35, 0.5), (14, 0.25), (7, 0.125)];

/// Noise draws per input in the neighbor grid.
pub const GRID_DRAWS: usize = 4;
const GRID_INPUTS: usize = 8;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArmConfig {
    pub label: String,
    /// `None` trains without masking.
    #[serde(default)]
    pub masking: Option<MaskingConfig>,
    /// Overrides the classifier schedule's batch size.
    #[serde(default)]
    pub batch_size: Option<usize>,
    #[serde(default = "one")]
    pub lr_scale: f64,
}

fn one() -> f64 {
    1.0
}

impl ArmConfig {
    pub fn baseline() -> Self {
        Self { label: BASELINE_ARM.into(), masking: None, batch_size: None, lr_scale: 1.0 }
    }

    pub fn masked(label: &str, threshold: ThresholdMode) -> Self {
        let masking = MaskingConfig {
            threshold,
            sigma: None,
            head: Default::default(),
            neighbors: Default::default(),
            norm: Default::default(),
        };
        Self { label: label.into(), masking: Some(masking), batch_size: None, lr_scale: 1.0 }
    }

    pub fn schedule(&self, base: &ClsSchedule) -> ClsSchedule {
        ClsSchedule { batch_size: self.batch_size.unwrap_or(base.batch_size), lr: base.lr.scaled(self.lr_scale), ..*base }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub version: u32,
    /// Its `seed` is replaced by each run seed.
    pub dataset: DatasetSpec,
    pub autoencoder: AEConfig,
    pub pretrain: PretrainSchedule,
    pub refine: RefineSchedule,
    pub classifier: ClsConfig,
    pub schedule: ClsSchedule,
    /// Latent noise scale as a fraction of the mean latent spread.
    pub sigma_factor: f64,
    pub arms: Vec<ArmConfig>,
    pub seeds: Vec<u64>,
    #[serde(default)]
    pub output_dir: Option<PathBuf>,
    /// Write wall-clock seconds into the reports. Off keeps reruns
    /// byte-identical; timings then go to `runtime.log` only.
    #[serde(default)]
    pub record_runtime: bool,
    /// Write the per-iteration mask log of every masked run.
    #[serde(default)]
    pub iteration_logs: bool,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl ExperimentConfig {
    /// Laptop-sized preset.
    pub fn desk() -> Self {
        Self {
            version: CONFIG_VERSION,
            dataset: DatasetSpec::default(),
            autoencoder: AEConfig::default(),
            pretrain: PretrainSchedule::default(),
            refine: RefineSchedule::default(),
            classifier: ClsConfig::default(),
            schedule: ClsSchedule::default(),
            sigma_factor: 0.1,
            arms: default_arms(),
            seeds: (0..5).collect(),
            output_dir: None,
            record_runtime: false,
            iteration_logs: false,
        }
    }

    /// Full-size images, epochs and batch sizes.
    pub fn full_scale() -> Self {
        let mut c = Self::desk();
        c.dataset.side = 112;
        c.autoencoder = AEConfig::full_scale();
        c.classifier = ClsConfig::full_scale();
        c.pretrain.epochs = 50;
        c.pretrain.batch_size = 256;
        c.pretrain.optimizer = crate::neighbor::PretrainOptimizer::Sgd;
        c.refine.epochs = 100;
        c.refine.batch_size = 64;
        c.schedule.epochs = 50;
        c
    }

    /// The masked arms repeated over the batch-size sweep, after one
    /// baseline at the configured batch size.
    pub fn batch_sweep(&self) -> Self {
        let mut arms = vec![ArmConfig::baseline()];
        for (bs, lr) in SWEEP {
            for arm in self.arms.iter().filter(|a| a.masking.is_some()) {
                arms.push(ArmConfig { label: format!("{} BS:{bs} LR:{lr}x", arm.label), batch_size: Some(bs), lr_scale: lr, ..arm.clone() });
            }
        }
        Self { arms, ..self.clone() }
    }

    pub fn validate(&self) -> Result<()> {
        if self.version != CONFIG_VERSION {
            return Err(Error::Version { what: "experiment config".into(), found: self.version, expected: CONFIG_VERSION });
        }
        self.dataset.validate()?;
        self.autoencoder.validate()?;
        self.classifier.validate()?;
        if self.autoencoder.side != self.dataset.side || self.classifier.side != self.dataset.side {
            return Err(Error::config("autoencoder.side", "autoencoder, classifier and dataset sides must agree"));
        }
        if self.classifier.num_classes != self.dataset.num_classes {
            return Err(Error::config("classifier.num_classes", "must match dataset.num_classes"));
        }
        if self.seeds.is_empty() {
            return Err(Error::config("seeds", "need at least one seed"));
        }
        if self.arms.is_empty() {
            return Err(Error::config("arms", "need at least one arm"));
        }
        if !(self.sigma_factor >= 0.0 && self.sigma_factor.is_finite()) {
            return Err(Error::config("sigma_factor", "must be finite and non-negative"));
        }
        let mut labels = std::collections::HashSet::new();
        for arm in &self.arms {
            if !labels.insert(arm.label.as_str()) {
                return Err(Error::config("arms", format!("duplicate label {:?}", arm.label)));
            }
            if !(arm.lr_scale > 0.0) {
                return Err(Error::config("arms.lr_scale", "must be positive"));
            }
            arm.schedule(&self.schedule).validate(self.dataset.num_classes)?;
            if let Some(m) = &arm.masking {
                m.validate()?;
            }
        }
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let c: Self = serde_json::from_str(&text)?;
        c.validate()?;
        Ok(c)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        write_json(path.as_ref(), self)
    }

    pub fn dataset_for(&self, seed: u64) -> DatasetSpec {
        DatasetSpec { seed, ..self.dataset.clone() }
    }

    pub fn needs_autoencoder(&self) -> bool {
        self.arms.iter().any(|a| a.masking.is_some())
    }
}

fn default_arms() -> Vec<ArmConfig> {
    vec![
        ArmConfig::baseline(),
        ArmConfig::masked(FIXED_ARM, ThresholdMode::Calibrated { percentile: 60.0, warmup_epochs: 1 }),
        ArmConfig::masked(BATCH_ARM, ThresholdMode::Batch),
    ]
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    /// `counts[true][predicted]`.
    pub counts: Vec<Vec<u64>>,
}

impl ConfusionMatrix {
    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    pub fn accuracy(&self) -> f64 {
        let trace: u64 = (0..self.counts.len()).map(|i| self.counts[i][i]).sum();
        trace as f64 / self.total().max(1) as f64
    }

    /// Diagonal over row sum; `None` for classes absent from the labels.
    pub fn per_class_accuracy(&self) -> Vec<Option<f64>> {
        self.counts
            .iter()
            .enumerate()
            .map(|(i, row)| {
                let n: u64 = row.iter().sum();
                (n > 0).then(|| row[i] as f64 / n as f64)
            })
            .collect()
    }
}

pub fn confusion_matrix(predictions: &[usize], labels: &[usize], num_classes: usize) -> Result<ConfusionMatrix> {
    if predictions.len() != labels.len() {
        return Err(Error::shape("confusion matrix", &[labels.len()], &[predictions.len()]));
    }
    let mut counts = vec![vec![0; num_classes]; num_classes];
    for (&p, &t) in predictions.iter().zip(labels) {
        for index in [p, t] {
            if index >= num_classes {
                return Err(Error::ClassOutOfRange { index, classes: num_classes });
            }
        }
        counts[t][p] += 1;
    }
    Ok(ConfusionMatrix { counts })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct GroupVerdict {
    pub fc: bool,
    pub cfc: bool,
}

/// Sequence-level failures: a group fails (FC) if any of its four test
/// frames is misclassified, and fails consistently (CFC) if all four are
/// assigned the same wrong class.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SequenceEvalReport {
    pub fc: usize,
    pub cfc: usize,
    pub groups: Vec<GroupVerdict>,
}

/// Verdict of one group from the predictions on its four test frames.
pub fn group_verdict(predictions: &[usize], label: usize, group: usize) -> Result<GroupVerdict> {
    if predictions.len() != 4 {
        return Err(Error::MalformedGroup { group, detail: format!("{} test frames, expected 4", predictions.len()) });
    }
    let fc = predictions.iter().any(|&p| p != label);
    let cfc = predictions[0] != label && predictions.iter().all(|&p| p == predictions[0]);
    Ok(GroupVerdict { fc, cfc })
}

pub fn eval_sequences<T: Scalar>(cls: &Classifier<T>, groups: &[SequenceGroup]) -> Result<SequenceEvalReport> {
    let mut report = SequenceEvalReport::default();
    for (i, g) in groups.iter().enumerate() {
        g.validate(i)?;
        let frames = g.test_frames();
        let mut data = Vec::new();
        for f in frames {
            data.extend(f.image.data().iter().map(|&v| T::lit(v)));
        }
        let side = frames[0].image.shape()[1];
        let x = Tensor::new(vec![frames.len(), 1, side, side], data)?;
        let v = group_verdict(&cls.classify(&x)?, g.clean_label, i)?;
        report.fc += usize::from(v.fc);
        report.cfc += usize::from(v.cfc);
        report.groups.push(v);
    }
    Ok(report)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochAudit {
    pub epoch: usize,
    /// Masked fraction of the noisy rows.
    pub masked_noisy: Option<f64>,
    /// Masked fraction of the clean rows.
    pub masked_clean: Option<f64>,
    /// `masked_noisy / masked_clean`; absent without noise or masking.
    pub lift: Option<f64>,
    /// Lift with the noise flags permuted across samples.
    pub shuffled_lift: Option<f64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MaskAudit {
    pub epochs: Vec<EpochAudit>,
}

impl MaskAudit {
    pub fn final_lift(&self) -> Option<f64> {
        self.epochs.last().and_then(|e| e.lift)
    }
}

fn lift_of(rows: &[(bool, bool)]) -> (Option<f64>, Option<f64>, Option<f64>) {
    let frac = |noisy: bool| {
        let (n, m) = rows.iter().filter(|r| r.0 == noisy).fold((0usize, 0usize), |(n, m), r| (n + 1, m + usize::from(r.1)));
        (n > 0).then(|| m as f64 / n as f64)
    };
    let (fnoisy, fclean) = (frac(true), frac(false));
    let lift = match (fnoisy, fclean) {
        (Some(a), Some(b)) if b > 0.0 => Some(a / b),
        _ => None,
    };
    (fnoisy, fclean, lift)
}

/// Per-epoch masked fractions among noisy and clean samples. `noisy` holds
/// the flag of every training sample; the shuffled control permutes it.
pub fn mask_audit(log: &TrainLog, noisy: &[bool], seed: u64) -> Result<MaskAudit> {
    if log.iterations.is_empty() {
        return Err(Error::Missing("per-iteration mask log".into()));
    }
    if log.iterations_per_epoch == 0 {
        return Err(Error::Missing("iterations per epoch in the training log".into()));
    }
    if let Some(r) = log.iterations.iter().find(|r| r.sample_id >= noisy.len()) {
        return Err(Error::Missing(format!("noise flag for sample {}", r.sample_id)));
    }
    let mut shuffled = noisy.to_vec();
    shuffled.shuffle(&mut ChaCha8Rng::seed_from_u64(seed::derive(seed, "audit-shuffle")));
    let mut by_epoch: BTreeMap<usize, (Vec<(bool, bool)>, Vec<(bool, bool)>)> = BTreeMap::new();
    for r in &log.iterations {
        let e = by_epoch.entry(r.iteration / log.iterations_per_epoch).or_default();
        e.0.push((noisy[r.sample_id], r.mask == 0));
        e.1.push((shuffled[r.sample_id], r.mask == 0));
    }
    let epochs = by_epoch
        .into_iter()
        .map(|(epoch, (rows, control))| {
            let (masked_noisy, masked_clean, lift) = lift_of(&rows);
            EpochAudit { epoch, masked_noisy, masked_clean, lift, shuffled_lift: lift_of(&control).2 }
        })
        .collect();
    Ok(MaskAudit { epochs })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub arm: String,
    pub seed: u64,
    pub batch_size: usize,
    pub lr_scale: f64,
    /// `None` when the arm aborted; see `failure`.
    pub accuracy: Option<f64>,
    pub per_class_accuracy: Vec<Option<f64>>,
    pub confusion: Option<ConfusionMatrix>,
    pub sequences: Option<SequenceEvalReport>,
    pub mask_audit: Option<MaskAudit>,
    pub train_log: Option<TrainLog>,
    pub runtime_s: Option<f64>,
    pub failure: Option<String>,
}

impl MetricsReport {
    fn failed(arm: &ArmConfig, seed: u64, batch_size: usize, err: &Error) -> Self {
        Self {
            arm: arm.label.clone(),
            seed,
            batch_size,
            lr_scale: arm.lr_scale,
            accuracy: None,
            per_class_accuracy: Vec::new(),
            confusion: None,
            sequences: None,
            mask_audit: None,
            train_log: None,
            runtime_s: None,
            failure: Some(err.to_string()),
        }
    }
}

/// Shared per-seed artifacts of the neighbor stage.
pub struct NeighborModel<T> {
    pub ae: Autoencoder<T>,
    pub sigma: f64,
    pub pretrain: PretrainLog,
    pub refine: RefineLog,
    /// Held-out perceptual loss after pretraining and after refinement.
    pub perceptual_before: f64,
    pub perceptual_after: f64,
}

/// Pretrains and refines an autoencoder on the training images, with the
/// perceptual loss read from `extractor_cls`.
pub fn train_neighbor_model<T: Scalar>(config: &ExperimentConfig, ds: &Dataset, extractor_cls: &Classifier<T>, seed: u64) -> Result<NeighborModel<T>> {
    let mut ae = Autoencoder::new(config.autoencoder.clone(), seed::derive(seed, "ae-init"))?;
    let pretrain = pretrain_ae(&mut ae, &ds.train, &config.pretrain, seed)?;
    let ex = PerceptualExtractor::new(extractor_cls, config.refine.tap_weights);
    let perceptual_before = perceptual_loss(&ae, &ex, &ds.test, 64)?;
    let mut disc = Discriminator::new(config.autoencoder.side, config.refine.critic_widths, seed::derive(seed, "critic-init"))?;
    let refine = refine_ae(&mut ae, &mut disc, Some(&ex), &ds.train, &config.refine, seed)?;
    let perceptual_after = perceptual_loss(&ae, &ex, &ds.test, 64)?;
    let sigma = ae.calibrate_sigma(&ds.train, config.sigma_factor, 64)?;
    Ok(NeighborModel { ae, sigma, pretrain, refine, perceptual_before, perceptual_after })
}

/// Rows: originals, reconstructions, then `GRID_DRAWS` neighbor draws.
pub fn neighbor_grid<T: Scalar>(ae: &Autoencoder<T>, ds: &Dataset, sigma: f64, seed: u64) -> Result<Vec<Vec<Tensor<f64>>>> {
    let idx: Vec<usize> = (0..GRID_INPUTS.min(ds.test.len())).collect();
    let x = batch_images::<T>(&ds.test, &idx);
    let mut rng = ChaCha8Rng::seed_from_u64(seed::derive(seed, "neighbor-grid"));
    let mut rows = vec![split_images(&x), split_images(&ae.reconstruct(&x)?)];
    for _ in 0..GRID_DRAWS {
        rows.push(split_images(&ae.synthesize_with(&x, sigma, &mut rng)?));
    }
    Ok(rows)
}

fn split_images<T: Scalar>(batch: &Tensor<T>) -> Vec<Tensor<f64>> {
    let s = batch.shape();
    let per = s[1] * s[2] * s[3];
    batch
        .data()
        .chunks(per)
        .map(|c| Tensor::new(s[1..].to_vec(), c.iter().map(|v| v.as_f64()).collect()).expect("chunk matches shape"))
        .collect()
}

/// Trains and evaluates one arm on a prepared dataset.
pub fn run_arm<T: Scalar>(config: &ExperimentConfig, arm: &ArmConfig, ds: &Dataset, neighbor: Option<&NeighborModel<T>>, seed: u64) -> Result<MetricsReport> {
    run_arm_with_model(config, arm, ds, neighbor, seed).map(|(r, _)| r)
}

fn run_arm_with_model<T: Scalar>(
    config: &ExperimentConfig,
    arm: &ArmConfig,
    ds: &Dataset,
    neighbor: Option<&NeighborModel<T>>,
    seed: u64,
) -> Result<(MetricsReport, Classifier<T>)> {
    let start = Instant::now();
    let schedule = arm.schedule(&config.schedule);
    let mut cls = Classifier::new(config.classifier.clone(), seed::derive(seed, "classifier-init"))?;
    let (log, audit) = match &arm.masking {
        None => (train_baseline(&mut cls, &ds.train, &schedule, seed)?, None),
        Some(m) => {
            let nm = neighbor.ok_or_else(|| Error::Missing("autoencoder for a masked arm".into()))?;
            let log = train_masked(&mut cls, &ds.train, &nm.ae, &schedule, m, nm.sigma, seed)?;
            let audit = if ds.manifest.noisy_count > 0 { Some(mask_audit(&log, &ds.noisy_flags(), seed)?) } else { None };
            (log, audit)
        }
    };
    let images = batch_images::<T>(&ds.test, &(0..ds.test.len()).collect::<Vec<_>>());
    let preds = cls.classify(&images)?;
    let labels: Vec<usize> = ds.test.iter().map(|s| s.clean_label).collect();
    let confusion = confusion_matrix(&preds, &labels, ds.num_classes())?;
    let sequences = eval_sequences(&cls, &ds.sequences)?;
    let report = MetricsReport {
        arm: arm.label.clone(),
        seed,
        batch_size: schedule.batch_size,
        lr_scale: arm.lr_scale,
        accuracy: Some(confusion.accuracy()),
        per_class_accuracy: confusion.per_class_accuracy(),
        confusion: Some(confusion),
        sequences: Some(sequences),
        mask_audit: audit,
        train_log: Some(log),
        runtime_s: Some(start.elapsed().as_secs_f64()),
        failure: None,
    };
    Ok((report, cls))
}

/// All arms of one seed, in configuration order. Arm failures are recorded
/// in the reports rather than returned.
///
/// The perceptual extractor of the autoencoder is the unmasked classifier
/// of this seed; an unmasked arm at the base schedule supplies it directly.
pub fn run_seed<T: Scalar>(config: &ExperimentConfig, seed: u64, dir: Option<&Path>) -> Result<Vec<MetricsReport>> {
    let ds = generate_dataset(&config.dataset_for(seed))?;
    let mut reports: Vec<Option<MetricsReport>> = vec![None; config.arms.len()];
    let reference = config.arms.iter().position(|a| a.masking.is_none() && a.schedule(&config.schedule) == config.schedule);
    let mut extractor = None;
    if let Some(i) = reference {
        match run_arm_with_model::<T>(config, &config.arms[i], &ds, None, seed) {
            Ok((r, cls)) => {
                reports[i] = Some(r);
                extractor = Some(cls);
            }
            Err(e) => reports[i] = Some(MetricsReport::failed(&config.arms[i], seed, config.schedule.batch_size, &e)),
        }
    }
    let neighbor = if config.needs_autoencoder() {
        let cls = match extractor {
            Some(c) => c,
            None => {
                let mut c = Classifier::<T>::new(config.classifier.clone(), seed::derive(seed, "classifier-init"))?;
                train_baseline(&mut c, &ds.train, &config.schedule, seed)?;
                c
            }
        };
        let nm = train_neighbor_model(config, &ds, &cls, seed)?;
        if let Some(dir) = dir {
            export_pgm_grid(&neighbor_grid(&nm.ae, &ds, nm.sigma, seed)?, dir.join(format!("neighbors-seed{seed}.pgm")))?;
        }
        Some(nm)
    } else {
        None
    };
    for (i, arm) in config.arms.iter().enumerate() {
        if reports[i].is_some() {
            continue;
        }
        let bs = arm.schedule(&config.schedule).batch_size;
        let report = run_arm(config, arm, &ds, neighbor.as_ref(), seed).unwrap_or_else(|e| MetricsReport::failed(arm, seed, bs, &e));
        if let (Some(dir), true, Some(log)) = (dir, config.iteration_logs, report.train_log.as_ref()) {
            if arm.masking.is_some() {
                log.write_iterations_csv(dir.join(format!("iterations-{}-seed{seed}.csv", slug(&arm.label))))?;
            }
        }
        reports[i] = Some(report);
    }
    Ok(reports.into_iter().map(|r| r.expect("every arm ran")).collect())
}

/// Worker count from `NW_THREADS`, default 1.
pub fn worker_count() -> usize {
    std::env::var("NW_THREADS").ok().and_then(|v| v.parse::<usize>().ok()).filter(|&n| n > 0).unwrap_or(1)
}

/// Runs every arm and seed, writes the reports, and fails if any arm did.
/// Seeds are distributed over `NW_THREADS` workers; report order is fixed.
pub fn run_experiment(config: &ExperimentConfig, dir: &Path) -> Result<Vec<MetricsReport>> {
    config.validate()?;
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let _ = fs::remove_file(dir.join(FAILURE_MARKER));
    config.save(dir.join("config.json"))?;
    let workers = worker_count().min(config.seeds.len());
    let chunks: Vec<Vec<u64>> = (0..workers).map(|w| config.seeds.iter().copied().skip(w).step_by(workers).collect()).collect();
    let results: Vec<Vec<(u64, Result<Vec<MetricsReport>>)>> = std::thread::scope(|s| {
        let handles: Vec<_> = chunks
            .iter()
            .map(|seeds| s.spawn(move || seeds.iter().map(|&sd| (sd, run_seed::<f64>(config, sd, Some(dir)))).collect()))
            .collect();
        handles.into_iter().map(|h| h.join().expect("worker panicked")).collect()
    });
    let mut by_seed: BTreeMap<usize, Vec<MetricsReport>> = BTreeMap::new();
    let mut first_err = None;
    for (seed, res) in results.into_iter().flatten() {
        let pos = config.seeds.iter().position(|&s| s == seed).expect("configured seed");
        let reports = res.unwrap_or_else(|e| {
            let msg = e.to_string();
            first_err.get_or_insert(e);
            let err = Error::Missing(format!("seed {seed} setup: {msg}"));
            config.arms.iter().map(|a| MetricsReport::failed(a, seed, a.schedule(&config.schedule).batch_size, &err)).collect()
        });
        by_seed.insert(pos, reports);
    }
    let reports: Vec<MetricsReport> = by_seed.into_values().flatten().collect();
    emit_report(&reports, config, dir)?;
    if let Some(e) = first_err {
        return Err(e);
    }
    if let Some(r) = reports.iter().find(|r| r.failure.is_some()) {
        return Err(Error::Missing(format!("completed arm {:?} seed {}: {}", r.arm, r.seed, r.failure.as_deref().unwrap_or(""))));
    }
    Ok(reports)
}

pub const FAILURE_MARKER: &str = "FAILED";
pub const CSV_NAME: &str = "report.csv";

#[derive(Debug, Serialize, Deserialize, PartialEq)]
pub struct CsvRow {
    pub arm: String,
    pub seed: u64,
    pub batch_size: usize,
    pub accuracy: Option<f64>,
    pub fc: Option<usize>,
    pub cfc: Option<usize>,
    pub lift: Option<f64>,
    pub runtime_s: Option<f64>,
}

pub fn slug(label: &str) -> String {
    let mut s: String = label.chars().map(|c| if c.is_ascii_alphanumeric() { c.to_ascii_lowercase() } else { '-' }).collect();
    while s.contains("--") {
        s = s.replace("--", "-");
    }
    s.trim_matches('-').to_string()
}

fn write_json<S: Serialize>(path: &Path, value: &S) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Aggregate CSV, one JSON file per arm, and a failure marker if any arm
/// aborted. Runtimes are kept out of the files unless `record_runtime`.
pub fn emit_report(reports: &[MetricsReport], config: &ExperimentConfig, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let keep_time = |r: &MetricsReport| if config.record_runtime { r.runtime_s } else { None };
    let csv_path = dir.join(CSV_NAME);
    let mut w = csv::Writer::from_path(&csv_path)?;
    for r in reports {
        w.serialize(CsvRow {
            arm: r.arm.clone(),
            seed: r.seed,
            batch_size: r.batch_size,
            accuracy: r.accuracy,
            fc: r.sequences.as_ref().map(|s| s.fc),
            cfc: r.sequences.as_ref().map(|s| s.cfc),
            lift: r.mask_audit.as_ref().and_then(MaskAudit::final_lift),
            runtime_s: keep_time(r),
        })?;
    }
    w.flush().map_err(|e| Error::io(&csv_path, e))?;

    let mut arms: Vec<&str> = Vec::new();
    for r in reports {
        if !arms.contains(&r.arm.as_str()) {
            arms.push(&r.arm);
        }
    }
    for arm in arms {
        let rows: Vec<MetricsReport> =
            reports.iter().filter(|r| r.arm == arm).map(|r| MetricsReport { runtime_s: keep_time(r), ..r.clone() }).collect();
        write_json(&dir.join(format!("{}.json", slug(arm))), &rows)?;
    }

    let log: String = reports.iter().map(|r| format!("{}\t{}\t{:.3}\n", r.arm, r.seed, r.runtime_s.unwrap_or(f64::NAN))).collect();
    fs::write(dir.join("runtime.log"), log).map_err(|e| Error::io(dir.join("runtime.log"), e))?;
    if let Some(r) = reports.iter().find(|r| r.failure.is_some()) {
        let marker = dir.join(FAILURE_MARKER);
        fs::write(&marker, format!("{}\t{}\t{}\n", r.arm, r.seed, r.failure.as_deref().unwrap_or(""))).map_err(|e| Error::io(&marker, e))?;
    }
    Ok(())
}

/// Reads back the per-arm JSON written by [`emit_report`].
pub fn load_arm_reports(path: impl AsRef<Path>) -> Result<Vec<MetricsReport>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_str(&text)?)
}

/// Mean accuracy of each arm across seeds, in first-appearance order.
pub fn mean_accuracy(reports: &[MetricsReport]) -> Vec<(String, f64)> {
    let mut out: Vec<(String, f64, usize)> = Vec::new();
    for r in reports {
        let Some(a) = r.accuracy else { continue };
        match out.iter_mut().find(|o| o.0 == r.arm) {
            Some(o) => {
                o.1 += a;
                o.2 += 1;
            }
            None => out.push((r.arm.clone(), a, 1)),
        }
    }
    out.into_iter().map(|(a, s, n)| (a, s / n as f64)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn verdicts() {
        assert_eq!(group_verdict(&[2, 2, 2, 2], 2, 0).unwrap(), GroupVerdict { fc: false, cfc: false });
        assert_eq!(group_verdict(&[1, 1, 1, 1], 2, 0).unwrap(), GroupVerdict { fc: true, cfc: true });
        assert_eq!(group_verdict(&[1, 3, 2, 2], 2, 0).unwrap(), GroupVerdict { fc: true, cfc: false });
        assert!(matches!(group_verdict(&[1, 1, 1], 2, 5), Err(Error::MalformedGroup { group: 5, .. })));
    }

    #[test]
    fn slugs() {
        assert_eq!(slug("with Ours(BT)"), "with-ours-bt");
        assert_eq!(slug("w/o Ours"), "w-o-ours");
    }
}
