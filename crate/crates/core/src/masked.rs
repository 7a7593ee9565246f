//! Instability scoring and gradient masking.
//!
//! Each training sample is compared with a semantic neighbor synthesized by
//! the frozen autoencoder. Samples whose prediction moves too much (by the
//! symmetric KL divergence) drop out of the update:
//! `W ← W − μ Σ_i m_i ∇L_i` with `m_i = [Div_i < T]`.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::classifier::{Classifier, ClsSchedule, Head, NormStats, ProbabilityVector};
use crate::data::{batch_images, Sample, SelectiveBatches};
use crate::error::{Error, Result};
use crate::graph::{Graph, Mode, PROB_FLOOR};
use crate::neighbor::Autoencoder;
use crate::optim::sgd_step;
use crate::scalar::Scalar;
use crate::seed;
use crate::tensor::Tensor;

/// `Σ_i P_i ln(P_i / Q_i)` in nats, with both arguments floored at 1e-12
/// inside the logarithm.
pub fn kl_divergence(p: &ProbabilityVector, q: &ProbabilityVector) -> Result<f64> {
    if p.len() != q.len() {
        return Err(Error::shape("kl_divergence", &[p.len()], &[q.len()]));
    }
    Ok(p.as_slice()
        .iter()
        .zip(q.as_slice())
        .map(|(&a, &b)| a * (a.max(PROB_FLOOR).ln() - b.max(PROB_FLOOR).ln()))
        .sum())
}

/// `(KL(P‖Q) + KL(Q‖P)) / 2`.
pub fn sym_divergence(p: &ProbabilityVector, q: &ProbabilityVector) -> Result<f64> {
    Ok((kl_divergence(p, q)? + kl_divergence(q, p)?) / 2.0)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DivergenceRecord {
    pub sample_id: usize,
    pub div: f64,
    /// Prediction on the original image.
    pub original: ProbabilityVector,
    /// Prediction on its synthesized neighbor.
    pub neighbor: ProbabilityVector,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MaskVector {
    pub masks: Vec<bool>,
    pub threshold: f64,
    pub survivors: usize,
}

impl MaskVector {
    pub fn from_divs(divs: &[f64], threshold: f64) -> Self {
        let masks: Vec<bool> = divs.iter().map(|&d| d < threshold).collect();
        let survivors = masks.iter().filter(|&&m| m).count();
        Self { masks, threshold, survivors }
    }

    pub fn all(n: usize) -> Self {
        Self { masks: vec![true; n], threshold: f64::INFINITY, survivors: n }
    }
}

/// `m_i = 1` iff `Div_i < T` (equality masks the sample out).
pub fn fixed_threshold_mask(records: &[DivergenceRecord], t: f64) -> MaskVector {
    let divs: Vec<f64> = records.iter().map(|r| r.div).collect();
    MaskVector::from_divs(&divs, t)
}

/// Mean divergence of the batch.
pub fn batch_threshold(records: &[DivergenceRecord]) -> Result<f64> {
    mean_div(&records.iter().map(|r| r.div).collect::<Vec<_>>())
}

fn mean_div(divs: &[f64]) -> Result<f64> {
    if divs.is_empty() {
        return Err(Error::EmptyBatch);
    }
    Ok(compensated_sum(divs) / divs.len() as f64)
}

// Neumaier summation, so short batches like [0.1, 0.2, 0.3, 0.6] give the
// correctly rounded mean.
fn compensated_sum(xs: &[f64]) -> f64 {
    let (mut sum, mut c) = (0.0f64, 0.0f64);
    for &x in xs {
        let t = sum + x;
        c += if sum.abs() >= x.abs() { (sum - t) + x } else { (x - t) + sum };
        sum = t;
    }
    sum + c
}

/// Divergence between the model's predictions on `images` and on their
/// neighbors. Neither pass records a gradient or updates statistics.
pub fn divergences<T: Scalar>(
    cls: &Classifier<T>,
    images: &Tensor<T>,
    neighbors: &Tensor<T>,
    head: Head,
    stats: NormStats,
    ids: &[usize],
) -> Result<Vec<DivergenceRecord>> {
    let po = cls.predict_head_with(images, head, stats)?;
    let pt = cls.predict_head_with(neighbors, head, stats)?;
    po.into_iter()
        .zip(pt)
        .zip(ids)
        .map(|((original, neighbor), &sample_id)| {
            let div = sym_divergence(&original, &neighbor)?;
            if !div.is_finite() {
                return Err(Error::NonFiniteScore(sample_id));
            }
            Ok(DivergenceRecord { sample_id, div, original, neighbor })
        })
        .collect()
}

/// `Div(F(I), F(decode(encode(I) + n)))` for a batch, on the fused head.
pub fn instability<T: Scalar>(images: &Tensor<T>, cls: &Classifier<T>, ae: &Autoencoder<T>, noise: &crate::neighbor::NoiseSpec) -> Result<Vec<DivergenceRecord>> {
    let neighbors = ae.synthesize_neighbor(images, noise)?;
    let ids: Vec<usize> = (0..images.batch()).collect();
    divergences(cls, images, &neighbors, Head::Fused, NormStats::Running, &ids)
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepOutcome {
    /// Per-sample three-head loss on the original images.
    pub losses: Vec<f64>,
    /// True when every sample was masked and no update happened.
    pub skipped: bool,
}

/// One masked update on a batch of original images: the train-mode forward
/// covers the whole batch, the gradient only the survivors, summed without
/// normalization. An all-masked batch leaves parameters and statistics
/// untouched.
#[allow(clippy::too_many_arguments)]
pub fn masked_step<T: Scalar>(
    cls: &mut Classifier<T>,
    images: &Tensor<T>,
    labels: &[usize],
    masks: &MaskVector,
    lr: f64,
    momentum: f64,
    weight_decay: f64,
    dropout_seed: u64,
) -> Result<StepOutcome> {
    if masks.masks.len() != labels.len() {
        return Err(Error::shape("masked_step masks", &[labels.len()], &[masks.masks.len()]));
    }
    let mut g = Graph::train(dropout_seed);
    let x = g.input(images.clone());
    let nodes = cls.forward(&mut g, x, Mode::Train)?;
    let per = cls.loss_node(&mut g, &nodes, labels)?;
    let losses = g.value(per).to_f64_vec();
    if masks.survivors == 0 {
        return Ok(StepOutcome { losses, skipped: true });
    }
    let weights: Vec<T> = masks.masks.iter().map(|&m| if m { T::one() } else { T::zero() }).collect();
    let loss = g.weighted_sum(per, &weights)?;
    let grads = g.backward(loss)?;
    cls.store.accumulate(&grads);
    sgd_step(&mut cls.store, lr, momentum, weight_decay)?;
    cls.store.apply_stat_updates(g.stat_updates(), T::lit(crate::layers::BN_MOMENTUM));
    Ok(StepOutcome { losses, skipped: false })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case", deny_unknown_fields)]
pub enum ThresholdMode {
    /// Preset threshold.
    Fixed { t: f64 },
    /// Unmasked warm-up, then a fixed threshold at the given percentile of
    /// the training split's divergences.
    Calibrated { percentile: f64, warmup_epochs: usize },
    /// Mean divergence of each batch.
    Batch,
}

impl ThresholdMode {
    pub fn label(&self) -> &'static str {
        match self {
            ThresholdMode::Fixed { .. } | ThresholdMode::Calibrated { .. } => "fixed",
            ThresholdMode::Batch => "batch",
        }
    }

    fn validate(&self) -> Result<()> {
        match *self {
            ThresholdMode::Fixed { t } if !(t > 0.0) => Err(Error::config("threshold.t", "must be positive")),
            ThresholdMode::Calibrated { percentile, .. } if !(0.0..=100.0).contains(&percentile) => {
                Err(Error::config("threshold.percentile", "must lie in [0, 100]"))
            }
            _ => Ok(()),
        }
    }
}

/// Whether each step draws fresh latent noise or reuses one draw per sample.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NeighborMode {
    #[default]
    Fresh,
    Cached,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MaskingConfig {
    pub threshold: ThresholdMode,
    /// Latent noise scale; `None` uses the autoencoder's calibrated value.
    #[serde(default)]
    pub sigma: Option<f64>,
    #[serde(default)]
    pub head: Head,
    #[serde(default)]
    pub neighbors: NeighborMode,
    /// Normalization statistics of the two scoring passes.
    #[serde(default)]
    pub norm: NormStats,
}

impl MaskingConfig {
    pub fn validate(&self) -> Result<()> {
        self.threshold.validate()?;
        match self.sigma {
            Some(s) if !(s >= 0.0 && s.is_finite()) => Err(Error::config("masking.sigma", "must be finite and non-negative")),
            _ => Ok(()),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub iteration: usize,
    pub threshold_mode: String,
    #[serde(rename = "T")]
    pub threshold: f64,
    pub sample_id: usize,
    pub div: f64,
    pub mask: u8,
    pub is_noisy: u8,
    pub loss: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochSummary {
    pub epoch: usize,
    pub lr: f64,
    /// Mean per-sample loss over the epoch's batches.
    pub mean_loss: f64,
    /// Fraction of batch samples whose eval-mode prediction matches the
    /// observed label. Only tracked on masked runs.
    pub batch_accuracy: Option<f64>,
    pub skipped_steps: usize,
    /// Fraction of batch slots kept by the mask.
    pub kept_fraction: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub epochs: Vec<EpochSummary>,
    /// Threshold fixed after warm-up, for calibrated runs.
    pub calibrated_threshold: Option<f64>,
    pub sigma: Option<f64>,
    pub iterations_per_epoch: usize,
    #[serde(skip)]
    pub iterations: Vec<IterationRecord>,
}

impl TrainLog {
    pub fn write_iterations_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut w = csv::Writer::from_path(path).map_err(|e| match e.into_kind() {
            csv::ErrorKind::Io(io) => Error::io(path, io),
            other => Error::Missing(format!("{other:?}")),
        })?;
        for r in &self.iterations {
            w.serialize(r)?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }

    /// Number of (sample, consecutive appearance) pairs whose mask changed.
    pub fn mask_transitions(&self) -> usize {
        let mut last = std::collections::HashMap::new();
        let mut n = 0;
        for r in &self.iterations {
            if let Some(prev) = last.insert(r.sample_id, r.mask) {
                n += usize::from(prev != r.mask);
            }
        }
        n
    }
}

/// Linear-interpolation percentile (`p` in `[0, 100]`) of unsorted values.
pub fn percentile(values: &[f64], p: f64) -> Result<f64> {
    if values.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let pos = p / 100.0 * (v.len() - 1) as f64;
    let (lo, hi) = (pos.floor() as usize, pos.ceil() as usize);
    Ok(v[lo] + (v[hi] - v[lo]) * (pos - lo as f64))
}

struct Masker<'a, T> {
    cfg: &'a MaskingConfig,
    ae: &'a Autoencoder<T>,
    sigma: f64,
    /// Eval-mode latent codes of the whole split.
    codes: Vec<f64>,
    /// Neighbor images of the whole split, for cached mode.
    cached: Option<Vec<Tensor<T>>>,
    rng: ChaCha8Rng,
    threshold: Option<f64>,
}

impl<'a, T: Scalar> Masker<'a, T> {
    fn new(cfg: &'a MaskingConfig, ae: &'a Autoencoder<T>, split: &[Sample], sigma: f64, seed: u64) -> Result<Self> {
        cfg.threshold.validate()?;
        if !(sigma >= 0.0 && sigma.is_finite()) {
            return Err(Error::config("sigma", "must be finite and non-negative"));
        }
        let codes = ae.encode_split(split, 64)?;
        let mut m = Self {
            cfg,
            ae,
            sigma,
            codes,
            cached: None,
            rng: ChaCha8Rng::seed_from_u64(seed::derive(seed, "neighbor-noise")),
            threshold: match cfg.threshold {
                ThresholdMode::Fixed { t } => Some(t),
                _ => None,
            },
        };
        if cfg.neighbors == NeighborMode::Cached {
            let idx: Vec<usize> = (0..split.len()).collect();
            let mut cached = Vec::with_capacity(split.len());
            for chunk in idx.chunks(64) {
                let nb = m.neighbors(chunk)?;
                cached.extend((0..chunk.len()).map(|i| nb.item_at(i)));
            }
            m.cached = Some(cached);
        }
        Ok(m)
    }

    fn neighbors(&mut self, idx: &[usize]) -> Result<Tensor<T>> {
        if let Some(c) = &self.cached {
            let items: Vec<&Tensor<T>> = idx.iter().map(|&i| &c[i]).collect();
            return Tensor::stack(&items);
        }
        let d = self.ae.config.latent;
        let mut z = Tensor::from_fn(vec![idx.len(), d], |k| T::lit(self.codes[idx[k / d] * d + k % d]));
        self.ae.perturb(&mut z, self.sigma, &mut self.rng);
        Ok(self.ae.decode(&z)?.0)
    }

    fn records(&mut self, cls: &Classifier<T>, split: &[Sample], idx: &[usize]) -> Result<Vec<DivergenceRecord>> {
        let x = batch_images(split, idx);
        let nb = self.neighbors(idx)?;
        divergences(cls, &x, &nb, self.cfg.head, self.cfg.norm, idx)
    }

    fn masks(&self, divs: &[f64], epoch: usize) -> Result<MaskVector> {
        let t = match self.cfg.threshold {
            ThresholdMode::Batch => mean_div(divs)?,
            ThresholdMode::Calibrated { warmup_epochs, .. } if epoch < warmup_epochs => f64::INFINITY,
            _ => self.threshold.expect("threshold set"),
        };
        Ok(MaskVector::from_divs(divs, t))
    }

    fn end_epoch(&mut self, cls: &Classifier<T>, split: &[Sample], epoch: usize) -> Result<()> {
        if let ThresholdMode::Calibrated { percentile: p, warmup_epochs } = self.cfg.threshold {
            if epoch + 1 == warmup_epochs || (warmup_epochs == 0 && self.threshold.is_none()) {
                let idx: Vec<usize> = (0..split.len()).collect();
                let mut divs = Vec::with_capacity(split.len());
                for chunk in idx.chunks(64) {
                    divs.extend(self.records(cls, split, chunk)?.iter().map(|r| r.div));
                }
                self.threshold = Some(percentile(&divs, p)?);
            }
        }
        Ok(())
    }
}

fn train_loop<T: Scalar>(
    cls: &mut Classifier<T>,
    split: &[Sample],
    schedule: &ClsSchedule,
    mut masker: Option<Masker<T>>,
    seed: u64,
) -> Result<TrainLog> {
    schedule.validate(cls.config.num_classes)?;
    let labels: Vec<usize> = split.iter().map(|s| s.observed_label).collect();
    let mut batches = SelectiveBatches::new(&labels, cls.config.num_classes, schedule.batch_size, seed::derive(seed, "batches"))?;
    let iters = (split.len() / schedule.batch_size).max(1);
    let mut log = TrainLog { sigma: masker.as_ref().map(|m| m.sigma), iterations_per_epoch: iters, ..Default::default() };
    if let Some(m) = masker.as_mut() {
        if matches!(m.cfg.threshold, ThresholdMode::Calibrated { warmup_epochs: 0, .. }) {
            m.end_epoch(cls, split, 0)?;
        }
    }
    let mut iteration = 0;
    for epoch in 0..schedule.epochs {
        let lr = schedule.lr.at(epoch);
        let (mut loss_sum, mut correct, mut seen, mut kept, mut skipped) = (0.0, 0usize, 0usize, 0usize, 0usize);
        for _ in 0..iters {
            let idx = batches.next_batch();
            let batch_labels: Vec<usize> = idx.iter().map(|&i| labels[i]).collect();
            let (records, masks) = match masker.as_mut() {
                Some(m) => {
                    let rec = m.records(cls, split, &idx)?;
                    let divs: Vec<f64> = rec.iter().map(|r| r.div).collect();
                    let mv = m.masks(&divs, epoch)?;
                    (Some(rec), mv)
                }
                None => (None, MaskVector::all(idx.len())),
            };
            let x = batch_images(split, &idx);
            let dropout_seed = seed::derive_indexed(seed, "dropout", iteration as u64);
            let out = masked_step(cls, &x, &batch_labels, &masks, lr, schedule.momentum, schedule.weight_decay, dropout_seed)?;
            if out.losses.iter().any(|l| !l.is_finite()) {
                return Err(Error::Divergence { stage: "classifier training".into(), step: iteration });
            }
            loss_sum += out.losses.iter().sum::<f64>();
            seen += idx.len();
            kept += masks.survivors;
            skipped += usize::from(out.skipped);
            if let Some(rec) = records {
                let mode = masker.as_ref().map(|m| m.cfg.threshold.label()).unwrap_or("none");
                for (k, r) in rec.iter().enumerate() {
                    correct += usize::from(r.original.argmax() == batch_labels[k]);
                    log.iterations.push(IterationRecord {
                        iteration,
                        threshold_mode: mode.to_string(),
                        threshold: masks.threshold,
                        sample_id: r.sample_id,
                        div: r.div,
                        mask: u8::from(masks.masks[k]),
                        is_noisy: u8::from(split[r.sample_id].is_noisy),
                        loss: out.losses[k],
                    });
                }
            }
            iteration += 1;
        }
        if let Some(m) = masker.as_mut() {
            m.end_epoch(cls, split, epoch)?;
            log.calibrated_threshold = match m.cfg.threshold {
                ThresholdMode::Calibrated { .. } => m.threshold,
                _ => None,
            };
        }
        log.epochs.push(EpochSummary {
            epoch,
            lr,
            mean_loss: loss_sum / seen as f64,
            batch_accuracy: masker.is_some().then(|| correct as f64 / seen as f64),
            skipped_steps: skipped,
            kept_fraction: kept as f64 / seen as f64,
        });
    }
    Ok(log)
}

/// Plain training: every sample of every batch contributes.
pub(crate) fn train_unmasked<T: Scalar>(cls: &mut Classifier<T>, split: &[Sample], schedule: &ClsSchedule, seed: u64) -> Result<TrainLog> {
    train_loop(cls, split, schedule, None, seed)
}

/// Masked training with the autoencoder frozen. Divergences and masks are
/// recomputed on every iteration with the current parameters.
pub fn train_masked<T: Scalar>(
    cls: &mut Classifier<T>,
    split: &[Sample],
    ae: &Autoencoder<T>,
    schedule: &ClsSchedule,
    cfg: &MaskingConfig,
    sigma: f64,
    seed: u64,
) -> Result<TrainLog> {
    let sigma = cfg.sigma.unwrap_or(sigma);
    let masker = Masker::new(cfg, ae, split, sigma, seed)?;
    train_loop(cls, split, schedule, Some(masker), seed)
}
