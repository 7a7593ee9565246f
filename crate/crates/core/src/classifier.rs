//! Two-branch multi-scale expression classifier.
//!
//! The full branch sees the image, the half branch a 2×2 average-pooled copy.
//! Each branch is a stack of conv/BN/ReLU/max-pool stages, a 1×1 conv with
//! dropout, an embedding layer and its own K-way head; a third head reads the
//! concatenated embeddings.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{batch_images, Sample};
use crate::error::{Error, Result};
use crate::graph::{Graph, Mode, NodeId, PROB_FLOOR};
use crate::layers::{forward_layer, Layer, LayerSpec, Sequential};
use crate::masked::TrainLog;
use crate::optim::StepDecay;
use crate::params::ParamStore;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClsConfig {
    pub num_classes: usize,
    pub side: usize,
    /// Output channels of each pooled stage of the full branch.
    pub full_widths: Vec<usize>,
    pub half_widths: Vec<usize>,
    pub full_conv5: usize,
    pub half_conv5: usize,
    pub full_embedding: usize,
    pub half_embedding: usize,
    pub dropout: f64,
    /// Focal-loss focusing parameter.
    pub gamma: f64,
}

impl Default for ClsConfig {
    fn default() -> Self {
        Self {
            num_classes: 7,
            side: 32,
            full_widths: vec![8, 16, 24, 32],
            half_widths: vec![8, 16, 24, 32],
            full_conv5: 32,
            half_conv5: 24,
            full_embedding: 32,
            half_embedding: 16,
            dropout: 0.5,
            gamma: 2.0,
        }
    }
}

impl ClsConfig {
    /// Widths of the published network at 112×112 (one conv per stage).
    pub fn full_scale() -> Self {
        Self {
            side: 112,
            full_widths: vec![64, 128, 256, 512],
            half_widths: vec![64, 128, 256, 512],
            full_conv5: 128,
            half_conv5: 128,
            full_embedding: 64,
            half_embedding: 32,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |f: &str, r: &str| Err(Error::config(format!("classifier.{f}"), r));
        if self.num_classes < 2 {
            return bad("num_classes", "need at least 2 classes");
        }
        for (f, w) in [("full_widths", &self.full_widths), ("half_widths", &self.half_widths)] {
            if w.len() < 2 || w.contains(&0) {
                return bad(f, "need at least two non-empty stages");
            }
        }
        let stages = self.full_widths.len().max(self.half_widths.len()) as u32;
        if !self.side.is_multiple_of(2) || self.side / 2 < 1 << stages {
            return bad("side", "too small for the number of pooled stages");
        }
        if [self.full_conv5, self.half_conv5, self.full_embedding, self.half_embedding].contains(&0) {
            return bad("full_embedding", "layer widths must be positive");
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad("dropout", "must lie in [0, 1)");
        }
        if !(self.gamma.is_finite() && self.gamma >= 0.0) {
            return bad("gamma", "must be finite and non-negative");
        }
        Ok(())
    }
}

/// `K` non-negative entries summing to one (within 1e-6).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbabilityVector(Vec<f64>);

impl ProbabilityVector {
    pub fn new(p: Vec<f64>) -> Result<Self> {
        if p.is_empty() {
            return Err(Error::NotAProbability("empty".into()));
        }
        if let Some(v) = p.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::NotAProbability(format!("entry {v} outside [0, 1]")));
        }
        let s: f64 = p.iter().sum();
        if (s - 1.0).abs() > 1e-6 {
            return Err(Error::NotAProbability(format!("entries sum to {s}")));
        }
        Ok(Self(p))
    }

    pub fn uniform(k: usize) -> Self {
        Self(vec![1.0 / k as f64; k])
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// Index of the largest entry (first on ties).
    pub fn argmax(&self) -> usize {
        self.0
            .iter()
            .enumerate()
            .fold((0, f64::NEG_INFINITY), |best, (i, &v)| if v > best.1 { (i, v) } else { best })
            .0
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BranchOutputs {
    pub full: ProbabilityVector,
    pub half: ProbabilityVector,
    pub fused: ProbabilityVector,
}

/// `-(1 - p_y)^γ · ln(max(p_y, 1e-12))`.
pub fn focal_loss(probs: &ProbabilityVector, label: usize, gamma: f64) -> Result<f64> {
    let p = *probs.as_slice().get(label).ok_or(Error::ClassOutOfRange { index: label, classes: probs.len() })?;
    Ok(-(1.0 - p).powf(gamma) * p.max(PROB_FLOOR).ln())
}

/// Unweighted sum of the focal losses of the three heads.
pub fn sample_loss(outputs: &BranchOutputs, label: usize, gamma: f64) -> Result<f64> {
    Ok(focal_loss(&outputs.full, label, gamma)? + focal_loss(&outputs.half, label, gamma)? + focal_loss(&outputs.fused, label, gamma)?)
}

/// Which head's probabilities stand for the model's prediction.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Head {
    Full,
    Half,
    #[default]
    Fused,
}

#[derive(Clone, Debug)]
struct Branch {
    stages: Vec<Sequential>,
    conv5: Sequential,
    embed: Layer,
    head: Layer,
}

impl Branch {
    fn new<T: Scalar>(prefix: &str, widths: &[usize], conv5: usize, embed: usize, side: usize, k: usize, store: &mut ParamStore<T>, rng: &mut ChaCha8Rng) -> Self {
        let mut stages = Vec::new();
        let (mut cin, mut s) = (1, side);
        for (i, &w) in widths.iter().enumerate() {
            let kernel = if i == 0 { 5 } else { 3 };
            let mut st = Sequential::new();
            let name = format!("{prefix}.conv{}", i + 1);
            st.push(&name, LayerSpec::Conv2d { in_ch: cin, out_ch: w, kernel, stride: 1, pad: kernel / 2 }, store, rng)
                .push(format!("{name}.bn"), LayerSpec::BatchNorm { channels: w }, store, rng)
                .push(format!("{name}.relu"), LayerSpec::Relu, store, rng)
                .push(format!("{name}.pool"), LayerSpec::MaxPool { size: 2 }, store, rng);
            stages.push(st);
            cin = w;
            s /= 2;
        }
        let mut c5 = Sequential::new();
        let name = format!("{prefix}.conv5");
        c5.push(&name, LayerSpec::Conv2d { in_ch: cin, out_ch: conv5, kernel: 1, stride: 1, pad: 0 }, store, rng)
            .push(format!("{name}.bn"), LayerSpec::BatchNorm { channels: conv5 }, store, rng)
            .push(format!("{name}.relu"), LayerSpec::Relu, store, rng);
        let embed = Layer::new(format!("{prefix}.fc"), LayerSpec::Dense { inputs: conv5 * s * s, outputs: embed }, store, rng);
        let head = Layer::new(format!("{prefix}.head"), LayerSpec::Dense { inputs: embed_width(&embed), outputs: k }, store, rng);
        Self { stages, conv5: c5, embed, head }
    }
}

fn embed_width(l: &Layer) -> usize {
    match l.spec {
        LayerSpec::Dense { outputs, .. } => outputs,
        _ => unreachable!("embedding is dense"),
    }
}

/// Graph nodes of one classifier forward pass.
#[derive(Clone, Debug)]
pub struct ClsNodes {
    /// `[N, K]` logits of each head.
    pub full: NodeId,
    pub half: NodeId,
    pub fused: NodeId,
    /// Perceptual taps: the last two pooled stages and conv5 of the full
    /// branch (before dropout).
    pub taps: Vec<NodeId>,
}

impl ClsNodes {
    pub fn head(&self, head: Head) -> NodeId {
        match head {
            Head::Full => self.full,
            Head::Half => self.half,
            Head::Fused => self.fused,
        }
    }
}

#[derive(Clone, Debug)]
pub struct Classifier<T> {
    pub config: ClsConfig,
    pub store: ParamStore<T>,
    full: Branch,
    half: Branch,
    fuse: Layer,
}

impl<T: Scalar> Classifier<T> {
    pub fn new(config: ClsConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let c = &config;
        let full = Branch::new("full", &c.full_widths, c.full_conv5, c.full_embedding, c.side, c.num_classes, &mut store, &mut rng);
        let half = Branch::new("half", &c.half_widths, c.half_conv5, c.half_embedding, c.side / 2, c.num_classes, &mut store, &mut rng);
        let fuse = Layer::new(
            "fuse",
            LayerSpec::Dense { inputs: c.full_embedding + c.half_embedding, outputs: c.num_classes },
            &mut store,
            &mut rng,
        );
        Ok(Self { config, store, full, half, fuse })
    }

    fn branch(&self, g: &mut Graph<T>, b: &Branch, x: NodeId, mode: Mode, dropout: bool, taps: Option<&mut Vec<NodeId>>) -> Result<(NodeId, NodeId)> {
        let mut h = x;
        let mut outs = Vec::with_capacity(b.stages.len() + 1);
        for st in &b.stages {
            h = st.forward(g, h, &self.store, mode)?;
            outs.push(h);
        }
        h = b.conv5.forward(g, h, &self.store, mode)?;
        outs.push(h);
        if let Some(t) = taps {
            t.extend_from_slice(&outs[outs.len() - 3..]);
        }
        if dropout && mode == Mode::Train && self.config.dropout > 0.0 {
            h = g.dropout(h, self.config.dropout)?;
        }
        let h = g.flatten(h)?;
        let e = forward_layer(g, h, &b.embed, &self.store, mode)?;
        let logits = forward_layer(g, e, &b.head, &self.store, mode)?;
        Ok((e, logits))
    }

    /// Records a forward pass of `x` (`[N, 1, side, side]`).
    pub fn forward(&self, g: &mut Graph<T>, x: NodeId, mode: Mode) -> Result<ClsNodes> {
        self.forward_inner(g, x, mode, true)
    }

    fn forward_inner(&self, g: &mut Graph<T>, x: NodeId, mode: Mode, dropout: bool) -> Result<ClsNodes> {
        let s = self.config.side;
        let xs = g.shape(x);
        if xs.len() != 4 || xs[1..] != [1, s, s] {
            return Err(Error::shape("classifier input", &[xs.first().copied().unwrap_or(0), 1, s, s], xs));
        }
        let mut taps = Vec::new();
        let (ef, full) = self.branch(g, &self.full, x, mode, dropout, Some(&mut taps))?;
        let xh = g.avg_pool2d(x, 2)?;
        let (eh, half) = self.branch(g, &self.half, xh, mode, dropout, None)?;
        let cat = g.concat(ef, eh)?;
        let fused = forward_layer(g, cat, &self.fuse, &self.store, mode)?;
        Ok(ClsNodes { full, half, fused, taps })
    }

    /// Per-sample sum of the three heads' focal losses, `[N]`.
    pub fn loss_node(&self, g: &mut Graph<T>, nodes: &ClsNodes, labels: &[usize]) -> Result<NodeId> {
        let gamma = self.config.gamma;
        let a = g.focal_loss(nodes.full, labels, gamma)?;
        let b = g.focal_loss(nodes.half, labels, gamma)?;
        let c = g.focal_loss(nodes.fused, labels, gamma)?;
        let ab = g.add(a, b)?;
        g.add(ab, c)
    }

    /// Eval-mode probabilities of all three heads for a batch.
    pub fn predict(&self, images: &Tensor<T>) -> Result<Vec<BranchOutputs>> {
        let mut g = Graph::eval();
        let x = g.input(images.clone());
        let nodes = self.forward(&mut g, x, Mode::Eval)?;
        let k = self.config.num_classes;
        let rows = |id: NodeId| -> Vec<ProbabilityVector> {
            let p = crate::graph::softmax_rows(g.value(id).data(), k);
            p.chunks(k).map(|r| ProbabilityVector(r.iter().map(|v| v.as_f64()).collect())).collect()
        };
        let (f, h, u) = (rows(nodes.full), rows(nodes.half), rows(nodes.fused));
        Ok(f.into_iter()
            .zip(h)
            .zip(u)
            .map(|((full, half), fused)| BranchOutputs { full, half, fused })
            .collect())
    }

    /// Eval-mode probabilities of one head.
    pub fn predict_head(&self, images: &Tensor<T>, head: Head) -> Result<Vec<ProbabilityVector>> {
        self.predict_head_with(images, head, NormStats::Running)
    }

    /// Dropout-free probabilities of one head, normalizing with either the
    /// running statistics or the statistics of `images` itself. Running
    /// statistics are never updated.
    pub fn predict_head_with(&self, images: &Tensor<T>, head: Head, stats: NormStats) -> Result<Vec<ProbabilityVector>> {
        let mut g = match stats {
            NormStats::Running => Graph::eval(),
            NormStats::Batch => Graph::train(0),
        };
        g.freeze(&self.store);
        let x = g.input(images.clone());
        let mode = match stats {
            NormStats::Running => Mode::Eval,
            NormStats::Batch => Mode::Train,
        };
        let nodes = self.forward_inner(&mut g, x, mode, false)?;
        let k = self.config.num_classes;
        let p = crate::graph::softmax_rows(g.value(nodes.head(head)).data(), k);
        Ok(p.chunks(k).map(|r| ProbabilityVector(r.iter().map(|v| v.as_f64()).collect())).collect())
    }

    /// Fused-head class predictions for a batch.
    pub fn classify(&self, images: &Tensor<T>) -> Result<Vec<usize>> {
        Ok(self.predict_head(images, Head::Fused)?.iter().map(ProbabilityVector::argmax).collect())
    }
}

/// Normalization statistics for gradient-free prediction passes.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NormStats {
    /// Running averages, as at test time.
    #[default]
    Running,
    /// Statistics of the batch being scored.
    Batch,
}

/// SGD schedule for the classifier.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClsSchedule {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: StepDecay,
    pub momentum: f64,
    pub weight_decay: f64,
}

impl Default for ClsSchedule {
    fn default() -> Self {
        Self {
            epochs: 10,
            batch_size: 63,
            lr: StepDecay { initial: 1e-3, factor: 0.1, every: 8 },
            momentum: 0.9,
            weight_decay: 0.002,
        }
    }
}

impl ClsSchedule {
    pub fn validate(&self, num_classes: usize) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::config("schedule.epochs", "must be positive"));
        }
        if self.batch_size == 0 || !self.batch_size.is_multiple_of(num_classes) {
            return Err(Error::config("schedule.batch_size", format!("must be a positive multiple of {num_classes}")));
        }
        if !(self.lr.initial > 0.0 && self.lr.initial.is_finite()) {
            return Err(Error::config("schedule.lr.initial", "must be positive"));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::config("schedule.momentum", "must lie in [0, 1)"));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(Error::config("schedule.weight_decay", "must be non-negative"));
        }
        Ok(())
    }
}

/// Trains on the observed labels with every sample contributing.
pub fn train_baseline<T: Scalar>(cls: &mut Classifier<T>, split: &[Sample], schedule: &ClsSchedule, seed: u64) -> Result<TrainLog> {
    crate::masked::train_unmasked(cls, split, schedule, seed)
}

/// Fused-head accuracy against clean labels.
pub fn accuracy<T: Scalar>(cls: &Classifier<T>, split: &[Sample]) -> Result<f64> {
    if split.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let idx: Vec<usize> = (0..split.len()).collect();
    let mut correct = 0;
    for chunk in idx.chunks(128) {
        let pred = cls.classify(&batch_images(split, chunk))?;
        correct += chunk.iter().zip(pred).filter(|(&i, p)| split[i].clean_label == *p).count();
    }
    Ok(correct as f64 / split.len() as f64)
}
