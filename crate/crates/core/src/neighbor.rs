//! Asymmetric denoising autoencoder and semantic-neighbor synthesis.
//!
//! The encoder is a stack of stride-2 conv/BN stages (leaky ReLU, tanh on the
//! last) with dropout corruption, followed by a dense map to a tanh-bounded
//! latent code. The decoder mirrors it with transposed convolutions, each
//! followed by residual blocks, which makes it the heavier half. Scale `l = 0`
//! is the image itself; scale `l ≥ 1` is the output of encoder stage `l`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::classifier::Classifier;
use crate::data::{batch_images, Sample};
use crate::error::{Error, Result};
use crate::graph::{Graph, Mode, NodeId};
use crate::layers::{forward_layer, Layer, LayerSpec, Sequential, LEAKY_SLOPE};
use crate::optim::{clip_parameters, rmsprop_step, sgd_step, StepDecay};
use crate::params::ParamStore;
use crate::scalar::Scalar;
use crate::seed;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AEConfig {
    pub side: usize,
    /// Channels of the stride-2 encoder stages.
    pub encoder_widths: Vec<usize>,
    pub latent: usize,
    /// Loss weights per scale, input first; one more than the stage count.
    pub alpha: Vec<f64>,
    pub dropout: f64,
    /// Residual blocks after each decoder stage, deepest first; the last two
    /// entries belong to the full-resolution stage and the output stage.
    pub decoder_res_blocks: Vec<usize>,
    /// Channels of the full-resolution decoder stage.
    pub decoder_top_width: usize,
}

impl Default for AEConfig {
    fn default() -> Self {
        Self {
            side: 32,
            encoder_widths: vec![8, 16, 32, 40],
            latent: 32,
            alpha: vec![4.0, 1.0, 1.0, 1.0, 1.0],
            dropout: 0.1,
            decoder_res_blocks: vec![2, 2, 2, 2, 1],
            decoder_top_width: 8,
        }
    }
}

impl AEConfig {
    pub fn full_scale() -> Self {
        Self {
            side: 112,
            encoder_widths: vec![16, 32, 64, 80],
            latent: 64,
            decoder_top_width: 16,
            ..Self::default()
        }
    }

    /// Number of scale levels `L`, counting the input.
    pub fn scales(&self) -> usize {
        self.encoder_widths.len() + 1
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |f: &str, r: &str| Err(Error::config(format!("autoencoder.{f}"), r));
        let stages = self.encoder_widths.len();
        if stages == 0 || self.encoder_widths.contains(&0) {
            return bad("encoder_widths", "need at least one non-empty stage");
        }
        if !self.side.is_multiple_of(1 << stages) {
            return bad("side", "must be divisible by 2^stages");
        }
        if self.alpha.len() != self.scales() || self.alpha.iter().any(|&a| !(a > 0.0 && a.is_finite())) {
            return bad("alpha", "need one positive weight per scale, input included");
        }
        if self.decoder_res_blocks.len() != stages + 1 {
            return bad("decoder_res_blocks", "need one count per decoder stage plus the output stage");
        }
        if self.latent == 0 || self.decoder_top_width == 0 {
            return bad("latent", "widths must be positive");
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad("dropout", "must lie in [0, 1)");
        }
        Ok(())
    }
}

/// Isotropic Gaussian latent noise.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoiseSpec {
    pub sigma: f64,
    pub seed: u64,
}

#[derive(Clone, Debug)]
struct EncoderStage {
    conv: Layer,
    bn: Layer,
}

#[derive(Clone, Debug)]
pub struct Autoencoder<T> {
    pub config: AEConfig,
    pub store: ParamStore<T>,
    enc: Vec<EncoderStage>,
    enc_fc: Layer,
    dec_fc: Layer,
    /// Transposed conv plus residual blocks, deepest first; the last entry
    /// produces the full-resolution features.
    dec: Vec<(Layer, Sequential)>,
    out_res: Sequential,
    out_conv: Layer,
}

/// Encoder graph nodes.
#[derive(Clone, Debug)]
pub struct Encoded {
    pub code: NodeId,
    /// `z^1 … z^{L-1}`, taken before dropout.
    pub features: Vec<NodeId>,
}

/// Decoder graph nodes.
#[derive(Clone, Debug)]
pub struct Decoded {
    pub image: NodeId,
    /// `ẑ^0 … ẑ^{L-1}`; `ẑ^0` is the image.
    pub recovered: Vec<NodeId>,
}

impl<T: Scalar> Autoencoder<T> {
    pub fn new(config: AEConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let c = &config;
        let mut enc = Vec::new();
        let mut cin = 1;
        for (i, &w) in c.encoder_widths.iter().enumerate() {
            let name = format!("enc.conv{}", i + 1);
            enc.push(EncoderStage {
                conv: Layer::new(&name, LayerSpec::Conv2d { in_ch: cin, out_ch: w, kernel: 3, stride: 2, pad: 1 }, &mut store, &mut rng),
                bn: Layer::new(format!("{name}.bn"), LayerSpec::BatchNorm { channels: w }, &mut store, &mut rng),
            });
            cin = w;
        }
        let bottom = c.side >> c.encoder_widths.len();
        let flat = cin * bottom * bottom;
        let enc_fc = Layer::new("enc.fc", LayerSpec::Dense { inputs: flat, outputs: c.latent }, &mut store, &mut rng);
        let dec_fc = Layer::new("dec.fc", LayerSpec::Dense { inputs: c.latent, outputs: flat }, &mut store, &mut rng);

        // Decoder stage i maps scale (stages - i) to scale (stages - i - 1).
        let mut outs: Vec<usize> = c.encoder_widths.iter().rev().skip(1).copied().collect();
        outs.push(c.decoder_top_width);
        let mut dec = Vec::new();
        let mut cin = *c.encoder_widths.last().unwrap();
        for (i, &w) in outs.iter().enumerate() {
            let name = format!("dec.tconv{}", i + 1);
            let t = Layer::new(
                &name,
                LayerSpec::ConvTranspose2d { in_ch: cin, out_ch: w, kernel: 3, stride: 2, pad: 1, out_pad: 1 },
                &mut store,
                &mut rng,
            );
            let mut res = Sequential::new();
            res.push(format!("{name}.relu"), LayerSpec::Relu, &mut store, &mut rng);
            for r in 0..c.decoder_res_blocks[i] {
                res.push(format!("{name}.res{}", r + 1), LayerSpec::ResidualBlock { channels: w }, &mut store, &mut rng);
            }
            dec.push((t, res));
            cin = w;
        }
        let mut out_res = Sequential::new();
        for r in 0..*c.decoder_res_blocks.last().unwrap() {
            out_res.push(format!("dec.out.res{}", r + 1), LayerSpec::ResidualBlock { channels: cin }, &mut store, &mut rng);
        }
        let out_conv = Layer::new("dec.out", LayerSpec::Conv2d { in_ch: cin, out_ch: 1, kernel: 3, stride: 1, pad: 1 }, &mut store, &mut rng);
        Ok(Self { config, store, enc, enc_fc, dec_fc, dec, out_res, out_conv })
    }

    /// Parameter counts of (encoder, decoder).
    pub fn parameter_split(&self) -> (usize, usize) {
        let enc = self.store.params().iter().filter(|p| p.name.starts_with("enc.")).map(|p| p.value.len()).sum();
        let dec = self.store.params().iter().filter(|p| p.name.starts_with("dec.")).map(|p| p.value.len()).sum();
        (enc, dec)
    }

    pub fn encode_nodes(&self, g: &mut Graph<T>, x: NodeId, mode: Mode) -> Result<Encoded> {
        let s = self.config.side;
        let xs = g.shape(x);
        if xs.len() != 4 || xs[1..] != [1, s, s] {
            return Err(Error::shape("encoder input", &[xs.first().copied().unwrap_or(0), 1, s, s], xs));
        }
        let p = self.config.dropout;
        let train = mode == Mode::Train && p > 0.0;
        let mut h = if train { g.dropout(x, p)? } else { x };
        let mut features = Vec::with_capacity(self.enc.len());
        let last = self.enc.len() - 1;
        for (i, st) in self.enc.iter().enumerate() {
            h = forward_layer(g, h, &st.conv, &self.store, mode)?;
            h = forward_layer(g, h, &st.bn, &self.store, mode)?;
            h = if i == last { g.tanh(h) } else { g.activation(h, crate::graph::Activation::LeakyRelu(LEAKY_SLOPE)) };
            features.push(h);
            if train && i != last {
                h = g.dropout(h, p)?;
            }
        }
        let h = g.flatten(h)?;
        let code = forward_layer(g, h, &self.enc_fc, &self.store, mode)?;
        let code = g.tanh(code);
        Ok(Encoded { code, features })
    }

    pub fn decode_nodes(&self, g: &mut Graph<T>, code: NodeId, mode: Mode) -> Result<Decoded> {
        let c = &self.config;
        let cs = g.shape(code);
        if cs.len() != 2 || cs[1] != c.latent {
            return Err(Error::shape("decoder input", &[cs.first().copied().unwrap_or(0), c.latent], cs));
        }
        let n = cs[0];
        let bottom = c.side >> c.encoder_widths.len();
        let h = forward_layer(g, code, &self.dec_fc, &self.store, mode)?;
        let mut h = g.reshape(h, vec![n, *c.encoder_widths.last().unwrap(), bottom, bottom])?;
        // recovered[l] for l = L-1 down to 1, then the image.
        let mut rev = vec![h];
        for (i, (t, res)) in self.dec.iter().enumerate() {
            h = forward_layer(g, h, t, &self.store, mode)?;
            h = res.forward(g, h, &self.store, mode)?;
            if i + 1 < self.dec.len() {
                rev.push(h);
            }
        }
        h = self.out_res.forward(g, h, &self.store, mode)?;
        h = forward_layer(g, h, &self.out_conv, &self.store, mode)?;
        let image = g.activation(h, crate::graph::Activation::Sigmoid);
        rev.push(image);
        rev.reverse();
        Ok(Decoded { image, recovered: rev })
    }

    /// Latent codes `[N, latent]` and features `z^1 … z^{L-1}` of a batch.
    /// `seed` drives the dropout corruption in train mode.
    pub fn encode(&self, images: &Tensor<T>, mode: Mode, seed: u64) -> Result<(Tensor<T>, Vec<Tensor<T>>)> {
        let mut g = match mode {
            Mode::Train => Graph::train(seed),
            Mode::Eval => Graph::eval(),
        };
        let x = g.input(images.clone());
        let e = self.encode_nodes(&mut g, x, mode)?;
        Ok((g.value(e.code).clone(), e.features.iter().map(|&f| g.value(f).clone()).collect()))
    }

    /// Reconstruction and recoveries `ẑ^0 … ẑ^{L-1}` from latent codes.
    pub fn decode(&self, codes: &Tensor<T>) -> Result<(Tensor<T>, Vec<Tensor<T>>)> {
        let mut g = Graph::eval();
        let z = g.input(codes.clone());
        let d = self.decode_nodes(&mut g, z, Mode::Eval)?;
        Ok((g.value(d.image).clone(), d.recovered.iter().map(|&r| g.value(r).clone()).collect()))
    }

    /// Eval-mode `decode(encode(x))`.
    pub fn reconstruct(&self, images: &Tensor<T>) -> Result<Tensor<T>> {
        let (z, _) = self.encode(images, Mode::Eval, 0)?;
        Ok(self.decode(&z)?.0)
    }

    /// `decode(encode(x) + n)` with `n ~ N(0, σ² I)` drawn from `rng`.
    pub fn synthesize_with<R: Rng + ?Sized>(&self, images: &Tensor<T>, sigma: f64, rng: &mut R) -> Result<Tensor<T>> {
        if !(sigma >= 0.0 && sigma.is_finite()) {
            return Err(Error::config("sigma", "must be finite and non-negative"));
        }
        let (mut z, _) = self.encode(images, Mode::Eval, 0)?;
        self.perturb(&mut z, sigma, rng);
        Ok(self.decode(&z)?.0)
    }

    /// Adds latent noise in place; σ = 0 leaves the codes untouched.
    pub fn perturb<R: Rng + ?Sized>(&self, codes: &mut Tensor<T>, sigma: f64, rng: &mut R) {
        if sigma > 0.0 {
            let normal = Normal::new(0.0, sigma).expect("finite sigma");
            for v in codes.data_mut() {
                *v += T::lit(normal.sample(rng));
            }
        }
    }

    /// Semantic neighbors of a batch under `noise`.
    pub fn synthesize_neighbor(&self, images: &Tensor<T>, noise: &NoiseSpec) -> Result<Tensor<T>> {
        self.synthesize_with(images, noise.sigma, &mut ChaCha8Rng::seed_from_u64(noise.seed))
    }

    /// `factor` × the mean over latent coordinates of their standard
    /// deviation across `split`.
    pub fn calibrate_sigma(&self, split: &[Sample], factor: f64, batch: usize) -> Result<f64> {
        let codes = self.encode_split(split, batch)?;
        let d = self.config.latent;
        let n = codes.len() / d;
        if n < 2 {
            return Err(Error::EmptyBatch);
        }
        let mut total = 0.0;
        for j in 0..d {
            let mean = (0..n).map(|i| codes[i * d + j]).sum::<f64>() / n as f64;
            let var = (0..n).map(|i| (codes[i * d + j] - mean).powi(2)).sum::<f64>() / n as f64;
            total += var.sqrt();
        }
        Ok(factor * total / d as f64)
    }

    /// Eval-mode latent codes of a whole split, row-major `[N, latent]`.
    pub fn encode_split(&self, split: &[Sample], batch: usize) -> Result<Vec<f64>> {
        let idx: Vec<usize> = (0..split.len()).collect();
        let mut out = Vec::with_capacity(split.len() * self.config.latent);
        for chunk in idx.chunks(batch.max(1)) {
            let (z, _) = self.encode(&batch_images(split, chunk), Mode::Eval, 0)?;
            out.extend(z.to_f64_vec());
        }
        Ok(out)
    }
}

/// `Σ_l α_l / |z^l| · ‖z^l − ẑ^l‖²` for one sample (each tensor is a scale).
pub fn loss_ae(z: &[Tensor<f64>], zhat: &[Tensor<f64>], alpha: &[f64]) -> Result<f64> {
    if z.len() != zhat.len() || z.len() != alpha.len() {
        return Err(Error::shape("loss_ae scales", &[z.len(), alpha.len()], &[zhat.len(), alpha.len()]));
    }
    let mut total = 0.0;
    for ((a, b), &w) in z.iter().zip(zhat).zip(alpha) {
        if a.shape() != b.shape() {
            return Err(Error::shape("loss_ae", a.shape(), b.shape()));
        }
        let sq: f64 = a.data().iter().zip(b.data()).map(|(x, y)| (x - y) * (x - y)).sum();
        total += w / a.len() as f64 * sq;
    }
    Ok(total)
}

/// Batched graph form of [`loss_ae`], summed over samples.
pub fn loss_ae_node<T: Scalar>(g: &mut Graph<T>, z: &[NodeId], zhat: &[NodeId], alpha: &[f64]) -> Result<NodeId> {
    if z.len() != zhat.len() || z.len() != alpha.len() {
        return Err(Error::shape("loss_ae scales", &[z.len(), alpha.len()], &[zhat.len(), alpha.len()]));
    }
    let mut total: Option<NodeId> = None;
    for ((&a, &b), &w) in z.iter().zip(zhat).zip(alpha) {
        let per = g.value(a).per_item() as f64;
        let d = g.sq_dist(a, b)?;
        let term = g.scale(d, T::lit(w / per));
        total = Some(match total {
            Some(t) => g.add(t, term)?,
            None => term,
        });
    }
    total.ok_or(Error::EmptyBatch)
}

/// Frozen classifier used as a feature-space metric.
#[derive(Clone, Copy, Debug)]
pub struct PerceptualExtractor<'a, T> {
    pub classifier: &'a Classifier<T>,
    pub tap_weights: [f64; 3],
}

impl<'a, T: Scalar> PerceptualExtractor<'a, T> {
    pub fn new(classifier: &'a Classifier<T>, tap_weights: [f64; 3]) -> Self {
        Self { classifier, tap_weights }
    }

    /// Tap activations, eval-normalized, with the classifier frozen.
    fn taps(&self, g: &mut Graph<T>, x: NodeId) -> Result<Vec<NodeId>> {
        g.freeze(&self.classifier.store);
        Ok(self.classifier.forward(g, x, Mode::Eval)?.taps)
    }
}

/// `λ_pixel · mean((rec − I)²) + λ_perc · Σ_j w_j · mean((C_j(rec) − C_j(I))²)`
/// per sample, summed over the batch; `C_j` are the extractor taps.
pub fn loss_rec_node<T: Scalar>(
    g: &mut Graph<T>,
    image: NodeId,
    rec: NodeId,
    extractor: Option<&PerceptualExtractor<T>>,
    lambda_pixel: f64,
    lambda_perc: f64,
) -> Result<NodeId> {
    let ex = extractor.ok_or_else(|| Error::Missing("perceptual extractor for the reconstruction loss".into()))?;
    let per = g.value(image).per_item() as f64;
    let d = g.sq_dist(rec, image)?;
    let mut total = g.scale(d, T::lit(lambda_pixel / per));
    if lambda_perc != 0.0 {
        let fixed = g.detach(image);
        let real = ex.taps(g, fixed)?;
        let fake = ex.taps(g, rec)?;
        for ((&r, &f), &w) in real.iter().zip(&fake).zip(&ex.tap_weights) {
            let r = g.detach(r);
            let per = g.value(r).per_item() as f64;
            let d = g.sq_dist(f, r)?;
            let term = g.scale(d, T::lit(lambda_perc * w / per));
            total = g.add(total, term)?;
        }
    }
    Ok(total)
}

/// Evaluates [`loss_rec_node`] for a batch without recording gradients.
pub fn loss_rec<T: Scalar>(
    images: &Tensor<T>,
    recs: &Tensor<T>,
    extractor: Option<&PerceptualExtractor<T>>,
    lambda_pixel: f64,
    lambda_perc: f64,
) -> Result<f64> {
    let mut g = Graph::eval();
    let i = g.input(images.clone());
    let r = g.input(recs.clone());
    let l = loss_rec_node(&mut g, i, r, extractor, lambda_pixel, lambda_perc)?;
    Ok(g.value(l).item().as_f64())
}

/// Convolutional critic with an unbounded scalar output per image.
#[derive(Clone, Debug)]
pub struct Discriminator<T> {
    pub store: ParamStore<T>,
    net: Sequential,
}

impl<T: Scalar> Discriminator<T> {
    /// Three stride-2 conv stages with leaky ReLU and a dense scalar head.
    pub fn new(side: usize, widths: [usize; 3], seed: u64) -> Result<Self> {
        if !side.is_multiple_of(8) {
            return Err(Error::config("discriminator.side", "must be divisible by 8"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let mut net = Sequential::new();
        let mut cin = 1;
        for (i, &w) in widths.iter().enumerate() {
            net.push(format!("critic.conv{}", i + 1), LayerSpec::Conv2d { in_ch: cin, out_ch: w, kernel: 3, stride: 2, pad: 1 }, &mut store, &mut rng)
                .push(format!("critic.act{}", i + 1), LayerSpec::LeakyRelu { slope: LEAKY_SLOPE }, &mut store, &mut rng);
            cin = w;
        }
        let s = side / 8;
        net.push("critic.flatten", LayerSpec::Flatten, &mut store, &mut rng)
            .push("critic.head", LayerSpec::Dense { inputs: cin * s * s, outputs: 1 }, &mut store, &mut rng);
        Ok(Self { store, net })
    }

    /// `[N, 1]` critic scores.
    pub fn score_node(&self, g: &mut Graph<T>, x: NodeId) -> Result<NodeId> {
        self.net.forward(g, x, &self.store, Mode::Eval)
    }

    pub fn score(&self, images: &Tensor<T>) -> Result<Vec<f64>> {
        let mut g = Graph::eval();
        let x = g.input(images.clone());
        let s = self.score_node(&mut g, x)?;
        Ok(g.value(s).to_f64_vec())
    }
}

/// Critic loss `Σ D(fake) − Σ D(real)` over a batch.
pub fn loss_adv_d_node<T: Scalar>(g: &mut Graph<T>, disc: &Discriminator<T>, real: NodeId, fake: NodeId) -> Result<NodeId> {
    let f = disc.score_node(g, fake)?;
    let r = disc.score_node(g, real)?;
    let (f, r) = (g.sum(f), g.sum(r));
    g.sub(f, r)
}

/// Generator loss `−Σ D(fake)`; the critic is frozen.
pub fn loss_adv_g_node<T: Scalar>(g: &mut Graph<T>, disc: &Discriminator<T>, fake: NodeId) -> Result<NodeId> {
    g.freeze(&disc.store);
    let f = disc.score_node(g, fake)?;
    let s = g.sum(f);
    Ok(g.scale(s, T::lit(-1.0)))
}

pub fn loss_adv_d<T: Scalar>(real: &Tensor<T>, fake: &Tensor<T>, disc: &Discriminator<T>) -> Result<f64> {
    let f: f64 = disc.score(fake)?.iter().sum();
    let r: f64 = disc.score(real)?.iter().sum();
    Ok(f - r)
}

pub fn loss_adv_g<T: Scalar>(fake: &Tensor<T>, disc: &Discriminator<T>) -> Result<f64> {
    Ok(-disc.score(fake)?.iter().sum::<f64>())
}

/// `λ_AE · Loss_AE + λ_Adv · Loss_Adv^G + λ_Rec · Loss_Rec`.
pub fn loss_generator_total(loss_ae: f64, loss_adv_g: f64, loss_rec: f64, lambda_ae: f64, lambda_adv: f64, lambda_rec: f64) -> f64 {
    lambda_ae * loss_ae + lambda_adv * loss_adv_g + lambda_rec * loss_rec
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PretrainSchedule {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: StepDecay,
    pub momentum: f64,
    pub weight_decay: f64,
    #[serde(default)]
    pub optimizer: PretrainOptimizer,
}

/// Update rule for autoencoder pretraining.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PretrainOptimizer {
    /// Momentum SGD with weight decay.
    #[default]
    Sgd,
    /// RMSprop; momentum and weight decay are ignored.
    Rmsprop,
    /// Adam; momentum and weight decay are ignored.
    Adam,
}

impl Default for PretrainSchedule {
    fn default() -> Self {
        Self {
            epochs: 3,
            batch_size: 32,
            lr: StepDecay { initial: 1e-3, factor: 0.1, every: 10 },
            momentum: 0.9,
            weight_decay: 4e-4,
            optimizer: PretrainOptimizer::Adam,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RefineSchedule {
    pub epochs: usize,
    pub batch_size: usize,
    pub generator_lr: f64,
    pub critic_lr: f64,
    pub clip: f64,
    /// Generator steps per critic step after the first epoch.
    pub critic_every: usize,
    pub lambda_ae: StepDecay,
    pub lambda_adv: f64,
    pub lambda_rec: f64,
    pub lambda_pixel: f64,
    pub lambda_perc: f64,
    pub tap_weights: [f64; 3],
    pub critic_widths: [usize; 3],
}

impl Default for RefineSchedule {
    fn default() -> Self {
        Self {
            epochs: 1,
            batch_size: 32,
            generator_lr: 1e-4,
            critic_lr: 2e-5,
            clip: 0.01,
            critic_every: 10,
            lambda_ae: StepDecay { initial: 1e-3, factor: 0.1, every: 20 },
            lambda_adv: 5.0,
            lambda_rec: 1.0,
            lambda_pixel: 1.0,
            lambda_perc: 1.0,
            tap_weights: [100.0, 0.1, 0.001],
            critic_widths: [8, 16, 32],
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PretrainLog {
    /// Mean per-sample `Loss_AE` of each epoch.
    pub epoch_loss: Vec<f64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RefineLog {
    /// Mean per-sample generator loss of each epoch.
    pub generator_loss: Vec<f64>,
    /// Mean per-sample critic loss of each epoch (NaN if no critic step).
    pub critic_loss: Vec<f64>,
    pub generator_steps: usize,
    pub critic_steps: usize,
    /// Critic step indices, as generator-step counts at which they ran.
    pub critic_schedule: Vec<usize>,
    /// Largest absolute critic weight after each critic step.
    pub critic_max_abs: Vec<f64>,
}

fn shuffled(n: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    use rand::seq::SliceRandom;
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(rng);
    idx
}

fn check_finite(v: f64, stage: &str, step: usize) -> Result<()> {
    if v.is_finite() {
        Ok(())
    } else {
        Err(Error::Divergence { stage: stage.into(), step })
    }
}

/// One denoising forward: corrupted encode, decode, and the multi-scale
/// loss against the clean image and detached encoder features.
fn ae_loss_nodes<T: Scalar>(ae: &Autoencoder<T>, g: &mut Graph<T>, x: NodeId) -> Result<(NodeId, Decoded)> {
    let enc = ae.encode_nodes(g, x, Mode::Train)?;
    let dec = ae.decode_nodes(g, enc.code, Mode::Train)?;
    let mut targets = vec![x];
    for &f in &enc.features {
        targets.push(g.detach(f));
    }
    let l = loss_ae_node(g, &targets, &dec.recovered, &ae.config.alpha)?;
    Ok((l, dec))
}

/// Stage one: `Loss_AE` summed over each batch.
pub fn pretrain_ae<T: Scalar>(ae: &mut Autoencoder<T>, split: &[Sample], schedule: &PretrainSchedule, seed: u64) -> Result<PretrainLog> {
    if split.is_empty() || schedule.batch_size == 0 {
        return Err(Error::EmptyBatch);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed::derive(seed, "ae-pretrain-order"));
    let mut log = PretrainLog::default();
    let mut step = 0;
    for epoch in 0..schedule.epochs {
        let lr = schedule.lr.at(epoch);
        let mut total = 0.0;
        for chunk in shuffled(split.len(), &mut rng).chunks(schedule.batch_size) {
            let mut g = Graph::train(seed::derive_indexed(seed, "ae-pretrain-dropout", step as u64));
            let x = g.input(batch_images(split, chunk));
            let (loss, _) = ae_loss_nodes(ae, &mut g, x)?;
            let v = g.value(loss).item().as_f64();
            check_finite(v, "autoencoder pretraining", step)?;
            total += v;
            let grads = g.backward(loss)?;
            ae.store.accumulate(&grads);
            match schedule.optimizer {
                PretrainOptimizer::Sgd => sgd_step(&mut ae.store, lr, schedule.momentum, schedule.weight_decay)?,
                PretrainOptimizer::Rmsprop => rmsprop_step(&mut ae.store, lr)?,
                PretrainOptimizer::Adam => crate::optim::adam_step(&mut ae.store, lr)?,
            }
            ae.store.apply_stat_updates(g.stat_updates(), T::lit(crate::layers::BN_MOMENTUM));
            step += 1;
        }
        log.epoch_loss.push(total / split.len() as f64);
    }
    Ok(log)
}

/// Stage two: RMSprop on the joint generator loss against a clipped WGAN
/// critic. The critic trains on every generator step of the first epoch and
/// once per `critic_every` generator steps afterwards.
pub fn refine_ae<T: Scalar>(
    ae: &mut Autoencoder<T>,
    disc: &mut Discriminator<T>,
    extractor: Option<&PerceptualExtractor<T>>,
    split: &[Sample],
    schedule: &RefineSchedule,
    seed: u64,
) -> Result<RefineLog> {
    let ex = extractor.ok_or_else(|| Error::Missing("perceptual extractor for refinement".into()))?;
    if split.len() < 2 || schedule.batch_size == 0 {
        return Err(Error::EmptyBatch);
    }
    if schedule.critic_every == 0 || schedule.clip <= 0.0 {
        return Err(Error::config("refine.critic_every", "critic cadence and clip must be positive"));
    }
    let frozen_before = ex.classifier.store.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(seed::derive(seed, "ae-refine-order"));
    let mut log = RefineLog::default();
    let mut gen_step = 0usize;
    for epoch in 0..schedule.epochs {
        let lambda_ae = schedule.lambda_ae.at(epoch);
        let (mut g_total, mut d_total, mut d_count) = (0.0, 0.0, 0usize);
        let order = shuffled(split.len(), &mut rng);
        let partners = shuffled(split.len(), &mut rng);
        for (b, chunk) in order.chunks(schedule.batch_size).enumerate() {
            let critic_turn = epoch == 0 || gen_step.is_multiple_of(schedule.critic_every);
            if critic_turn {
                // Fake from one batch, real from an independent one.
                let fake = ae.reconstruct(&batch_images(split, chunk))?;
                let start = (b * schedule.batch_size) % split.len();
                let real_idx: Vec<usize> = (0..chunk.len()).map(|i| partners[(start + i) % split.len()]).collect();
                let mut g = Graph::train(0);
                g.freeze(&ae.store);
                let f = g.input(fake);
                let r = g.input(batch_images(split, &real_idx));
                let l = loss_adv_d_node(&mut g, disc, r, f)?;
                let v = g.value(l).item().as_f64();
                check_finite(v, "critic", log.critic_steps)?;
                d_total += v;
                d_count += chunk.len();
                let grads = g.backward(l)?;
                disc.store.accumulate(&grads);
                rmsprop_step(&mut disc.store, schedule.critic_lr)?;
                clip_parameters(&mut disc.store, schedule.clip);
                log.critic_max_abs.push(disc.store.params().iter().map(|p| p.value.max_abs().as_f64()).fold(0.0, f64::max));
                log.critic_schedule.push(gen_step);
                log.critic_steps += 1;
            }

            let mut g = Graph::train(seed::derive_indexed(seed, "ae-refine-dropout", gen_step as u64));
            let x = g.input(batch_images(split, chunk));
            let (l_ae, dec) = ae_loss_nodes(ae, &mut g, x)?;
            let l_adv = loss_adv_g_node(&mut g, disc, dec.image)?;
            let l_rec = loss_rec_node(&mut g, x, dec.image, Some(ex), schedule.lambda_pixel, schedule.lambda_perc)?;
            let a = g.scale(l_ae, T::lit(lambda_ae));
            let b2 = g.scale(l_adv, T::lit(schedule.lambda_adv));
            let c = g.scale(l_rec, T::lit(schedule.lambda_rec));
            let ab = g.add(a, b2)?;
            let total = g.add(ab, c)?;
            let v = g.value(total).item().as_f64();
            check_finite(v, "autoencoder refinement", gen_step)?;
            g_total += v;
            let grads = g.backward(total)?;
            ae.store.accumulate(&grads);
            rmsprop_step(&mut ae.store, schedule.generator_lr)?;
            ae.store.apply_stat_updates(g.stat_updates(), T::lit(crate::layers::BN_MOMENTUM));
            gen_step += 1;
            log.generator_steps += 1;
        }
        log.generator_loss.push(g_total / split.len() as f64);
        log.critic_loss.push(if d_count > 0 { d_total / d_count as f64 } else { f64::NAN });
    }
    debug_assert!(ex.classifier.store.values_equal(&frozen_before));
    Ok(log)
}

/// Mean per-sample perceptual part of `Loss_Rec` of the eval-mode
/// reconstructions of `split`.
pub fn perceptual_loss<T: Scalar>(ae: &Autoencoder<T>, extractor: &PerceptualExtractor<T>, split: &[Sample], batch: usize) -> Result<f64> {
    let idx: Vec<usize> = (0..split.len()).collect();
    let mut total = 0.0;
    for chunk in idx.chunks(batch.max(1)) {
        let x = batch_images(split, chunk);
        let r = ae.reconstruct(&x)?;
        total += loss_rec(&x, &r, Some(extractor), 0.0, 1.0)?;
    }
    Ok(total / split.len() as f64)
}
