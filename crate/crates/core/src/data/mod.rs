//! Procedural expression dataset.
//!
//! Images are rendered from `(class, identity, intensity, nuisance)`; see
//! [`render`]. The training split carries observed labels that may differ
//! from the rendered class after [`inject_label_noise`].

mod batches;
mod io;
pub mod render;

use rand::seq::index::sample;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::seed;
use crate::tensor::Tensor;
use render::{Identity, Nuisance};

pub use batches::SelectiveBatches;
pub use io::{export_pgm, export_pgm_grid, load_dataset, save_dataset, FORMAT_VERSION};

/// Frames per sequence group: one low-intensity frame, four near-peak test
/// frames and the peak.
pub const FRAMES_PER_GROUP: usize = 6;
const SEQUENCE_INTENSITIES: [f64; FRAMES_PER_GROUP] = [0.1, 0.6, 0.7, 0.8, 0.9, 1.0];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetSpec {
    pub num_classes: usize,
    pub side: usize,
    pub train_samples: usize,
    pub test_samples: usize,
    /// Sequence groups; their peak frames are part of the training split.
    pub sequence_groups: usize,
    pub identities: usize,
    /// Range of expression intensity for ordinary samples.
    pub intensity_range: [f64; 2],
    /// Maximum absolute additive illumination offset.
    pub illumination: f64,
    /// Maximum absolute translation in pixels.
    pub jitter: f64,
    /// Standard deviation of per-pixel sensor noise.
    pub pixel_noise: f64,
    pub noise_rate: f64,
    /// Training class weights; `None` means balanced.
    #[serde(default)]
    pub imbalance: Option<Vec<f64>>,
    pub seed: u64,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        Self {
            num_classes: 7,
            side: 32,
            train_samples: 1400,
            test_samples: 700,
            sequence_groups: 140,
            identities: 60,
            intensity_range: [0.3, 1.0],
            illumination: 0.1,
            jitter: 1.5,
            pixel_noise: 0.03,
            noise_rate: 0.25,
            imbalance: None,
            seed: 0,
        }
    }
}

impl DatasetSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |f: &str, r: &str| Err(Error::config(format!("dataset.{f}"), r));
        if self.num_classes < 2 {
            return bad("num_classes", "need at least 2 classes");
        }
        if self.side == 0 || !self.side.is_multiple_of(16) {
            return bad("side", "must be a positive multiple of 16");
        }
        if !(0.0..1.0).contains(&self.noise_rate) {
            return bad("noise_rate", "must lie in [0, 1)");
        }
        let [lo, hi] = self.intensity_range;
        if !(0.0 <= lo && lo <= hi && hi <= 1.0) {
            return bad("intensity_range", "must satisfy 0 <= lo <= hi <= 1");
        }
        if self.identities == 0 {
            return bad("identities", "must be positive");
        }
        if self.sequence_groups > self.train_samples {
            return bad("sequence_groups", "peak frames must fit in the training split");
        }
        if self.train_samples == 0 || self.test_samples == 0 {
            return bad("train_samples", "splits must be non-empty");
        }
        for (f, v) in [("illumination", self.illumination), ("jitter", self.jitter), ("pixel_noise", self.pixel_noise)] {
            if !(v.is_finite() && v >= 0.0) {
                return bad(f, "must be finite and non-negative");
            }
        }
        if let Some(w) = &self.imbalance {
            if w.len() != self.num_classes {
                return bad("imbalance", "needs one weight per class");
            }
            if w.iter().any(|&x| !(x.is_finite() && x >= 0.0)) || w.iter().sum::<f64>() <= 0.0 {
                return bad("imbalance", "weights must be non-negative with a positive sum");
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    /// `[1, side, side]`, values in `[0, 1]`.
    pub image: Tensor<f64>,
    pub observed_label: usize,
    pub clean_label: usize,
    pub identity: usize,
    pub intensity: f64,
    pub is_noisy: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Frame {
    pub intensity: f64,
    pub image: Tensor<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SequenceGroup {
    pub clean_label: usize,
    pub identity: usize,
    /// Frames in increasing intensity; the last is the peak.
    pub frames: Vec<Frame>,
    /// Position of the peak frame in the training split.
    pub train_index: usize,
}

impl SequenceGroup {
    pub fn validate(&self, group: usize) -> Result<()> {
        if self.frames.len() != FRAMES_PER_GROUP {
            return Err(Error::MalformedGroup {
                group,
                detail: format!("{} frames, expected {FRAMES_PER_GROUP}", self.frames.len()),
            });
        }
        if self.frames.windows(2).any(|w| w[0].intensity >= w[1].intensity) {
            return Err(Error::MalformedGroup { group, detail: "intensities must increase strictly".into() });
        }
        Ok(())
    }

    pub fn peak(&self) -> &Frame {
        self.frames.last().expect("validated group")
    }

    /// The four frames nearest the peak.
    pub fn test_frames(&self) -> &[Frame] {
        &self.frames[FRAMES_PER_GROUP - 5..FRAMES_PER_GROUP - 1]
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Histograms {
    pub train_observed: Vec<usize>,
    pub train_clean: Vec<usize>,
    pub test: Vec<usize>,
    pub sequences: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub version: u32,
    pub spec: DatasetSpec,
    pub train_count: usize,
    pub test_count: usize,
    pub sequence_count: usize,
    pub noisy_count: usize,
    pub histograms: Histograms,
    /// SHA-256 (hex) of each payload file, keyed by file name.
    pub checksums: std::collections::BTreeMap<String, String>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub train: Vec<Sample>,
    pub test: Vec<Sample>,
    pub sequences: Vec<SequenceGroup>,
    pub manifest: Manifest,
}

impl Dataset {
    pub fn side(&self) -> usize {
        self.manifest.spec.side
    }

    pub fn num_classes(&self) -> usize {
        self.manifest.spec.num_classes
    }

    pub fn noisy_flags(&self) -> Vec<bool> {
        self.train.iter().map(|s| s.is_noisy).collect()
    }

    pub(crate) fn refresh_manifest(&mut self) {
        let k = self.num_classes();
        let hist = |it: &mut dyn Iterator<Item = usize>| {
            let mut h = vec![0; k];
            it.for_each(|c| h[c] += 1);
            h
        };
        self.manifest.train_count = self.train.len();
        self.manifest.test_count = self.test.len();
        self.manifest.sequence_count = self.sequences.len();
        self.manifest.noisy_count = self.train.iter().filter(|s| s.is_noisy).count();
        self.manifest.histograms = Histograms {
            train_observed: hist(&mut self.train.iter().map(|s| s.observed_label)),
            train_clean: hist(&mut self.train.iter().map(|s| s.clean_label)),
            test: hist(&mut self.test.iter().map(|s| s.clean_label)),
            sequences: hist(&mut self.sequences.iter().map(|g| g.clean_label)),
        };
    }
}

/// Stacks the images of `split[idx]` into an `[N, 1, side, side]` batch.
pub fn batch_images<T: Scalar>(split: &[Sample], idx: &[usize]) -> Tensor<T> {
    let side = split[idx[0]].image.shape()[1];
    let mut data = Vec::with_capacity(idx.len() * side * side);
    for &i in idx {
        data.extend(split[i].image.data().iter().map(|&v| T::lit(v)));
    }
    Tensor::new(vec![idx.len(), 1, side, side], data).expect("uniform image sizes")
}

/// Class counts for `n` samples under `weights` (largest-remainder rounding;
/// ties go to the lower class index).
pub fn quota(weights: &[f64], n: usize) -> Vec<usize> {
    let total: f64 = weights.iter().sum();
    let exact: Vec<f64> = weights.iter().map(|w| w / total * n as f64).collect();
    let mut counts: Vec<usize> = exact.iter().map(|e| e.floor() as usize).collect();
    let mut order: Vec<usize> = (0..weights.len()).collect();
    order.sort_by(|&a, &b| (exact[b] - exact[b].floor()).total_cmp(&(exact[a] - exact[a].floor())).then(a.cmp(&b)));
    let missing = n - counts.iter().sum::<usize>();
    for &c in order.iter().take(missing) {
        counts[c] += 1;
    }
    counts
}

fn nuisance<R: Rng>(spec: &DatasetSpec, rng: &mut R) -> Nuisance {
    let sym = |rng: &mut R, a: f64| if a > 0.0 { rng.random_range(-a..=a) } else { 0.0 };
    Nuisance {
        dx: sym(rng, spec.jitter),
        dy: sym(rng, spec.jitter),
        illumination: sym(rng, spec.illumination),
        noise_std: spec.pixel_noise,
        noise_seed: rng.random(),
    }
}

fn image(spec: &DatasetSpec, class: usize, id: &Identity, t: f64, n: &Nuisance) -> Tensor<f64> {
    let side = spec.side;
    Tensor::new(vec![1, side, side], render::render(class, id, t, n, side)).expect("render size")
}

fn shuffled_classes(counts: &[usize], rng: &mut ChaCha8Rng) -> Vec<usize> {
    let mut classes: Vec<usize> = counts.iter().enumerate().flat_map(|(c, &n)| std::iter::repeat_n(c, n)).collect();
    classes.shuffle(rng);
    classes
}

/// Renders all splits, then applies the spec's label noise to the training
/// split.
pub fn generate_dataset(spec: &DatasetSpec) -> Result<Dataset> {
    spec.validate()?;
    let k = spec.num_classes;
    let identities: Vec<Identity> = (0..spec.identities)
        .map(|i| Identity::sample(&mut ChaCha8Rng::seed_from_u64(seed::derive_indexed(spec.seed, "identity", i as u64))))
        .collect();
    let [lo, hi] = spec.intensity_range;

    let weights = spec.imbalance.clone().unwrap_or_else(|| vec![1.0; k]);
    let mut rng = ChaCha8Rng::seed_from_u64(seed::derive(spec.seed, "train"));
    let classes = shuffled_classes(&quota(&weights, spec.train_samples), &mut rng);
    let mut train = Vec::with_capacity(spec.train_samples);
    let mut sequences = Vec::with_capacity(spec.sequence_groups);
    for (i, &class) in classes.iter().enumerate() {
        let identity = rng.random_range(0..spec.identities);
        let id = &identities[identity];
        let n = nuisance(spec, &mut rng);
        if i < spec.sequence_groups {
            let frames: Vec<Frame> = SEQUENCE_INTENSITIES
                .iter()
                .enumerate()
                .map(|(f, &t)| {
                    let nf = Nuisance { noise_seed: seed::derive_indexed(n.noise_seed, "frame", f as u64), ..n.clone() };
                    Frame { intensity: t, image: image(spec, class, id, t, &nf) }
                })
                .collect();
            let peak = frames.last().expect("frames").clone();
            train.push(Sample {
                image: peak.image,
                observed_label: class,
                clean_label: class,
                identity,
                intensity: peak.intensity,
                is_noisy: false,
            });
            sequences.push(SequenceGroup { clean_label: class, identity, frames, train_index: i });
        } else {
            let t = if hi > lo { rng.random_range(lo..=hi) } else { lo };
            train.push(Sample {
                image: image(spec, class, id, t, &n),
                observed_label: class,
                clean_label: class,
                identity,
                intensity: t,
                is_noisy: false,
            });
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed::derive(spec.seed, "test"));
    let classes = shuffled_classes(&quota(&vec![1.0; k], spec.test_samples), &mut rng);
    let test = classes
        .into_iter()
        .map(|class| {
            let identity = rng.random_range(0..spec.identities);
            let n = nuisance(spec, &mut rng);
            let t = if hi > lo { rng.random_range(lo..=hi) } else { lo };
            Sample {
                image: image(spec, class, &identities[identity], t, &n),
                observed_label: class,
                clean_label: class,
                identity,
                intensity: t,
                is_noisy: false,
            }
        })
        .collect();

    inject_label_noise(&mut train, k, spec.noise_rate, seed::derive(spec.seed, "label-noise"))?;
    let mut ds = Dataset {
        train,
        test,
        sequences,
        manifest: Manifest {
            version: FORMAT_VERSION,
            spec: spec.clone(),
            train_count: 0,
            test_count: 0,
            sequence_count: 0,
            noisy_count: 0,
            histograms: Histograms { train_observed: vec![], train_clean: vec![], test: vec![], sequences: vec![] },
            checksums: Default::default(),
        },
    };
    ds.refresh_manifest();
    Ok(ds)
}

/// Flips exactly `round(rate · N)` observed labels, chosen uniformly without
/// replacement, to a uniformly drawn class different from the clean one.
/// Returns the number of flipped samples.
pub fn inject_label_noise(split: &mut [Sample], num_classes: usize, rate: f64, seed: u64) -> Result<usize> {
    if !(0.0..1.0).contains(&rate) {
        return Err(Error::config("noise_rate", "must lie in [0, 1)"));
    }
    if num_classes < 2 {
        return Err(Error::config("num_classes", "need at least 2 classes"));
    }
    let count = (rate * split.len() as f64).round() as usize;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for i in sample(&mut rng, split.len(), count).into_vec() {
        let s = &mut split[i];
        let r = rng.random_range(0..num_classes - 1);
        s.observed_label = if r >= s.clean_label { r + 1 } else { r };
        s.is_noisy = true;
    }
    Ok(count)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quota_tracks_weights() {
        let w = [0.48, 0.25, 0.11, 0.06, 0.05, 0.03, 0.02];
        let q = quota(&w, 1000);
        assert_eq!(q.iter().sum::<usize>(), 1000);
        for (c, &n) in q.iter().enumerate() {
            assert!((n as f64 - w[c] * 1000.0).abs() <= 1.0);
        }
        assert_eq!(quota(&[1.0, 1.0, 1.0], 10), vec![4, 3, 3]);
    }

    #[test]
    fn spec_rejections_name_the_field() {
        let mut s = DatasetSpec { side: 40, ..Default::default() };
        assert!(s.validate().unwrap_err().to_string().contains("side"));
        s.side = 32;
        s.num_classes = 1;
        assert!(s.validate().unwrap_err().to_string().contains("num_classes"));
        s.num_classes = 7;
        s.noise_rate = 1.0;
        assert!(s.validate().unwrap_err().to_string().contains("noise_rate"));
    }
}
