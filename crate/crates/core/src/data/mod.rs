//! Synthetic multimodal EEG datasets with a tunable amount of information
//! shared between the EEG signal and the modality targets.
//!
//! Generative model, fixed for every dataset:
//!
//! * each image gets a shared latent `s ~ N(0, I_L)` seeded by its image index;
//! * modality target `i` is `normalize(A_i · [√(1−f)·s ; √f·p_i])` with a fixed
//!   random `A_i` (`target_dim × 2L`), a modality-private `p_i ~ N(0, I_L)` and
//!   `f = modality_private_frac`;
//! * an EEG trial is `W · (s ⊗ τ) + ε / √snr`, with a fixed `C × L` mixing
//!   matrix `W`, one smooth temporal profile `τ_l` per latent coordinate
//!   (zero before stimulus onset, unit RMS after it) and fresh unit-variance
//!   noise `ε` for every repetition.
//!
//! `W` has entries of variance `1/L`, so every signal-carrying channel has
//! unit signal power after onset and `snr` is the per-sample signal-to-noise
//! power ratio.

mod preprocess;
mod store;

pub use preprocess::{
    apply_whitening, average_repetitions, average_by_image, baseline_correct, downsample, preprocess_test,
    preprocess_train, whiten_channels, PreprocessConfig, WHITENING_SHRINKAGE,
};
pub use store::DatasetManifest;

use std::f64::consts::PI;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::modality::Modality;
use crate::seed::rng_for;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct EegTrial {
    /// `(channels, samples)`.
    pub signal: Tensor,
    pub concept_index: usize,
    pub image_index: usize,
    pub repetition_index: usize,
    pub subject_index: usize,
}

impl EegTrial {
    pub fn channels(&self) -> usize {
        self.signal.shape()[0]
    }

    pub fn samples(&self) -> usize {
        self.signal.shape()[1]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GenerationConfig {
    pub n_concepts_train: usize,
    pub n_images_per_concept: usize,
    pub n_repetitions: usize,
    pub n_concepts_test: usize,
    pub n_test_repetitions: usize,
    pub channels: usize,
    pub samples: usize,
    /// Stimulus onset; the samples before it form the baseline window.
    pub onset_samples: usize,
    pub latent_dim: usize,
    /// Dimension of each raw modality target vector.
    pub target_dim: usize,
    pub snr: f64,
    pub modality_private_frac: f64,
    /// When set, only these channels carry latent signal; the rest are noise.
    pub signal_channels: Option<Vec<usize>>,
    /// When true, modality `i` only shares latent block `i` (of three disjoint
    /// blocks) with the EEG, so each modality sees a different slice of the
    /// stimulus information.
    pub modality_latent_blocks: bool,
    pub seed: u64,
}

impl Default for GenerationConfig {
    fn default() -> Self {
        Self {
            n_concepts_train: 64,
            n_images_per_concept: 2,
            n_repetitions: 4,
            n_concepts_test: 16,
            n_test_repetitions: 20,
            channels: 16,
            samples: 250,
            onset_samples: 50,
            latent_dim: 16,
            target_dim: 64,
            snr: 4.0,
            modality_private_frac: 0.0,
            signal_channels: None,
            modality_latent_blocks: false,
            seed: 0,
        }
    }
}

impl GenerationConfig {
    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("n_concepts_train", self.n_concepts_train),
            ("n_images_per_concept", self.n_images_per_concept),
            ("n_repetitions", self.n_repetitions),
            ("n_concepts_test", self.n_concepts_test),
            ("n_test_repetitions", self.n_test_repetitions),
            ("channels", self.channels),
            ("samples", self.samples),
            ("latent_dim", self.latent_dim),
            ("target_dim", self.target_dim),
        ];
        for (name, v) in counts {
            if v == 0 {
                return Err(Error::InvalidConfig(format!("{name} must be at least 1")));
            }
        }
        if self.onset_samples >= self.samples {
            return Err(Error::InvalidConfig("onset_samples must be below samples".into()));
        }
        if !(self.snr > 0.0) {
            return Err(Error::InvalidConfig("snr must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.modality_private_frac) {
            return Err(Error::InvalidConfig("modality_private_frac must lie in [0, 1]".into()));
        }
        if let Some(ch) = &self.signal_channels {
            if ch.is_empty() || ch.iter().any(|&c| c >= self.channels) {
                return Err(Error::InvalidConfig("signal_channels out of range".into()));
            }
        }
        if self.modality_latent_blocks && self.latent_dim < 3 {
            return Err(Error::InvalidConfig("modality_latent_blocks needs latent_dim >= 3".into()));
        }
        Ok(())
    }

    pub fn n_train_images(&self) -> usize {
        self.n_concepts_train * self.n_images_per_concept
    }

    pub fn n_images(&self) -> usize {
        self.n_train_images() + self.n_concepts_test
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthDataset {
    pub train_trials: Vec<EegTrial>,
    pub test_trials: Vec<EegTrial>,
    /// One `(n_images, target_dim)` tensor per modality, row = image index.
    pub modality_targets: [Tensor; 3],
    pub generation_config: GenerationConfig,
    pub seed: u64,
}

impl SynthDataset {
    pub fn targets(&self, m: Modality) -> &Tensor {
        &self.modality_targets[m.index()]
    }

    pub fn test_image_indices(&self) -> Vec<usize> {
        let mut v: Vec<usize> = self.test_trials.iter().map(|t| t.image_index).collect();
        v.sort_unstable();
        v.dedup();
        v
    }

    pub fn train_concepts(&self) -> Vec<usize> {
        let mut v: Vec<usize> = self.train_trials.iter().map(|t| t.concept_index).collect();
        v.sort_unstable();
        v.dedup();
        v
    }

    pub fn test_concepts(&self) -> Vec<usize> {
        let mut v: Vec<usize> = self.test_trials.iter().map(|t| t.concept_index).collect();
        v.sort_unstable();
        v.dedup();
        v
    }
}

/// Fixed random structure shared by every trial of a dataset.
pub struct GenerativeStructure {
    /// `(channels, latent)`.
    pub mixing: Tensor,
    /// `(latent, samples)`.
    pub profiles: Tensor,
    /// Per modality `(target_dim, 2·latent)`.
    pub target_maps: [Tensor; 3],
}

fn normal_vec(rng: &mut impl Rng, n: usize, scale: f64) -> Vec<f64> {
    (0..n).map(|_| rng.sample::<f64, _>(StandardNormal) * scale).collect()
}

impl GenerativeStructure {
    pub fn new(cfg: &GenerationConfig) -> Self {
        let (c, l, t) = (cfg.channels, cfg.latent_dim, cfg.samples);
        let mut rng = rng_for(cfg.seed, "structure/mixing");
        let mut mixing = normal_vec(&mut rng, c * l, (1.0 / l as f64).sqrt());
        if let Some(keep) = &cfg.signal_channels {
            for ch in 0..c {
                if !keep.contains(&ch) {
                    mixing[ch * l..(ch + 1) * l].iter_mut().for_each(|v| *v = 0.0);
                }
            }
        }

        let mut rng = rng_for(cfg.seed, "structure/profiles");
        let post = (t - cfg.onset_samples) as f64;
        let mut profiles = vec![0.0; l * t];
        for lat in 0..l {
            let latency = cfg.onset_samples as f64 + rng.gen_range(0.1..0.6) * post;
            let width = rng.gen_range(0.05..0.2) * post;
            let cycles = rng.gen_range(1.0..4.0);
            let row = &mut profiles[lat * t..(lat + 1) * t];
            for (i, v) in row.iter_mut().enumerate().skip(cfg.onset_samples) {
                let d = i as f64 - latency;
                *v = (-d * d / (2.0 * width * width)).exp() * (2.0 * PI * cycles * d / post).cos();
            }
            let rms = (row.iter().map(|v| v * v).sum::<f64>() / post).sqrt();
            row.iter_mut().for_each(|v| *v /= rms);
        }

        let target_maps = Modality::ALL.map(|m| {
            let mut rng = rng_for(cfg.seed, &format!("structure/target_map/{}", m.name()));
            let data = normal_vec(&mut rng, cfg.target_dim * 2 * l, (1.0 / (2 * l) as f64).sqrt());
            Tensor::new(vec![cfg.target_dim, 2 * l], data).unwrap()
        });

        Self {
            mixing: Tensor::new(vec![c, l], mixing).unwrap(),
            profiles: Tensor::new(vec![l, t], profiles).unwrap(),
            target_maps,
        }
    }

    /// Noiseless EEG response `W · (s ⊗ τ)` of one image.
    pub fn template(&self, latent: &[f64]) -> Tensor {
        let (c, l) = (self.mixing.shape()[0], self.mixing.shape()[1]);
        let t = self.profiles.shape()[1];
        let w = self.mixing.data();
        let p = self.profiles.data();
        let mut out = vec![0.0; c * t];
        for ch in 0..c {
            let row = &mut out[ch * t..(ch + 1) * t];
            for lat in 0..l {
                let coef = w[ch * l + lat] * latent[lat];
                if coef == 0.0 {
                    continue;
                }
                for (o, pv) in row.iter_mut().zip(&p[lat * t..(lat + 1) * t]) {
                    *o += coef * pv;
                }
            }
        }
        Tensor::new(vec![c, t], out).unwrap()
    }
}

/// Shared latent of an image.
pub fn image_latent(cfg: &GenerationConfig, image_index: usize) -> Vec<f64> {
    let mut rng = rng_for(cfg.seed, &format!("latent/{image_index}"));
    normal_vec(&mut rng, cfg.latent_dim, 1.0)
}

fn block_range(latent_dim: usize, m: Modality) -> std::ops::Range<usize> {
    let size = latent_dim / 3;
    let start = m.index() * size;
    let end = if m == Modality::Depth { latent_dim } else { start + size };
    start..end
}

fn modality_target(cfg: &GenerationConfig, structure: &GenerativeStructure, m: Modality, image_index: usize, latent: &[f64]) -> Vec<f64> {
    let l = cfg.latent_dim;
    let mut rng = rng_for(cfg.seed, &format!("private/{}/{image_index}", m.name()));
    let private = normal_vec(&mut rng, l, 1.0);
    let shared_w = (1.0 - cfg.modality_private_frac).sqrt();
    let private_w = cfg.modality_private_frac.sqrt();
    let block = block_range(l, m);
    let mut z = Vec::with_capacity(2 * l);
    for (i, s) in latent.iter().enumerate() {
        let keep = !cfg.modality_latent_blocks || block.contains(&i);
        z.push(if keep { shared_w * s } else { 0.0 });
    }
    z.extend(private.iter().map(|p| private_w * p));
    let a = structure.target_maps[m.index()].data();
    let mut out: Vec<f64> = (0..cfg.target_dim)
        .map(|r| a[r * 2 * l..(r + 1) * 2 * l].iter().zip(&z).map(|(x, y)| x * y).sum())
        .collect();
    let norm = out.iter().map(|v| v * v).sum::<f64>().sqrt();
    out.iter_mut().for_each(|v| *v /= norm);
    out
}

fn noisy_trial(
    cfg: &GenerationConfig,
    template: &Tensor,
    split: &str,
    concept_index: usize,
    image_index: usize,
    repetition_index: usize,
) -> EegTrial {
    let mut rng = rng_for(cfg.seed, &format!("noise/{split}/{image_index}/{repetition_index}"));
    let noise_scale = 1.0 / cfg.snr.sqrt();
    let data = template
        .data()
        .iter()
        .map(|v| v + noise_scale * rng.sample::<f64, _>(StandardNormal))
        .collect();
    EegTrial {
        signal: Tensor::new(template.shape().to_vec(), data).unwrap(),
        concept_index,
        image_index,
        repetition_index,
        subject_index: 0,
    }
}

/// Generates a dataset; identical configs give bit-identical datasets.
///
/// Train images are `concept * n_images_per_concept + j` for concepts
/// `0..n_concepts_train`; test concepts follow with one image each.
pub fn generate_dataset(cfg: &GenerationConfig) -> Result<SynthDataset> {
    cfg.validate()?;
    let structure = GenerativeStructure::new(cfg);
    let n_images = cfg.n_images();
    let mut targets: [Vec<f64>; 3] = Default::default();
    let mut train_trials = Vec::with_capacity(cfg.n_train_images() * cfg.n_repetitions);
    let mut test_trials = Vec::with_capacity(cfg.n_concepts_test * cfg.n_test_repetitions);

    for image in 0..n_images {
        let latent = image_latent(cfg, image);
        for m in Modality::ALL {
            targets[m.index()].extend(modality_target(cfg, &structure, m, image, &latent));
        }
        let template = structure.template(&latent);
        if image < cfg.n_train_images() {
            let concept = image / cfg.n_images_per_concept;
            for rep in 0..cfg.n_repetitions {
                train_trials.push(noisy_trial(cfg, &template, "train", concept, image, rep));
            }
        } else {
            let concept = cfg.n_concepts_train + (image - cfg.n_train_images());
            for rep in 0..cfg.n_test_repetitions {
                test_trials.push(noisy_trial(cfg, &template, "test", concept, image, rep));
            }
        }
    }

    let modality_targets = targets.map(|d| Tensor::new(vec![n_images, cfg.target_dim], d).unwrap());
    Ok(SynthDataset {
        train_trials,
        test_trials,
        modality_targets,
        generation_config: cfg.clone(),
        seed: cfg.seed,
    })
}

/// Stacks trial signals into an `(N, C, T)` tensor.
pub fn stack_signals(trials: &[EegTrial]) -> Result<Tensor> {
    let first = trials
        .first()
        .ok_or_else(|| Error::InvalidArgument("no trials to stack".into()))?;
    let (c, t) = (first.channels(), first.samples());
    let mut data = Vec::with_capacity(trials.len() * c * t);
    for tr in trials {
        if tr.signal.shape() != [c, t] {
            return Err(Error::ShapeMismatch {
                op: "stack_signals",
                lhs: vec![c, t],
                rhs: tr.signal.shape().to_vec(),
            });
        }
        data.extend_from_slice(tr.signal.data());
    }
    Tensor::new(vec![trials.len(), c, t], data)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> GenerationConfig {
        GenerationConfig {
            n_concepts_train: 4,
            n_images_per_concept: 2,
            n_repetitions: 3,
            n_concepts_test: 3,
            n_test_repetitions: 5,
            channels: 4,
            samples: 40,
            onset_samples: 8,
            latent_dim: 6,
            target_dim: 10,
            ..Default::default()
        }
    }

    #[test]
    fn desk_counts() {
        let ds = generate_dataset(&GenerationConfig::default()).unwrap();
        assert_eq!(ds.train_trials.len(), 512);
        assert_eq!(ds.test_trials.len(), 320);
        assert_eq!(ds.targets(Modality::Image).shape(), &[144, 64]);
    }

    #[test]
    fn zero_shot_split_and_unique_concepts() {
        let ds = generate_dataset(&small()).unwrap();
        let train = ds.train_concepts();
        assert!(ds.test_concepts().iter().all(|c| !train.contains(c)));
        let mut seen = std::collections::HashMap::new();
        for t in ds.train_trials.iter().chain(&ds.test_trials) {
            assert_eq!(*seen.entry(t.image_index).or_insert(t.concept_index), t.concept_index);
        }
    }

    #[test]
    fn noiseless_repetitions_agree() {
        let cfg = GenerationConfig { snr: 1e30, ..small() };
        let ds = generate_dataset(&cfg).unwrap();
        let reps: Vec<_> = ds.train_trials.iter().filter(|t| t.image_index == 3).collect();
        assert_eq!(reps.len(), 3);
        assert!(reps[0].signal.max_abs_diff(&reps[1].signal) < 1e-12);
        assert!(reps[0].signal.max_abs_diff(&reps[2].signal) < 1e-12);
    }

    #[test]
    fn targets_are_unit_norm() {
        let ds = generate_dataset(&small()).unwrap();
        for m in Modality::ALL {
            let t = ds.targets(m);
            for r in 0..t.rows() {
                let n: f64 = t.row(r).iter().map(|v| v * v).sum();
                assert!((n - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn baseline_window_is_signal_free() {
        let cfg = GenerationConfig { snr: 1e30, ..small() };
        let ds = generate_dataset(&cfg).unwrap();
        let s = &ds.train_trials[0].signal;
        for ch in 0..4 {
            for t in 0..cfg.onset_samples {
                assert!(s.data()[ch * cfg.samples + t].abs() < 1e-12);
            }
        }
    }

    #[test]
    fn silent_channels_carry_only_noise() {
        let cfg = GenerationConfig {
            snr: 1e30,
            signal_channels: Some(vec![0, 1]),
            ..small()
        };
        let ds = generate_dataset(&cfg).unwrap();
        let s = &ds.train_trials[0].signal;
        let energy = |ch: usize| s.row(ch).iter().map(|v| v * v).sum::<f64>();
        assert!(energy(0) > 1e-3 && energy(1) > 1e-3);
        assert!(energy(2) < 1e-20 && energy(3) < 1e-20);
    }

    #[test]
    fn invalid_configs() {
        assert!(generate_dataset(&GenerationConfig { snr: 0.0, ..small() }).is_err());
        assert!(generate_dataset(&GenerationConfig { n_repetitions: 0, ..small() }).is_err());
        assert!(generate_dataset(&GenerationConfig { modality_private_frac: 1.5, ..small() }).is_err());
    }

    /// Permutation-test p-value for "a ridge map from held-in EEG predicts
    /// the matched image target better than a mismatched one".
    fn matched_vs_mismatched_p(frac: f64) -> f64 {
        use nalgebra::DMatrix;
        let cfg = GenerationConfig {
            modality_private_frac: frac,
            ..Default::default()
        };
        let ds = generate_dataset(&cfg).unwrap();
        let n = cfg.n_train_images();
        let width = cfg.channels * cfg.samples;
        let mut x = DMatrix::<f64>::zeros(n, width);
        for t in &ds.train_trials {
            for (j, v) in t.signal.data().iter().enumerate() {
                x[(t.image_index, j)] += v / cfg.n_repetitions as f64;
            }
        }
        let targets = ds.targets(Modality::Image);
        let y = DMatrix::from_row_slice(n, cfg.target_dim, &targets.data()[..n * cfg.target_dim]);
        let half = n / 2;
        let (fit, eval) = (x.rows(0, half).into_owned(), x.rows(half, half).into_owned());
        let k = &fit * fit.transpose();
        let lambda = 0.1 * k.trace() / half as f64;
        let alpha = (k + DMatrix::identity(half, half) * lambda).cholesky().unwrap().solve(&y.rows(0, half).into_owned());
        let pred = eval * fit.transpose() * alpha;
        let row = |m: &DMatrix<f64>, i: usize| m.row(i).iter().copied().collect::<Vec<f64>>();
        let score = |i: usize, j: usize| crate::metrics::pearson(&row(&pred, i), &row(&y, half + j)).unwrap().abs();
        let matched: Vec<f64> = (0..half).map(|i| score(i, i)).collect();
        let mismatched: Vec<f64> = (0..half).map(|i| score(i, (i + 1) % half)).collect();

        let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
        let observed = (mean(&matched) - mean(&mismatched)).abs();
        let mut pooled = [matched, mismatched].concat();
        let mut rng = rng_for(0, "independence");
        let draws = 2000;
        let mut extreme = 0;
        for _ in 0..draws {
            use rand::seq::SliceRandom;
            pooled.shuffle(&mut rng);
            if (mean(&pooled[..half]) - mean(&pooled[half..])).abs() >= observed {
                extreme += 1;
            }
        }
        (1 + extreme) as f64 / (1 + draws) as f64
    }

    #[test]
    fn private_targets_are_independent_of_the_eeg() {
        let p = matched_vs_mismatched_p(1.0);
        assert!(p > 0.01, "p = {p}");
        // The same test detects the dependence when it exists.
        let p = matched_vs_mismatched_p(0.0);
        assert!(p < 0.01, "p = {p}");
    }
}
