//! Trial preprocessing: baseline correction, block-average downsampling,
//! shrinkage whitening of channels and averaging of repetitions.
//!
//! Order is fixed: `baseline_correct → downsample → whiten`, and test trials
//! are then averaged per image. Whitening and averaging are both linear, so
//! the last two steps commute.

use std::collections::BTreeMap;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use super::EegTrial;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Shrinkage of the channel covariance toward its diagonal.
pub const WHITENING_SHRINKAGE: f64 = 0.1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PreprocessConfig {
    pub baseline_samples: usize,
    pub downsample_factor: usize,
    pub shrinkage: f64,
}

impl Default for PreprocessConfig {
    fn default() -> Self {
        Self {
            baseline_samples: 50,
            downsample_factor: 4,
            shrinkage: WHITENING_SHRINKAGE,
        }
    }
}

impl PreprocessConfig {
    /// Samples per trial after baseline removal and downsampling.
    pub fn output_samples(&self, raw_samples: usize) -> Result<usize> {
        if self.baseline_samples == 0 || self.baseline_samples >= raw_samples {
            return Err(Error::InvalidConfig("baseline_samples must lie in 1..samples".into()));
        }
        let post = raw_samples - self.baseline_samples;
        if self.downsample_factor == 0 || post % self.downsample_factor != 0 {
            return Err(Error::InvalidConfig(format!(
                "downsample_factor {} does not divide {post} post-stimulus samples",
                self.downsample_factor
            )));
        }
        Ok(post / self.downsample_factor)
    }
}

/// Subtracts each channel's mean over the first `baseline_samples` samples and
/// returns only the post-stimulus segment.
pub fn baseline_correct(trial: &EegTrial, baseline_samples: usize) -> Result<EegTrial> {
    let (c, t) = (trial.channels(), trial.samples());
    if baseline_samples == 0 {
        return Err(Error::InvalidArgument("baseline_samples must be positive".into()));
    }
    if baseline_samples >= t {
        return Err(Error::InvalidArgument(format!(
            "baseline window of {baseline_samples} leaves no post-stimulus samples out of {t}"
        )));
    }
    let post = t - baseline_samples;
    let mut out = Vec::with_capacity(c * post);
    for ch in 0..c {
        let row = trial.signal.row(ch);
        let mean = row[..baseline_samples].iter().sum::<f64>() / baseline_samples as f64;
        out.extend(row[baseline_samples..].iter().map(|v| v - mean));
    }
    Ok(EegTrial {
        signal: Tensor::new(vec![c, post], out)?,
        ..trial.clone()
    })
}

/// Block-averages consecutive groups of `factor` samples per channel.
pub fn downsample(trial: &EegTrial, factor: usize) -> Result<EegTrial> {
    let (c, t) = (trial.channels(), trial.samples());
    if factor == 0 || t % factor != 0 {
        return Err(Error::InvalidArgument(format!(
            "downsample factor {factor} does not divide length {t}"
        )));
    }
    let out: Vec<f64> = trial
        .signal
        .data()
        .chunks(factor)
        .map(|b| b.iter().sum::<f64>() / factor as f64)
        .collect();
    Ok(EegTrial {
        signal: Tensor::new(vec![c, t / factor], out)?,
        ..trial.clone()
    })
}

/// Elementwise mean of repetitions of one image.
pub fn average_repetitions(trials: &[EegTrial]) -> Result<EegTrial> {
    let first = trials
        .first()
        .ok_or_else(|| Error::InvalidArgument("no trials to average".into()))?;
    let mut acc = vec![0.0; first.signal.len()];
    for t in trials {
        if t.image_index != first.image_index {
            return Err(Error::InvalidArgument(format!(
                "cannot average image {} with image {}",
                first.image_index, t.image_index
            )));
        }
        if t.signal.shape() != first.signal.shape() {
            return Err(Error::ShapeMismatch {
                op: "average_repetitions",
                lhs: first.signal.shape().to_vec(),
                rhs: t.signal.shape().to_vec(),
            });
        }
        acc.iter_mut().zip(t.signal.data()).for_each(|(a, v)| *a += v);
    }
    let n = trials.len() as f64;
    acc.iter_mut().for_each(|a| *a /= n);
    Ok(EegTrial {
        signal: Tensor::new(first.signal.shape().to_vec(), acc)?,
        repetition_index: 0,
        ..first.clone()
    })
}

/// Groups trials by image index and averages each group; output is sorted by
/// image index.
pub fn average_by_image(trials: &[EegTrial]) -> Result<Vec<EegTrial>> {
    let mut groups: BTreeMap<usize, Vec<EegTrial>> = BTreeMap::new();
    for t in trials {
        groups.entry(t.image_index).or_default().push(t.clone());
    }
    groups.values().map(|g| average_repetitions(g)).collect()
}

/// Estimates the shrunk channel covariance pooled over time and trials and
/// returns its inverse symmetric square root together with the whitened
/// trials. Apply the matrix once; applying it twice yields `Σ^{-1}` scaling.
pub fn whiten_channels(train_trials: &[EegTrial]) -> Result<(Tensor, Vec<EegTrial>)> {
    whiten_channels_with(train_trials, WHITENING_SHRINKAGE)
}

pub fn whiten_channels_with(train_trials: &[EegTrial], shrinkage: f64) -> Result<(Tensor, Vec<EegTrial>)> {
    let c = train_trials
        .first()
        .ok_or_else(|| Error::InvalidArgument("no trials to whiten".into()))?
        .channels();
    if train_trials.len() < c + 1 {
        return Err(Error::InvalidArgument(format!(
            "whitening {c} channels needs at least {} trials, got {}",
            c + 1,
            train_trials.len()
        )));
    }
    let mut mean = vec![0.0; c];
    let mut count = 0usize;
    for tr in train_trials {
        for ch in 0..c {
            mean[ch] += tr.signal.row(ch).iter().sum::<f64>();
        }
        count += tr.samples();
    }
    mean.iter_mut().for_each(|m| *m /= count as f64);

    let mut cov = DMatrix::<f64>::zeros(c, c);
    for tr in train_trials {
        let t = tr.samples();
        let d = tr.signal.data();
        for i in 0..c {
            for j in i..c {
                let mut s = 0.0;
                for k in 0..t {
                    s += (d[i * t + k] - mean[i]) * (d[j * t + k] - mean[j]);
                }
                cov[(i, j)] += s;
            }
        }
    }
    for i in 0..c {
        for j in i..c {
            let v = cov[(i, j)] / (count - 1) as f64;
            cov[(i, j)] = v;
            cov[(j, i)] = v;
        }
    }
    let diag = DMatrix::from_diagonal(&cov.diagonal());
    let shrunk = cov * (1.0 - shrinkage) + diag * shrinkage;

    let eig = shrunk.symmetric_eigen();
    let max_ev = eig.eigenvalues.iter().cloned().fold(0.0, f64::max);
    if eig.eigenvalues.iter().any(|&e| !(e > max_ev * 1e-12) || !e.is_finite()) || max_ev <= 0.0 {
        return Err(Error::LinAlg("channel covariance is singular after shrinkage".into()));
    }
    let inv_sqrt = DMatrix::from_diagonal(&eig.eigenvalues.map(|e| 1.0 / e.sqrt()));
    let w = &eig.eigenvectors * inv_sqrt * eig.eigenvectors.transpose();
    let mut data = Vec::with_capacity(c * c);
    for i in 0..c {
        for j in 0..c {
            // symmetrize away eigen round-off
            data.push(0.5 * (w[(i, j)] + w[(j, i)]));
        }
    }
    let matrix = Tensor::new(vec![c, c], data)?;
    let whitened = apply_whitening(&matrix, train_trials)?;
    Ok((matrix, whitened))
}

/// Left-multiplies every trial signal by the whitening matrix.
pub fn apply_whitening(matrix: &Tensor, trials: &[EegTrial]) -> Result<Vec<EegTrial>> {
    let c = matrix.rows();
    trials
        .iter()
        .map(|tr| {
            if tr.channels() != c {
                return Err(Error::ShapeMismatch {
                    op: "apply_whitening",
                    lhs: matrix.shape().to_vec(),
                    rhs: tr.signal.shape().to_vec(),
                });
            }
            let t = tr.samples();
            let mut out = vec![0.0; c * t];
            crate::autodiff::gemm_nn(matrix.data(), tr.signal.data(), &mut out, c, c, t);
            Ok(EegTrial {
                signal: Tensor::new(vec![c, t], out)?,
                ..tr.clone()
            })
        })
        .collect()
}

fn baseline_and_downsample(trials: &[EegTrial], cfg: &PreprocessConfig) -> Result<Vec<EegTrial>> {
    trials
        .iter()
        .map(|t| downsample(&baseline_correct(t, cfg.baseline_samples)?, cfg.downsample_factor))
        .collect()
}

/// Training-side pipeline; returns the whitening matrix for later reuse.
pub fn preprocess_train(trials: &[EegTrial], cfg: &PreprocessConfig) -> Result<(Tensor, Vec<EegTrial>)> {
    let reduced = baseline_and_downsample(trials, cfg)?;
    whiten_channels_with(&reduced, cfg.shrinkage)
}

/// Test-side pipeline: whitened with the training matrix, then averaged per image.
pub fn preprocess_test(trials: &[EegTrial], whitening: &Tensor, cfg: &PreprocessConfig) -> Result<Vec<EegTrial>> {
    let reduced = baseline_and_downsample(trials, cfg)?;
    average_by_image(&apply_whitening(whitening, &reduced)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn trial(rows: &[Vec<f64>], image: usize) -> EegTrial {
        EegTrial {
            signal: Tensor::from_rows(rows).unwrap(),
            concept_index: 0,
            image_index: image,
            repetition_index: 0,
            subject_index: 0,
        }
    }

    #[test]
    fn baseline_of_constant_is_zero() {
        let t = trial(&[vec![5.0; 6], vec![5.0; 6]], 0);
        let out = baseline_correct(&t, 3).unwrap();
        assert_eq!(out.samples(), 3);
        assert!(out.signal.data().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn baseline_hand_example() {
        let t = trial(&[vec![1.0, 3.0, 2.0, 4.0]], 0);
        let out = baseline_correct(&t, 2).unwrap();
        assert_eq!(out.signal.data(), &[0.0, 2.0]);
        assert!(baseline_correct(&t, 0).is_err());
    }

    #[test]
    fn downsample_examples() {
        let t = trial(&[vec![1.0, 3.0, 5.0, 7.0]], 0);
        assert_eq!(downsample(&t, 1).unwrap(), t);
        assert_eq!(downsample(&t, 2).unwrap().signal.data(), &[2.0, 6.0]);
        assert!(downsample(&t, 3).is_err());
        let dc = trial(&[vec![0.25; 8]], 0);
        assert_eq!(downsample(&dc, 4).unwrap().signal.data(), &[0.25, 0.25]);
    }

    #[test]
    fn averaging_cancels_and_rejects_mixed_images() {
        let a = trial(&[vec![1.0, -2.0]], 3);
        let b = trial(&[vec![-1.0, 2.0]], 3);
        let avg = average_repetitions(&[a.clone(), b]).unwrap();
        assert!(avg.signal.data().iter().all(|v| *v == 0.0));
        assert_eq!(average_repetitions(std::slice::from_ref(&a)).unwrap(), a);
        let other = trial(&[vec![0.0, 0.0]], 4);
        assert!(average_repetitions(&[a, other]).is_err());
    }

    fn noise_trials(n: usize, c: usize, t: usize, scale_ch0: f64, seed: u64) -> Vec<EegTrial> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|i| {
                let rows: Vec<Vec<f64>> = (0..c)
                    .map(|ch| {
                        let s = if ch == 0 { scale_ch0 } else { 1.0 };
                        (0..t).map(|_| { let z: f64 = StandardNormal.sample(&mut rng); s * z }).collect::<Vec<f64>>()
                    })
                    .collect();
                trial(&rows, i)
            })
            .collect()
    }

    #[test]
    fn white_noise_gives_near_identity() {
        let trials = noise_trials(512, 16, 50, 1.0, 1);
        let (w, _) = whiten_channels(&trials).unwrap();
        let mut fro = 0.0;
        for i in 0..16 {
            for j in 0..16 {
                let target = if i == j { 1.0 } else { 0.0 };
                fro += (w.data()[i * 16 + j] - target).powi(2);
            }
        }
        assert!(fro.sqrt() < 0.1, "frobenius distance {}", fro.sqrt());
    }

    #[test]
    fn scaled_channel_is_equalized() {
        let trials = noise_trials(200, 6, 40, 10.0, 2);
        let (_, out) = whiten_channels(&trials).unwrap();
        let var0: f64 = out.iter().flat_map(|t| t.signal.row(0).to_vec()).map(|v| v * v).sum::<f64>()
            / (200.0 * 40.0);
        assert!((var0 - 1.0).abs() < 0.05, "variance {var0}");
    }

    #[test]
    fn whitening_needs_enough_trials() {
        let trials = noise_trials(4, 6, 10, 1.0, 3);
        assert!(whiten_channels(&trials).is_err());
    }

    #[test]
    fn singular_covariance_is_rejected() {
        let trials: Vec<EegTrial> = (0..10).map(|i| trial(&[vec![0.0; 5], vec![0.0; 5]], i)).collect();
        assert!(whiten_channels(&trials).is_err());
    }

    #[test]
    fn whitening_and_test_averaging_commute() {
        let gen = crate::data::GenerationConfig {
            n_concepts_train: 8,
            ..Default::default()
        };
        let ds = crate::data::generate_dataset(&gen).unwrap();
        let cfg = PreprocessConfig::default();
        let (w, _) = preprocess_train(&ds.train_trials, &cfg).unwrap();
        let whiten_first = preprocess_test(&ds.test_trials, &w, &cfg).unwrap();
        let reduced = baseline_and_downsample(&ds.test_trials, &cfg).unwrap();
        let average_first = apply_whitening(&w, &average_by_image(&reduced).unwrap()).unwrap();
        assert_eq!(whiten_first.len(), average_first.len());
        for (a, b) in whiten_first.iter().zip(&average_first) {
            assert_eq!(a.image_index, b.image_index);
            assert!(a.signal.max_abs_diff(&b.signal) <= 1e-12);
        }
    }
}
