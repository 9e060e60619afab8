use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{EegTrial, GenerationConfig, SynthDataset};
use crate::error::{Error, Result};
use crate::modality::Modality;
use crate::store::{self, FileEntry};
use crate::tensor::{IntTensor, Tensor};

pub const DATASET_FORMAT: &str = "cogcap-dataset";
pub const DATASET_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetCounts {
    pub train_trials: usize,
    pub test_trials: usize,
    pub images: usize,
    pub channels: usize,
    pub samples: usize,
    pub target_dim: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub format: String,
    pub version: u32,
    pub seed: u64,
    pub counts: DatasetCounts,
    pub config: GenerationConfig,
    pub files: Vec<FileEntry>,
}

fn meta_tensor(trials: &[EegTrial]) -> Result<IntTensor> {
    let data = trials
        .iter()
        .flat_map(|t| {
            [t.concept_index, t.image_index, t.repetition_index, t.subject_index].map(|v| v as i64)
        })
        .collect();
    IntTensor::new(vec![trials.len(), 4], data)
}

fn unstack(signals: &Tensor, meta: &IntTensor) -> Result<Vec<EegTrial>> {
    let (n, c, t) = (signals.shape()[0], signals.shape()[1], signals.shape()[2]);
    if meta.shape != [n, 4] {
        return Err(Error::Format(format!("meta shape {:?} does not match {n} trials", meta.shape)));
    }
    (0..n)
        .map(|i| {
            let m = &meta.data[i * 4..(i + 1) * 4];
            if m.iter().any(|v| *v < 0) {
                return Err(Error::Format("negative index in trial metadata".into()));
            }
            Ok(EegTrial {
                signal: Tensor::new(vec![c, t], signals.data()[i * c * t..(i + 1) * c * t].to_vec())?,
                concept_index: m[0] as usize,
                image_index: m[1] as usize,
                repetition_index: m[2] as usize,
                subject_index: m[3] as usize,
            })
        })
        .collect()
}

impl SynthDataset {
    /// Writes `manifest.json` plus one CGTN file per tensor group.
    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        let mut files = vec![
            store::write_tensor(dir, "train_signals", &super::stack_signals(&self.train_trials)?)?,
            store::write_int_tensor(dir, "train_meta", &meta_tensor(&self.train_trials)?)?,
            store::write_tensor(dir, "test_signals", &super::stack_signals(&self.test_trials)?)?,
            store::write_int_tensor(dir, "test_meta", &meta_tensor(&self.test_trials)?)?,
        ];
        for m in Modality::ALL {
            files.push(store::write_tensor(dir, &format!("targets_{}", m.name()), self.targets(m))?);
        }
        let first = &self.train_trials[0];
        let manifest = DatasetManifest {
            format: DATASET_FORMAT.into(),
            version: DATASET_VERSION,
            seed: self.seed,
            counts: DatasetCounts {
                train_trials: self.train_trials.len(),
                test_trials: self.test_trials.len(),
                images: self.modality_targets[0].rows(),
                channels: first.channels(),
                samples: first.samples(),
                target_dim: self.modality_targets[0].cols(),
            },
            config: self.generation_config.clone(),
            files,
        };
        store::write_json(&dir.join("manifest.json"), &manifest)
    }

    /// Loads and validates a dataset directory.
    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join("manifest.json");
        if !path.exists() {
            return Err(Error::Format(format!("no dataset manifest at {}", path.display())));
        }
        let manifest: DatasetManifest = store::read_json(&path)?;
        if manifest.format != DATASET_FORMAT || manifest.version != DATASET_VERSION {
            return Err(Error::Format(format!(
                "unsupported dataset format {} v{}",
                manifest.format, manifest.version
            )));
        }
        let c = &manifest.counts;
        let expect = |name: &str, shape: Vec<usize>| -> Result<&FileEntry> {
            let e = store::find(&manifest.files, name)?;
            if e.shape != shape {
                return Err(Error::Format(format!(
                    "{name} has shape {:?}, manifest counts imply {shape:?}",
                    e.shape
                )));
            }
            Ok(e)
        };
        let train_signals = store::read_tensor(dir, expect("train_signals", vec![c.train_trials, c.channels, c.samples])?)?;
        let train_meta = store::read_int_tensor(dir, expect("train_meta", vec![c.train_trials, 4])?)?;
        let test_signals = store::read_tensor(dir, expect("test_signals", vec![c.test_trials, c.channels, c.samples])?)?;
        let test_meta = store::read_int_tensor(dir, expect("test_meta", vec![c.test_trials, 4])?)?;
        let mut targets = Vec::new();
        for m in Modality::ALL {
            let e = expect(&format!("targets_{}", m.name()), vec![c.images, c.target_dim])?;
            targets.push(store::read_tensor(dir, e)?);
        }
        let train_trials = unstack(&train_signals, &train_meta)?;
        let test_trials = unstack(&test_signals, &test_meta)?;
        if train_trials.iter().chain(&test_trials).any(|t| t.image_index >= c.images) {
            return Err(Error::Format("trial references an image without targets".into()));
        }
        let modality_targets: [Tensor; 3] = targets.try_into().expect("three modalities");
        Ok(Self {
            train_trials,
            test_trials,
            modality_targets,
            generation_config: manifest.config,
            seed: manifest.seed,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::super::generate_dataset;
    use super::*;

    fn cfg() -> GenerationConfig {
        GenerationConfig {
            n_concepts_train: 3,
            n_images_per_concept: 2,
            n_repetitions: 2,
            n_concepts_test: 2,
            n_test_repetitions: 3,
            channels: 3,
            samples: 20,
            onset_samples: 4,
            latent_dim: 4,
            target_dim: 6,
            seed: 11,
            ..Default::default()
        }
    }

    #[test]
    fn roundtrip_and_determinism() {
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        let ds = generate_dataset(&cfg()).unwrap();
        ds.save(a.path()).unwrap();
        generate_dataset(&cfg()).unwrap().save(b.path()).unwrap();
        for f in ["manifest.json", "train_signals.cgtn", "targets_depth.cgtn"] {
            assert_eq!(
                std::fs::read(a.path().join(f)).unwrap(),
                std::fs::read(b.path().join(f)).unwrap()
            );
        }
        assert_eq!(SynthDataset::load(a.path()).unwrap(), ds);
    }

    #[test]
    fn tampered_payload_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        generate_dataset(&cfg()).unwrap().save(dir.path()).unwrap();
        let p = dir.path().join("test_signals.cgtn");
        let mut bytes = std::fs::read(&p).unwrap();
        let last = bytes.len() - 1;
        bytes[last] ^= 0x40;
        std::fs::write(&p, bytes).unwrap();
        assert!(matches!(SynthDataset::load(dir.path()), Err(Error::Integrity { .. })));
    }
}
