//! Checkpoint directories: `DIR/align` holds the three modality experts and
//! the whitening matrix, `DIR/prior` the three diffusion priors. Each has a
//! `manifest.json` (format, version, config hash, step, the full config and
//! a SHA-256 index of its CGTN files).

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::contrastive::{ModalityExpert, Temperature};
use crate::error::{Error, Result};
use crate::modality::Modality;
use crate::params::ParamStore;
use crate::prior::PriorNetwork;
use crate::seed::derive_seed;
use crate::store::{self, FileEntry};
use crate::tensor::Tensor;

pub const CHECKPOINT_FORMAT: &str = "cogcap-checkpoint";
/// Semantic version; a reader accepts any manifest with the same major.
pub const CHECKPOINT_VERSION: &str = "1.0.0";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointManifest {
    pub format: String,
    pub version: String,
    /// `align` or `prior`.
    pub kind: String,
    /// Section hash of `config` for this kind.
    pub config_hash: String,
    /// Optimizer steps taken per modality.
    pub step: u64,
    pub config: RunConfig,
    pub files: Vec<FileEntry>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AlignmentCheckpoint {
    /// In [`Modality::ALL`] order.
    pub experts: Vec<ModalityExpert>,
    pub whitening: Tensor,
    pub step: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PriorCheckpoint {
    /// In [`Modality::ALL`] order.
    pub priors: Vec<PriorNetwork>,
    pub step: u64,
}

pub fn align_dir(root: &Path) -> PathBuf {
    root.join("align")
}

pub fn prior_dir(root: &Path) -> PathBuf {
    root.join("prior")
}

/// Seed of the prior for one modality.
pub fn prior_seed(master: u64, m: Modality) -> u64 {
    derive_seed(master, &format!("prior/{}", m.name()))
}

fn major(version: &str) -> Option<&str> {
    version.split('.').next()
}

/// Reads and checks the manifest of one checkpoint kind under `root`.
pub fn read_manifest(root: &Path, kind: &str) -> Result<CheckpointManifest> {
    let dir = root.join(kind);
    let path = dir.join("manifest.json");
    if !path.exists() {
        return Err(Error::MissingCheckpoint(dir));
    }
    let m: CheckpointManifest = store::read_json(&path)?;
    if m.format != CHECKPOINT_FORMAT || m.kind != kind || major(&m.version) != major(CHECKPOINT_VERSION) {
        return Err(Error::Format(format!(
            "{} is a {} {} checkpoint v{}, expected {CHECKPOINT_FORMAT} {kind} v{CHECKPOINT_VERSION}",
            path.display(),
            m.format,
            m.kind,
            m.version
        )));
    }
    let own = section_hash(&m.config, kind);
    if own != m.config_hash {
        return Err(Error::Integrity {
            path,
            reason: "stored config does not match the recorded hash".into(),
        });
    }
    Ok(m)
}

fn section_hash(cfg: &RunConfig, kind: &str) -> String {
    if kind == "align" {
        cfg.align_hash()
    } else {
        cfg.prior_hash()
    }
}

fn check_config(m: &CheckpointManifest, cfg: &RunConfig, kind: &str) -> Result<()> {
    if m.config_hash != section_hash(cfg, kind) {
        return Err(Error::CheckpointMismatch(format!(
            "{kind} checkpoint was written under a different configuration"
        )));
    }
    Ok(())
}

fn write_kind(root: &Path, kind: &str, cfg: &RunConfig, step: u64, tensors: &[(String, &Tensor)]) -> Result<()> {
    let dir = root.join(kind);
    std::fs::create_dir_all(&dir)?;
    let files = tensors
        .iter()
        .map(|(name, t)| store::write_tensor(&dir, name, t))
        .collect::<Result<Vec<_>>>()?;
    let manifest = CheckpointManifest {
        format: CHECKPOINT_FORMAT.into(),
        version: CHECKPOINT_VERSION.into(),
        kind: kind.into(),
        config_hash: section_hash(cfg, kind),
        step,
        config: cfg.clone(),
        files,
    };
    store::write_json(&dir.join("manifest.json"), &manifest)
}

/// Fills `target` from the manifest entries `{prefix}{name}`, requiring the
/// stored shapes to match.
fn fill(dir: &Path, files: &[FileEntry], prefix: &str, target: &mut ParamStore) -> Result<()> {
    let names: Vec<String> = target.names().to_vec();
    for (name, t) in names.iter().zip(target.tensors_mut()) {
        *t = read_shaped(dir, files, &format!("{prefix}{name}"), t.shape())?;
    }
    Ok(())
}

fn read_shaped(dir: &Path, files: &[FileEntry], name: &str, shape: &[usize]) -> Result<Tensor> {
    let entry = store::find(files, name)?;
    if entry.shape != shape {
        return Err(Error::CheckpointMismatch(format!(
            "{name} is stored as {:?} but the configuration implies {shape:?}",
            entry.shape
        )));
    }
    store::read_tensor(dir, entry)
}

fn vec_tensor(v: &[f64]) -> Tensor {
    Tensor::new(vec![v.len()], v.to_vec()).unwrap()
}

pub fn save_alignment(root: &Path, cfg: &RunConfig, ck: &AlignmentCheckpoint) -> Result<()> {
    if ck.experts.len() != Modality::ALL.len() {
        return Err(Error::InvalidArgument("an alignment checkpoint holds one expert per modality".into()));
    }
    let stats: Vec<(Tensor, Tensor, Tensor)> = ck
        .experts
        .iter()
        .map(|e| {
            (
                vec_tensor(&e.encoder.running_mean),
                vec_tensor(&e.encoder.running_var),
                Tensor::scalar(e.temperature.log_inv_temp),
            )
        })
        .collect();
    let mut tensors: Vec<(String, &Tensor)> = vec![("whitening".into(), &ck.whitening)];
    for (e, (mean, var, temp)) in ck.experts.iter().zip(&stats) {
        let m = e.modality.name();
        for (n, t) in e.encoder.params.iter() {
            tensors.push((format!("{m}.encoder.{n}"), t));
        }
        tensors.push((format!("{m}.encoder.running_mean"), mean));
        tensors.push((format!("{m}.encoder.running_var"), var));
        for (n, t) in e.embedder.params.iter() {
            tensors.push((format!("{m}.embedder.{n}"), t));
        }
        for (n, t) in e.projection.params.iter() {
            tensors.push((format!("{m}.projection.{n}"), t));
        }
        tensors.push((format!("{m}.log_inv_temp"), temp));
    }
    write_kind(root, "align", cfg, ck.step, &tensors)
}

/// Loads the experts, refusing a checkpoint written under a configuration
/// whose alignment sections differ from `cfg`.
pub fn load_alignment(root: &Path, cfg: &RunConfig) -> Result<AlignmentCheckpoint> {
    let manifest = read_manifest(root, "align")?;
    check_config(&manifest, cfg, "align")?;
    let dir = align_dir(root);
    let files = &manifest.files;
    let c = cfg.encoder.channels;
    let whitening = read_shaped(&dir, files, "whitening", &[c, c])?;
    let mut experts = Vec::new();
    for m in Modality::ALL {
        let name = m.name();
        let mut e = ModalityExpert::init(m, cfg.encoder.clone(), cfg.data.target_dim, cfg.seed)?;
        fill(&dir, files, &format!("{name}.encoder."), &mut e.encoder.params)?;
        let ch = cfg.encoder.conv_channels;
        e.encoder.running_mean = read_shaped(&dir, files, &format!("{name}.encoder.running_mean"), &[ch])?.into_data();
        e.encoder.running_var = read_shaped(&dir, files, &format!("{name}.encoder.running_var"), &[ch])?.into_data();
        fill(&dir, files, &format!("{name}.embedder."), &mut e.embedder.params)?;
        fill(&dir, files, &format!("{name}.projection."), &mut e.projection.params)?;
        e.temperature = Temperature {
            log_inv_temp: read_shaped(&dir, files, &format!("{name}.log_inv_temp"), &[1])?.item(),
        };
        experts.push(e);
    }
    Ok(AlignmentCheckpoint {
        experts,
        whitening,
        step: manifest.step,
    })
}

pub fn save_priors(root: &Path, cfg: &RunConfig, ck: &PriorCheckpoint) -> Result<()> {
    if ck.priors.len() != Modality::ALL.len() {
        return Err(Error::InvalidArgument("a prior checkpoint holds one prior per modality".into()));
    }
    let extras: Vec<(Tensor, Tensor, Tensor)> = ck
        .priors
        .iter()
        .map(|p| {
            (
                vec_tensor(&p.null_condition),
                vec_tensor(&p.target_mean),
                Tensor::scalar(p.target_scale),
            )
        })
        .collect();
    let mut tensors: Vec<(String, &Tensor)> = Vec::new();
    for (m, (p, (null, mean, scale))) in Modality::ALL.iter().zip(ck.priors.iter().zip(&extras)) {
        let m = m.name();
        for (n, t) in p.params.iter() {
            tensors.push((format!("{m}.net.{n}"), t));
        }
        tensors.push((format!("{m}.null_condition"), null));
        tensors.push((format!("{m}.target_mean"), mean));
        tensors.push((format!("{m}.target_scale"), scale));
    }
    write_kind(root, "prior", cfg, ck.step, &tensors)
}

pub fn load_priors(root: &Path, cfg: &RunConfig) -> Result<PriorCheckpoint> {
    let manifest = read_manifest(root, "prior")?;
    check_config(&manifest, cfg, "prior")?;
    let dir = prior_dir(root);
    let files = &manifest.files;
    let d = cfg.encoder.embed_dim;
    let mut priors = Vec::new();
    for m in Modality::ALL {
        let name = m.name();
        let mut p = PriorNetwork::init(d, &cfg.prior, prior_seed(cfg.seed, m))?;
        fill(&dir, files, &format!("{name}.net."), &mut p.params)?;
        p.null_condition = read_shaped(&dir, files, &format!("{name}.null_condition"), &[d])?.into_data();
        p.target_mean = read_shaped(&dir, files, &format!("{name}.target_mean"), &[d])?.into_data();
        p.target_scale = read_shaped(&dir, files, &format!("{name}.target_scale"), &[1])?.item();
        priors.push(p);
    }
    Ok(PriorCheckpoint {
        priors,
        step: manifest.step,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::EncoderConfig;

    fn small_cfg() -> RunConfig {
        let mut cfg = RunConfig::default();
        cfg.data.channels = 4;
        cfg.data.target_dim = 6;
        cfg.encoder = EncoderConfig {
            channels: 4,
            samples: 50,
            temporal_kernel: 5,
            conv_channels: 3,
            pool_kernel: 2,
            pool_stride: 2,
            embed_dim: 8,
        };
        cfg.prior.width_mult = 1;
        cfg.prior.blocks = 1;
        cfg.validate().unwrap();
        cfg
    }

    fn align_ck(cfg: &RunConfig) -> AlignmentCheckpoint {
        let experts = Modality::ALL
            .iter()
            .map(|&m| {
                let mut e = ModalityExpert::init(m, cfg.encoder.clone(), cfg.data.target_dim, cfg.seed).unwrap();
                e.encoder.running_mean = vec![0.1, -0.2, 1.0 / 3.0];
                e.temperature.log_inv_temp = 2.5 + m.index() as f64;
                e
            })
            .collect();
        AlignmentCheckpoint {
            experts,
            whitening: Tensor::new(vec![4, 4], (0..16).map(|i| i as f64 / 7.0).collect()).unwrap(),
            step: 12,
        }
    }

    #[test]
    fn alignment_roundtrip_is_bit_exact() {
        let cfg = small_cfg();
        let dir = tempfile::tempdir().unwrap();
        let ck = align_ck(&cfg);
        save_alignment(dir.path(), &cfg, &ck).unwrap();
        let back = load_alignment(dir.path(), &cfg).unwrap();
        assert_eq!(back, ck);
    }

    #[test]
    fn prior_roundtrip_is_bit_exact() {
        let cfg = small_cfg();
        let dir = tempfile::tempdir().unwrap();
        let priors = Modality::ALL
            .iter()
            .map(|&m| {
                let mut p = PriorNetwork::init(8, &cfg.prior, prior_seed(cfg.seed, m)).unwrap();
                p.target_scale = 0.123_456_789;
                p
            })
            .collect();
        let ck = PriorCheckpoint { priors, step: 3 };
        save_priors(dir.path(), &cfg, &ck).unwrap();
        assert_eq!(load_priors(dir.path(), &cfg).unwrap(), ck);
    }

    #[test]
    fn missing_checkpoint_is_reported() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(load_alignment(dir.path(), &small_cfg()), Err(Error::MissingCheckpoint(_))));
        assert!(matches!(load_priors(dir.path(), &small_cfg()), Err(Error::MissingCheckpoint(_))));
    }

    #[test]
    fn different_config_is_refused() {
        let cfg = small_cfg();
        let dir = tempfile::tempdir().unwrap();
        save_alignment(dir.path(), &cfg, &align_ck(&cfg)).unwrap();
        let mut other = cfg.clone();
        other.align.epochs += 1;
        assert!(matches!(load_alignment(dir.path(), &other), Err(Error::CheckpointMismatch(_))));
        let mut eval_only = cfg.clone();
        eval_only.eval.bootstrap_resamples = 7;
        load_alignment(dir.path(), &eval_only).unwrap();
    }

    #[test]
    fn corrupted_payload_is_refused() {
        let cfg = small_cfg();
        let dir = tempfile::tempdir().unwrap();
        save_alignment(dir.path(), &cfg, &align_ck(&cfg)).unwrap();
        let path = align_dir(dir.path()).join("image.encoder.tconv.w.cgtn");
        let mut bytes = std::fs::read(&path).unwrap();
        let last = bytes.len() - 1;
        bytes[last] ^= 1;
        std::fs::write(&path, bytes).unwrap();
        assert!(matches!(load_alignment(dir.path(), &cfg), Err(Error::Integrity { .. })));
    }
}
