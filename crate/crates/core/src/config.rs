//! Run configuration: one JSON document holding every section, with defaults
//! for every field and unknown keys rejected.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::contrastive::AlignConfig;
use crate::data::{GenerationConfig, PreprocessConfig};
use crate::encoder::EncoderConfig;
use crate::error::{Error, Result};
use crate::prior::PriorConfig;
use crate::store::sha256_hex;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub bootstrap_resamples: usize,
    pub ci_level: f64,
    /// SSIM window on the 8×8 reconstruction grid.
    pub ssim_window: usize,
    /// Ridge penalty of the embedding → raw target decoder.
    pub ridge_lambda: f64,
    /// Varies prior sampling without touching any trained state.
    pub sample_seed: u64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            bootstrap_resamples: 1000,
            ci_level: 0.95,
            ssim_window: 4,
            ridge_lambda: 1e-2,
            sample_seed: 0,
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        if self.bootstrap_resamples == 0 {
            return Err(Error::InvalidConfig("bootstrap_resamples must be positive".into()));
        }
        if !(self.ci_level > 0.0 && self.ci_level < 1.0) {
            return Err(Error::InvalidConfig("ci_level must lie in (0, 1)".into()));
        }
        if self.ssim_window == 0 {
            return Err(Error::InvalidConfig("ssim_window must be positive".into()));
        }
        if !(self.ridge_lambda > 0.0) {
            return Err(Error::InvalidConfig("ridge_lambda must be positive".into()));
        }
        Ok(())
    }
}

/// Everything a run needs. `seed` drives initialization, shuffling and
/// sampling; `data.seed` fixes the dataset on its own so one dataset can
/// serve several runs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub data: GenerationConfig,
    pub preprocess: PreprocessConfig,
    pub encoder: EncoderConfig,
    pub align: AlignConfig,
    pub prior: PriorConfig,
    pub eval: EvalConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            data: GenerationConfig::default(),
            preprocess: PreprocessConfig::default(),
            encoder: EncoderConfig::default(),
            align: AlignConfig::default(),
            prior: PriorConfig::default(),
            eval: EvalConfig::default(),
        }
    }
}

fn hash_json<T: Serialize>(value: &T) -> String {
    sha256_hex(&serde_json::to_vec(value).expect("config serializes"))
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.data.validate()?;
        self.encoder.validate()?;
        self.align.validate()?;
        self.prior.validate()?;
        self.eval.validate()?;
        let samples = self.preprocess.output_samples(self.data.samples)?;
        if self.encoder.channels != self.data.channels || self.encoder.samples != samples {
            return Err(Error::InvalidConfig(format!(
                "encoder expects {}x{} inputs but preprocessing yields {}x{samples}",
                self.encoder.channels, self.encoder.samples, self.data.channels
            )));
        }
        Ok(())
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(s)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes") + "\n"
    }

    /// Hash of the whole document.
    pub fn hash(&self) -> String {
        hash_json(self)
    }

    /// Hash of the sections that determine the alignment checkpoint.
    pub fn align_hash(&self) -> String {
        hash_json(&(self.seed, &self.data, &self.preprocess, &self.encoder, &self.align))
    }

    /// Hash of the sections that determine the prior checkpoint. Sampling
    /// settings are left out since they do not change the trained network.
    pub fn prior_hash(&self) -> String {
        let d = PriorConfig::default();
        let training = PriorConfig {
            sample_steps: d.sample_steps,
            guidance_scale: d.guidance_scale,
            guidance_rescale: d.guidance_rescale,
            ..self.prior.clone()
        };
        hash_json(&(self.align_hash(), &training))
    }
}
