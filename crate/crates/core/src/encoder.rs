//! EEG-side expert encoder.
//!
//! ```text
//! (N, C, T) ── + positional table ── single-head attention over channels ── residual
//!           ── per-channel linear T→T
//!           ── temporal conv (1×k, `conv_channels` maps) ── spatial conv (C×1)
//!           ── max-pool (1×pool_kernel, stride pool_stride) ── batch-norm ── ELU
//!           ── flatten (N, pooled·conv_channels)
//!           ── linear → D, + linear(GELU(·)) residual, layer-norm ── (N, D)
//! ```
//!
//! Attention tokens are channel rows; the positional table is the usual
//! sinusoid with the channel as position and time as the feature axis.

use serde::{Deserialize, Serialize};

use crate::autodiff::{BatchNormMode, BatchStats, Graph, NodeId};
use crate::error::{Error, Result};
use crate::params::{uniform_init, Bound, ParamStore};
use crate::seed::rng_for;
use crate::tensor::Tensor;

pub const BN_MOMENTUM: f64 = 0.1;

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderConfig {
    pub channels: usize,
    pub samples: usize,
    pub temporal_kernel: usize,
    pub conv_channels: usize,
    pub pool_kernel: usize,
    pub pool_stride: usize,
    pub embed_dim: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            channels: 16,
            samples: 50,
            temporal_kernel: 25,
            conv_channels: 40,
            pool_kernel: 6,
            pool_stride: 2,
            embed_dim: 64,
        }
    }
}

impl EncoderConfig {
    /// Full-size configuration: 63 channels, 250 samples, 1024-d output.
    pub fn full_size() -> Self {
        Self {
            channels: 63,
            samples: 250,
            temporal_kernel: 25,
            conv_channels: 40,
            pool_kernel: 51,
            pool_stride: 5,
            embed_dim: 1024,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fields = [
            self.channels,
            self.samples,
            self.temporal_kernel,
            self.conv_channels,
            self.pool_kernel,
            self.pool_stride,
            self.embed_dim,
        ];
        if fields.contains(&0) {
            return Err(Error::InvalidConfig("encoder dimensions must be at least 1".into()));
        }
        if self.temporal_kernel > self.samples {
            return Err(Error::InvalidConfig("temporal_kernel exceeds samples".into()));
        }
        if self.pool_kernel > self.conv_len() {
            return Err(Error::InvalidConfig("pool_kernel exceeds temporal conv output".into()));
        }
        Ok(())
    }

    /// Temporal positions after the temporal convolution.
    pub fn conv_len(&self) -> usize {
        self.samples + 1 - self.temporal_kernel
    }

    /// Temporal positions after pooling.
    pub fn pooled_len(&self) -> usize {
        (self.conv_len() - self.pool_kernel) / self.pool_stride + 1
    }

    /// Width of the flattened `(pooled, conv_channels)` feature map.
    pub fn flatten_dim(&self) -> usize {
        self.pooled_len() * self.conv_channels
    }
}

/// Sinusoidal table of shape `(channels, samples)`.
pub fn positional_table(channels: usize, samples: usize) -> Tensor {
    let mut data = vec![0.0; channels * samples];
    for pos in 0..channels {
        for i in 0..samples {
            let pair = (i / 2) as f64;
            let angle = pos as f64 / 10000f64.powf(2.0 * pair / samples as f64);
            data[pos * samples + i] = if i % 2 == 0 { angle.sin() } else { angle.cos() };
        }
    }
    Tensor::new(vec![channels, samples], data).unwrap()
}

#[derive(Debug, Clone, PartialEq)]
pub struct EegEncoder {
    pub config: EncoderConfig,
    pub params: ParamStore,
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
    positional: Tensor,
}

/// Nodes produced by one encoder forward pass.
#[derive(Debug, Clone)]
pub struct EncoderOutput {
    /// `(N, D)` before L2 normalization.
    pub embedding: NodeId,
    /// Temporal-conv activation map `(N, conv_channels, C, conv_len)`.
    pub temporal_map: NodeId,
    pub batch_stats: Option<BatchStats>,
}

impl EegEncoder {
    pub fn init(config: EncoderConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = rng_for(seed, "encoder/init");
        let (c, t, k, ch, d) = (
            config.channels,
            config.samples,
            config.temporal_kernel,
            config.conv_channels,
            config.embed_dim,
        );
        let f = config.flatten_dim();
        let mut p = ParamStore::new();
        for name in ["q", "k", "v", "o"] {
            p.push(format!("attn.w{name}"), uniform_init(&mut rng, &[t, t], t));
            p.push(format!("attn.b{name}"), uniform_init(&mut rng, &[t], t));
        }
        p.push("mix.w", uniform_init(&mut rng, &[t, t], t));
        p.push("mix.b", uniform_init(&mut rng, &[t], t));
        p.push("tconv.w", uniform_init(&mut rng, &[ch, 1, 1, k], k));
        p.push("tconv.b", uniform_init(&mut rng, &[ch], k));
        p.push("sconv.w", uniform_init(&mut rng, &[ch, ch, c, 1], ch * c));
        p.push("sconv.b", uniform_init(&mut rng, &[ch], ch * c));
        p.push("bn.gamma", Tensor::ones(&[ch]));
        p.push("bn.beta", Tensor::zeros(&[ch]));
        p.push("proj.w", uniform_init(&mut rng, &[f, d], f));
        p.push("proj.b", uniform_init(&mut rng, &[d], f));
        p.push("proj.res_w", uniform_init(&mut rng, &[d, d], d));
        p.push("proj.res_b", uniform_init(&mut rng, &[d], d));
        p.push("proj.ln_gamma", Tensor::ones(&[d]));
        p.push("proj.ln_beta", Tensor::zeros(&[d]));
        Ok(Self {
            positional: positional_table(c, t),
            running_mean: vec![0.0; ch],
            running_var: vec![1.0; ch],
            params: p,
            config,
        })
    }

    /// Closed-form trainable parameter count.
    pub fn expected_param_count(cfg: &EncoderConfig) -> usize {
        let (c, t, k, ch, d) = (cfg.channels, cfg.samples, cfg.temporal_kernel, cfg.conv_channels, cfg.embed_dim);
        let attention = 4 * (t * t + t);
        let mix = t * t + t;
        let tsconv = (ch * k + ch) + (ch * ch * c + ch) + 2 * ch;
        let projection = (cfg.flatten_dim() * d + d) + (d * d + d) + 2 * d;
        attention + mix + tsconv + projection
    }

    pub fn forward(&self, g: &mut Graph, p: &Bound, x: NodeId, train: bool) -> Result<EncoderOutput> {
        let cfg = &self.config;
        let shape = g.shape(x).to_vec();
        if shape.len() != 3 || shape[1] != cfg.channels || shape[2] != cfg.samples {
            return Err(Error::ShapeMismatch {
                op: "encoder_forward",
                lhs: vec![0, cfg.channels, cfg.samples],
                rhs: shape,
            });
        }
        let n = shape[0];

        let pos = g.constant(self.positional.clone());
        let h = g.add(x, pos)?;
        let q = g.linear(h, p.id("attn.wq"), Some(p.id("attn.bq")))?;
        let k = g.linear(h, p.id("attn.wk"), Some(p.id("attn.bk")))?;
        let v = g.linear(h, p.id("attn.wv"), Some(p.id("attn.bv")))?;
        let a = g.attention(q, k, v)?;
        let a = g.linear(a, p.id("attn.wo"), Some(p.id("attn.bo")))?;
        let h = g.add(h, a)?;
        let h = g.linear(h, p.id("mix.w"), Some(p.id("mix.b")))?;

        let h = g.reshape(h, &[n, 1, cfg.channels, cfg.samples])?;
        let temporal_map = g.conv2d(h, p.id("tconv.w"), Some(p.id("tconv.b")))?;
        let h = g.conv2d(temporal_map, p.id("sconv.w"), Some(p.id("sconv.b")))?;
        let h = g.max_pool2d(h, (1, cfg.pool_kernel), (1, cfg.pool_stride))?;
        let mode = if train {
            BatchNormMode::Train
        } else {
            BatchNormMode::Eval {
                mean: &self.running_mean,
                var: &self.running_var,
            }
        };
        let (h, batch_stats) = g.batch_norm(h, p.id("bn.gamma"), p.id("bn.beta"), mode)?;
        let h = g.elu(h, 1.0)?;

        let pooled = cfg.pooled_len();
        let h = g.reshape(h, &[n, cfg.conv_channels, pooled])?;
        let h = g.transpose(h)?;
        let h = g.reshape(h, &[n, cfg.flatten_dim()])?;

        let z = g.linear(h, p.id("proj.w"), Some(p.id("proj.b")))?;
        let r = g.gelu(z)?;
        let r = g.linear(r, p.id("proj.res_w"), Some(p.id("proj.res_b")))?;
        let z = g.add(z, r)?;
        let embedding = g.layer_norm(z, p.id("proj.ln_gamma"), p.id("proj.ln_beta"))?;

        Ok(EncoderOutput {
            embedding,
            temporal_map,
            batch_stats,
        })
    }

    /// Folds observed batch statistics into the running estimates.
    pub fn update_running_stats(&mut self, stats: &BatchStats, batch_elems: usize) {
        let unbias = if batch_elems > 1 {
            batch_elems as f64 / (batch_elems - 1) as f64
        } else {
            1.0
        };
        for i in 0..self.running_mean.len() {
            self.running_mean[i] = (1.0 - BN_MOMENTUM) * self.running_mean[i] + BN_MOMENTUM * stats.mean[i];
            self.running_var[i] = (1.0 - BN_MOMENTUM) * self.running_var[i] + BN_MOMENTUM * stats.var[i] * unbias;
        }
    }

    /// Number of elements each batch-norm channel averages over for a batch of `n`.
    pub fn bn_elems(&self, n: usize) -> usize {
        n * self.config.pooled_len()
    }

    /// Eval-mode embeddings (not normalized) for an `(N, C, T)` batch.
    pub fn embed(&self, batch: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let p = self.params.bind(&mut g, false);
        let x = g.constant(batch.clone());
        let out = self.forward(&mut g, &p, x, false)?;
        Ok(g.value(out.embedding).clone())
    }
}
