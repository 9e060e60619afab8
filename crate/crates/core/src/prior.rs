//! Conditional diffusion prior mapping EEG embeddings onto modality
//! embeddings. The network regresses the clean target directly and is
//! sampled with a deterministic DDIM loop and classifier-free guidance.
//!
//! Inside the prior, targets are standardized with their training mean and
//! overall spread, and conditions (unit vectors with near-zero mean) are
//! scaled by `√D`, so both have roughly unit variance per coordinate like
//! the noise. Samples are mapped back and L2-normalized.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, NodeId};
use crate::error::{Error, Result};
use crate::optim::{AdamW, AdamWConfig};
use crate::params::{uniform_init, Bound, ParamStore};
use crate::seed::rng_for;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    pub beta: Vec<f64>,
    pub alpha: Vec<f64>,
    pub alpha_bar: Vec<f64>,
}

impl NoiseSchedule {
    pub fn steps(&self) -> usize {
        self.beta.len()
    }
}

/// Linear betas from `beta_min` to `beta_max` over `t_steps` steps.
pub fn make_schedule(t_steps: usize, beta_min: f64, beta_max: f64) -> Result<NoiseSchedule> {
    if t_steps == 0 {
        return Err(Error::InvalidArgument("schedule needs at least one step".into()));
    }
    if !(0.0 < beta_min && beta_min <= beta_max && beta_max < 1.0) {
        return Err(Error::InvalidArgument(format!(
            "need 0 < beta_min <= beta_max < 1, got {beta_min}..{beta_max}"
        )));
    }
    let beta: Vec<f64> = (0..t_steps)
        .map(|i| {
            if t_steps == 1 {
                beta_min
            } else {
                beta_min + (beta_max - beta_min) * i as f64 / (t_steps - 1) as f64
            }
        })
        .collect();
    let alpha: Vec<f64> = beta.iter().map(|b| 1.0 - b).collect();
    let mut alpha_bar = Vec::with_capacity(t_steps);
    let mut acc = 1.0;
    for a in &alpha {
        acc *= a;
        alpha_bar.push(acc);
    }
    Ok(NoiseSchedule { beta, alpha, alpha_bar })
}

/// `√ᾱ_t·m0 + √(1−ᾱ_t)·noise`, row by row.
pub fn q_sample(m0: &Tensor, t: &[usize], noise: &Tensor, schedule: &NoiseSchedule) -> Result<Tensor> {
    if m0.shape() != noise.shape() || m0.shape().len() != 2 {
        return Err(Error::ShapeMismatch {
            op: "q_sample",
            lhs: m0.shape().to_vec(),
            rhs: noise.shape().to_vec(),
        });
    }
    if t.len() != m0.shape()[0] {
        return Err(Error::InvalidArgument(format!("{} timesteps for {} rows", t.len(), m0.shape()[0])));
    }
    q_sample_with(m0, noise, t.iter().map(|&ti| alpha_bar_at(schedule, ti)).collect::<Result<Vec<_>>>()?)
}

fn alpha_bar_at(schedule: &NoiseSchedule, t: usize) -> Result<f64> {
    schedule
        .alpha_bar
        .get(t)
        .copied()
        .ok_or_else(|| Error::InvalidArgument(format!("timestep {t} outside [0, {})", schedule.steps())))
}

/// [`q_sample`] with explicit per-row `ᾱ`.
pub fn q_sample_with(m0: &Tensor, noise: &Tensor, alpha_bar: Vec<f64>) -> Result<Tensor> {
    let d = m0.shape()[1];
    let mut out = Vec::with_capacity(m0.len());
    for (r, ab) in alpha_bar.iter().enumerate() {
        let (a, b) = (ab.sqrt(), (1.0 - ab).sqrt());
        out.extend(
            m0.data()[r * d..(r + 1) * d]
                .iter()
                .zip(&noise.data()[r * d..(r + 1) * d])
                .map(|(x, e)| a * x + b * e),
        );
    }
    Tensor::new(m0.shape().to_vec(), out)
}

/// Sinusoidal embedding of integer timesteps, `(N, dim)`.
pub fn time_embedding(t: &[usize], dim: usize) -> Tensor {
    let half = dim / 2;
    let mut data = Vec::with_capacity(t.len() * dim);
    for &ti in t {
        for i in 0..dim {
            let freq = 1.0 / 10000f64.powf((i % half.max(1)) as f64 / half.max(1) as f64);
            let angle = ti as f64 * freq;
            data.push(if i < half { angle.sin() } else { angle.cos() });
        }
    }
    Tensor::new(vec![t.len(), dim], data).unwrap()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PriorConfig {
    pub t_steps: usize,
    pub beta_min: f64,
    pub beta_max: f64,
    pub blocks: usize,
    /// Hidden width as a multiple of the embedding dimension.
    pub width_mult: usize,
    pub time_dim: usize,
    pub batch_size: usize,
    pub epochs: usize,
    pub cond_drop_prob: f64,
    pub optimizer: AdamWConfig,
    pub sample_steps: usize,
    pub guidance_scale: f64,
    pub guidance_rescale: f64,
}

impl Default for PriorConfig {
    fn default() -> Self {
        // 1e-4..0.02 at 1000 steps, rescaled to 100 steps
        Self {
            t_steps: 100,
            beta_min: 1e-3,
            beta_max: 0.2,
            blocks: 3,
            width_mult: 4,
            time_dim: 32,
            batch_size: 128,
            epochs: 200,
            cond_drop_prob: 0.1,
            optimizer: AdamWConfig::default(),
            sample_steps: 50,
            guidance_scale: 7.5,
            guidance_rescale: DEFAULT_GUIDANCE_RESCALE,
        }
    }
}

impl PriorConfig {
    pub fn validate(&self) -> Result<()> {
        make_schedule(self.t_steps, self.beta_min, self.beta_max)?;
        if self.blocks == 0 || self.width_mult == 0 || self.time_dim < 2 {
            return Err(Error::InvalidConfig("prior network dimensions must be positive".into()));
        }
        if self.batch_size == 0 || self.epochs == 0 {
            return Err(Error::InvalidConfig("batch_size and epochs must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.cond_drop_prob) {
            return Err(Error::InvalidConfig("cond_drop_prob must lie in [0, 1)".into()));
        }
        if self.sample_steps == 0 || self.sample_steps > self.t_steps {
            return Err(Error::InvalidConfig("sample_steps must lie in [1, t_steps]".into()));
        }
        if !(self.guidance_scale >= 0.0) {
            return Err(Error::InvalidConfig("guidance_scale must be non-negative".into()));
        }
        if !(0.0..=1.0).contains(&self.guidance_rescale) {
            return Err(Error::InvalidConfig("guidance_rescale must lie in [0, 1]".into()));
        }
        Ok(())
    }

    pub fn schedule(&self) -> Result<NoiseSchedule> {
        make_schedule(self.t_steps, self.beta_min, self.beta_max)
    }

    pub fn guidance(&self) -> Guidance {
        Guidance::Scale {
            scale: self.guidance_scale,
            rescale: self.guidance_rescale,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PriorNetwork {
    pub dim: usize,
    pub time_dim: usize,
    pub params: ParamStore,
    /// Condition used for the unconditional branch of guidance.
    pub null_condition: Vec<f64>,
    /// Per-coordinate mean of the training targets.
    pub target_mean: Vec<f64>,
    /// Overall standard deviation of the centered training targets.
    pub target_scale: f64,
}

impl PriorNetwork {
    pub fn init(dim: usize, cfg: &PriorConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        if dim == 0 {
            return Err(Error::InvalidConfig("embedding dimension must be positive".into()));
        }
        let mut rng = rng_for(seed, "prior/init");
        let h = cfg.width_mult * dim;
        let input = 2 * dim + cfg.time_dim;
        let mut p = ParamStore::new();
        p.push("in.w", uniform_init(&mut rng, &[input, h], input));
        p.push("in.b", uniform_init(&mut rng, &[h], input));
        for b in 0..cfg.blocks {
            p.push(format!("block{b}.ln_gamma"), Tensor::ones(&[h]));
            p.push(format!("block{b}.ln_beta"), Tensor::zeros(&[h]));
            p.push(format!("block{b}.w"), uniform_init(&mut rng, &[h, h], h));
            p.push(format!("block{b}.b"), uniform_init(&mut rng, &[h], h));
        }
        p.push("out.ln_gamma", Tensor::ones(&[h]));
        p.push("out.ln_beta", Tensor::zeros(&[h]));
        p.push("out.w", uniform_init(&mut rng, &[h, dim], h));
        p.push("out.b", uniform_init(&mut rng, &[dim], h));
        let mut null_rng = rng_for(seed, "prior/null");
        let null_condition = (0..dim).map(|_| null_rng.sample(StandardNormal)).collect();
        Ok(Self {
            dim,
            time_dim: cfg.time_dim,
            params: p,
            null_condition,
            target_mean: vec![0.0; dim],
            target_scale: 1.0 / (dim as f64).sqrt(),
        })
    }

    fn blocks(&self) -> usize {
        self.params.names().iter().filter(|n| n.ends_with(".w") && n.starts_with("block")).count()
    }

    /// Predicted clean embedding (scaled space) for noisy `m_t`, timesteps
    /// `t` and condition `cond`, all `(N, ·)` nodes.
    pub fn forward(&self, g: &mut Graph, p: &Bound, m_t: NodeId, t: &[usize], cond: NodeId) -> Result<NodeId> {
        let te = g.constant(time_embedding(t, self.time_dim));
        let x = g.concat(&[m_t, te, cond], 1)?;
        let mut h = g.linear(x, p.id("in.w"), Some(p.id("in.b")))?;
        for b in 0..self.blocks() {
            let r = g.layer_norm(h, p.id(&format!("block{b}.ln_gamma")), p.id(&format!("block{b}.ln_beta")))?;
            let r = g.gelu(r)?;
            let r = g.linear(r, p.id(&format!("block{b}.w")), Some(p.id(&format!("block{b}.b"))))?;
            h = g.add(h, r)?;
        }
        let h = g.layer_norm(h, p.id("out.ln_gamma"), p.id("out.ln_beta"))?;
        let h = g.gelu(h)?;
        g.linear(h, p.id("out.w"), Some(p.id("out.b")))
    }

    /// Eval-mode prediction on plain tensors.
    pub fn predict(&self, m_t: &Tensor, t: &[usize], cond: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let p = self.params.bind(&mut g, false);
        let x = g.constant(m_t.clone());
        let c = g.constant(cond.clone());
        let y = self.forward(&mut g, &p, x, t, c)?;
        Ok(g.value(y).clone())
    }

    /// Sets the target standardization from training targets.
    pub fn fit_target_stats(&mut self, target: &Tensor) {
        let (n, d) = (target.shape()[0], target.shape()[1]);
        let mut mean = vec![0.0; d];
        for r in 0..n {
            for (m, v) in mean.iter_mut().zip(target.row(r)) {
                *m += v / n as f64;
            }
        }
        let mut var = 0.0;
        for r in 0..n {
            for (m, v) in mean.iter().zip(target.row(r)) {
                var += (v - m).powi(2);
            }
        }
        let scale = (var / (n * d) as f64).sqrt();
        self.target_scale = if scale > 0.0 { scale } else { 1.0 };
        self.target_mean = mean;
    }

    pub fn standardize_targets(&self, target: &Tensor) -> Tensor {
        let d = self.dim;
        let data = target
            .data()
            .iter()
            .enumerate()
            .map(|(i, v)| (v - self.target_mean[i % d]) / self.target_scale)
            .collect();
        Tensor::new(target.shape().to_vec(), data).unwrap()
    }

    pub fn unstandardize_targets(&self, x: &Tensor) -> Tensor {
        let d = self.dim;
        let data = x
            .data()
            .iter()
            .enumerate()
            .map(|(i, v)| v * self.target_scale + self.target_mean[i % d])
            .collect();
        Tensor::new(x.shape().to_vec(), data).unwrap()
    }

    fn null_batch(&self, n: usize) -> Tensor {
        Tensor::new(vec![n, self.dim], self.null_condition.repeat(n)).unwrap()
    }
}

fn scaled(x: &Tensor, s: f64) -> Tensor {
    Tensor::new(x.shape().to_vec(), x.data().iter().map(|v| v * s).collect()).unwrap()
}

fn randn(rng: &mut impl Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.sample(StandardNormal)).collect()).unwrap()
}

/// Draws which rows get their condition replaced by noise.
pub fn condition_dropout_mask(rng: &mut impl Rng, n: usize, prob: f64) -> Vec<bool> {
    (0..n).map(|_| rng.gen::<f64>() < prob).collect()
}

/// Mean squared error between the prediction and `m0`, both in scaled space.
pub fn prior_loss_node(
    net: &PriorNetwork,
    g: &mut Graph,
    p: &Bound,
    m0: &Tensor,
    t: &[usize],
    noise: &Tensor,
    cond: &Tensor,
    schedule: &NoiseSchedule,
) -> Result<NodeId> {
    let m_t = q_sample(m0, t, noise, schedule)?;
    let x = g.constant(m_t);
    let c = g.constant(cond.clone());
    let pred = net.forward(g, p, x, t, c)?;
    let target = g.constant(m0.clone());
    let diff = g.sub(pred, target)?;
    let sq = g.mul(diff, diff)?;
    g.mean_all(sq)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PriorEpoch {
    pub epoch: usize,
    pub loss: f64,
}

/// Fits a prior on `(condition, target)` unit-norm embedding pairs.
pub fn prior_train(
    cond: &Tensor,
    target: &Tensor,
    cfg: &PriorConfig,
    seed: u64,
) -> Result<(PriorNetwork, Vec<PriorEpoch>)> {
    if cond.shape() != target.shape() || cond.shape().len() != 2 {
        return Err(Error::ShapeMismatch {
            op: "prior_train",
            lhs: cond.shape().to_vec(),
            rhs: target.shape().to_vec(),
        });
    }
    let (n, d) = (cond.shape()[0], cond.shape()[1]);
    let schedule = cfg.schedule()?;
    let mut net = PriorNetwork::init(d, cfg, seed)?;
    net.fit_target_stats(target);
    let shapes: Vec<&Tensor> = net.params.tensors().iter().collect();
    let mut opt = AdamW::new(cfg.optimizer, &shapes);
    let decay = vec![true; net.params.len()];
    let s = (d as f64).sqrt();
    let cond_s = scaled(cond, s);
    let target_s = net.standardize_targets(target);
    let mut log = Vec::with_capacity(cfg.epochs);

    for epoch in 0..cfg.epochs {
        let batches = crate::contrastive::epoch_batches(n, cfg.batch_size, crate::seed::derive_seed(seed, "prior/shuffle"), epoch);
        let mut total = 0.0;
        for (bi, batch) in batches.iter().enumerate() {
            let mut rng = rng_for(seed, &format!("prior/step/{epoch}/{bi}"));
            let m0 = target_s.select_rows(batch);
            let mut c = cond_s.select_rows(batch);
            let t: Vec<usize> = (0..batch.len()).map(|_| rng.gen_range(0..cfg.t_steps)).collect();
            let noise = randn(&mut rng, &[batch.len(), d]);
            let drop = condition_dropout_mask(&mut rng, batch.len(), cfg.cond_drop_prob);
            for (r, &dropped) in drop.iter().enumerate() {
                if dropped {
                    for v in &mut c.data_mut()[r * d..(r + 1) * d] {
                        *v = rng.sample(StandardNormal);
                    }
                }
            }
            let mut g = Graph::new();
            let p = net.params.bind(&mut g, true);
            let loss = prior_loss_node(&net, &mut g, &p, &m0, &t, &noise, &c, &schedule).map_err(|e| diverged(e, epoch))?;
            let lv = g.value(loss).item();
            let grads = g.grad(loss, p.ids())?;
            if !lv.is_finite() || grads.iter().any(|t| !t.all_finite()) {
                return Err(diverged(Error::NonFinite { op: "prior loss" }, epoch));
            }
            let mut params: Vec<&mut Tensor> = net.params.tensors_mut().iter_mut().collect();
            opt.step(&mut params, &grads, &decay);
            total += lv;
        }
        log.push(PriorEpoch {
            epoch,
            loss: total / batches.len() as f64,
        });
    }
    Ok((net, log))
}

fn diverged(e: Error, epoch: usize) -> Error {
    match e {
        Error::NonFinite { op } => Error::Diverged {
            stage: "prior".into(),
            detail: format!("epoch {epoch}: non-finite value in {op}"),
        },
        other => other,
    }
}

/// Evenly spaced timesteps from high to low noise, ending at 0.
pub fn sampling_timesteps(t_steps: usize, n_steps: usize) -> Vec<usize> {
    (0..n_steps).rev().map(|i| i * t_steps / n_steps).collect()
}

/// Large guidance scales inflate the clean estimate far beyond the norm the
/// network was trained on; pulling it back keeps later steps in range.
pub const DEFAULT_GUIDANCE_RESCALE: f64 = 1.0;

/// How the two branches are combined at each step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Guidance {
    /// `uncond + scale·(cond − uncond)`, then each row's norm is pulled
    /// toward the conditional row's norm by the `rescale` fraction.
    Scale { scale: f64, rescale: f64 },
    /// Conditional branch only.
    ConditionalOnly,
}

/// Deterministic DDIM sampling; returns unit-norm `(N, D)` embeddings.
pub fn prior_sample(
    net: &PriorNetwork,
    e: &Tensor,
    schedule: &NoiseSchedule,
    n_steps: usize,
    guidance_scale: f64,
    seed: u64,
) -> Result<Tensor> {
    let guidance = Guidance::Scale {
        scale: guidance_scale,
        rescale: DEFAULT_GUIDANCE_RESCALE,
    };
    Ok(prior_sample_trace(net, e, schedule, n_steps, guidance, seed)?.0)
}

/// Sampling loop that also returns the per-step clean estimates.
pub fn prior_sample_trace(
    net: &PriorNetwork,
    e: &Tensor,
    schedule: &NoiseSchedule,
    n_steps: usize,
    guidance: Guidance,
    seed: u64,
) -> Result<(Tensor, Vec<Tensor>)> {
    if e.shape().len() != 2 || e.shape()[1] != net.dim {
        return Err(Error::ShapeMismatch {
            op: "prior_sample",
            lhs: vec![0, net.dim],
            rhs: e.shape().to_vec(),
        });
    }
    if n_steps == 0 || n_steps > schedule.steps() {
        return Err(Error::InvalidArgument(format!(
            "n_steps must lie in [1, {}], got {n_steps}",
            schedule.steps()
        )));
    }
    if let Guidance::Scale { scale, rescale } = guidance {
        if !(scale >= 0.0) {
            return Err(Error::InvalidArgument(format!("guidance_scale must be non-negative, got {scale}")));
        }
        if !(0.0..=1.0).contains(&rescale) {
            return Err(Error::InvalidArgument(format!("guidance rescale must lie in [0, 1], got {rescale}")));
        }
    }
    let (n, d) = (e.shape()[0], e.shape()[1]);
    let s = (d as f64).sqrt();
    let cond = scaled(e, s);
    let null = net.null_batch(n);
    let mut x = randn(&mut rng_for(seed, "prior/sample"), &[n, d]);
    let steps = sampling_timesteps(schedule.steps(), n_steps);
    let mut trace = Vec::with_capacity(steps.len());

    for (i, &t) in steps.iter().enumerate() {
        let ts = vec![t; n];
        let c = net.predict(&x, &ts, &cond)?;
        let x0 = match guidance {
            Guidance::ConditionalOnly => c,
            Guidance::Scale { scale: w, rescale } => {
                let u = net.predict(&x, &ts, &null)?;
                let data: Vec<f64> = u.data().iter().zip(c.data()).map(|(u, c)| u + w * (c - u)).collect();
                let mut gt = Tensor::new(vec![n, d], data)?;
                if rescale > 0.0 {
                    for r in 0..n {
                        let nc = c.row(r).iter().map(|v| v * v).sum::<f64>().sqrt();
                        let row = &mut gt.data_mut()[r * d..(r + 1) * d];
                        let ng = row.iter().map(|v| v * v).sum::<f64>().sqrt();
                        let f = rescale * nc / ng + (1.0 - rescale);
                        row.iter_mut().for_each(|v| *v *= f);
                    }
                }
                gt
            }
        };
        let ab = schedule.alpha_bar[t];
        let ab_prev = steps.get(i + 1).map_or(1.0, |&tp| schedule.alpha_bar[tp]);
        let (sa, sb) = (ab.sqrt(), (1.0 - ab).sqrt());
        let next: Vec<f64> = x
            .data()
            .iter()
            .zip(x0.data())
            .map(|(xt, x0)| {
                let eps = (xt - sa * x0) / sb;
                ab_prev.sqrt() * x0 + (1.0 - ab_prev).sqrt() * eps
            })
            .collect();
        x = Tensor::new(vec![n, d], next)?;
        trace.push(x0);
    }

    let last = net.unstandardize_targets(trace.last().unwrap());
    let mut g = Graph::new();
    let y = g.constant(last);
    let y = g.l2_normalize(y)?;
    Ok((g.value(y).clone(), trace))
}

/// Mean cosine similarity between matched rows.
pub fn mean_cosine(a: &Tensor, b: &Tensor) -> Result<f64> {
    if a.shape() != b.shape() || a.shape().len() != 2 {
        return Err(Error::ShapeMismatch {
            op: "mean_cosine",
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        });
    }
    let n = a.shape()[0];
    let mut s = 0.0;
    for r in 0..n {
        let (x, y) = (a.row(r), b.row(r));
        let dot: f64 = x.iter().zip(y).map(|(p, q)| p * q).sum();
        let nx = x.iter().map(|v| v * v).sum::<f64>().sqrt();
        let ny = y.iter().map(|v| v * v).sum::<f64>().sqrt();
        s += dot / (nx * ny);
    }
    Ok(s / n as f64)
}
