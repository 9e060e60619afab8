//! Grad-CAM over the temporal-convolution feature maps of an EEG expert,
//! reduced to per-electrode and per-sample saliency profiles.

use serde::{Deserialize, Serialize};

use crate::autodiff::Graph;
use crate::contrastive::ModalityExpert;
use crate::embedders::embed_modality_node;
use crate::error::{Error, Result};
use crate::modality::Modality;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SaliencyMap {
    pub modality: Modality,
    /// Non-negative, sums to 1 unless `degenerate`.
    pub channel_saliency: Vec<f64>,
    pub time_saliency: Vec<f64>,
    /// Number of maps averaged into this one.
    pub count: usize,
    /// Set when every gradient-weighted activation was zero.
    pub degenerate: bool,
}

fn normalize(v: &mut [f64]) -> bool {
    let s: f64 = v.iter().sum();
    if s > 0.0 {
        v.iter_mut().for_each(|x| *x /= s);
        true
    } else {
        v.iter_mut().for_each(|x| *x = 0.0);
        false
    }
}

/// Grad-CAM with the matched-pair cosine as target, summed over the batch.
/// `x` is `(N, C, T)` preprocessed EEG, `targets` the matching raw modality
/// targets `(N, D_raw)`.
///
/// Activations are taken relative to the map of an all-zero trial, so the
/// constant content every row shares does not count as evidence.
pub fn gradcam(expert: &ModalityExpert, x: &Tensor, targets: &Tensor) -> Result<SaliencyMap> {
    gradcam_scaled(expert, x, targets, 1.0)
}

/// [`gradcam`] with the target score multiplied by `score_scale`.
pub fn gradcam_scaled(expert: &ModalityExpert, x: &Tensor, targets: &Tensor, score_scale: f64) -> Result<SaliencyMap> {
    if !(score_scale > 0.0) {
        return Err(Error::InvalidArgument("score scale must be positive".into()));
    }
    let cfg = &expert.encoder.config;
    let mut g = Graph::new();
    // Bound as trainable only so gradients propagate to the feature map.
    let enc_p = expert.encoder.params.bind(&mut g, true);
    let proj_p = expert.projection.params.bind(&mut g, false);
    let xn = g.constant(x.clone());
    let out = expert.encoder.forward(&mut g, &enc_p, xn, false)?;
    let q = g.l2_normalize(out.embedding)?;
    let tn = g.constant(targets.clone());
    let k = embed_modality_node(&mut g, &expert.embedder, &expert.projection, &proj_p, tn)?;
    if g.shape(q) != g.shape(k) {
        return Err(Error::ShapeMismatch {
            op: "gradcam",
            lhs: g.shape(q).to_vec(),
            rhs: g.shape(k).to_vec(),
        });
    }
    let prod = g.mul(q, k)?;
    let score = g.sum_all(prod)?;
    let score = g.scale(score, score_scale)?;
    let grad = g.grad(score, &[out.temporal_map])?.remove(0);
    let act = g.value(out.temporal_map);
    let base = baseline_map(expert)?;

    let (n, ch, c, tl) = (act.shape()[0], act.shape()[1], act.shape()[2], act.shape()[3]);
    let plane = c * tl;
    let mut cam = vec![0.0; plane];
    for b in 0..n {
        let mut weighted = vec![0.0; plane];
        for f in 0..ch {
            let off = (b * ch + f) * plane;
            let alpha = grad.data()[off..off + plane].iter().sum::<f64>() / plane as f64;
            let a0 = &base.data()[f * plane..(f + 1) * plane];
            for ((w, a), z) in weighted.iter_mut().zip(&act.data()[off..off + plane]).zip(a0) {
                *w += alpha * (a - z);
            }
        }
        for (acc, w) in cam.iter_mut().zip(&weighted) {
            *acc += w.max(0.0);
        }
    }

    let sconv = expert.encoder.params.get("sconv.w").expect("encoder has a spatial conv");
    let mut kernel_mass = vec![0.0; c];
    for (i, w) in sconv.data().iter().enumerate() {
        kernel_mass[i % c] += w.abs();
    }
    let mut channel: Vec<f64> = (0..c)
        .map(|e| cam[e * tl..(e + 1) * tl].iter().sum::<f64>() * kernel_mass[e])
        .collect();

    // Each conv output position covers `k` input samples.
    let k = cfg.temporal_kernel;
    let mut time = vec![0.0; cfg.samples];
    for p in 0..tl {
        let col: f64 = (0..c).map(|e| cam[e * tl + p]).sum();
        for t in &mut time[p..p + k] {
            *t += col / k as f64;
        }
    }
    let ok_c = normalize(&mut channel);
    let ok_t = normalize(&mut time);
    Ok(SaliencyMap {
        modality: expert.modality,
        channel_saliency: channel,
        time_saliency: time,
        count: 1,
        degenerate: !(ok_c && ok_t),
    })
}

/// Temporal map for an all-zero trial. It holds only what the positional
/// table and biases put on every row, which carries no trial information.
fn baseline_map(expert: &ModalityExpert) -> Result<Tensor> {
    let cfg = &expert.encoder.config;
    let mut g = Graph::new();
    let p = expert.encoder.params.bind(&mut g, false);
    let z = g.constant(Tensor::zeros(&[1, cfg.channels, cfg.samples]));
    let out = expert.encoder.forward(&mut g, &p, z, false)?;
    Ok(g.value(out.temporal_map).clone())
}

/// Elementwise mean of maps for one modality, renormalized.
pub fn average_saliency(maps: &[SaliencyMap]) -> Result<SaliencyMap> {
    let first = maps
        .first()
        .ok_or_else(|| Error::InvalidArgument("no saliency maps to average".into()))?;
    for m in maps {
        if m.modality != first.modality {
            return Err(Error::InvalidArgument(format!(
                "cannot average {} and {} maps",
                first.modality, m.modality
            )));
        }
        if m.channel_saliency.len() != first.channel_saliency.len() || m.time_saliency.len() != first.time_saliency.len() {
            return Err(Error::InvalidArgument("saliency maps differ in shape".into()));
        }
    }
    let k = maps.len() as f64;
    let mean = |get: fn(&SaliencyMap) -> &Vec<f64>| -> Vec<f64> {
        let mut out = vec![0.0; get(first).len()];
        for m in maps {
            for (o, v) in out.iter_mut().zip(get(m)) {
                *o += v / k;
            }
        }
        out
    };
    let mut channel = mean(|m| &m.channel_saliency);
    let mut time = mean(|m| &m.time_saliency);
    let ok_c = normalize(&mut channel);
    let ok_t = normalize(&mut time);
    Ok(SaliencyMap {
        modality: first.modality,
        channel_saliency: channel,
        time_saliency: time,
        count: maps.iter().map(|m| m.count).sum(),
        degenerate: !(ok_c && ok_t),
    })
}

/// Fraction of channel saliency on `channels`.
pub fn mass_on(map: &SaliencyMap, channels: &[usize]) -> f64 {
    channels.iter().filter_map(|&c| map.channel_saliency.get(c)).sum()
}
