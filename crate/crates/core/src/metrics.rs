//! Retrieval accuracy, reconstruction-proxy similarity measures and the
//! small amount of statistics needed to put error bars on them.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::modality::Modality;
use crate::seed::rng_for;
use crate::tensor::Tensor;

/// SSIM stabilizers for a dynamic range of 1.
pub const SSIM_C1: f64 = 1e-4;
pub const SSIM_C2: f64 = 9e-4;

fn check_matrix(op: &'static str, t: &Tensor) -> Result<(usize, usize)> {
    if t.shape().len() != 2 {
        return Err(Error::InvalidShape {
            op,
            shape: t.shape().to_vec(),
            reason: "expected a matrix".into(),
        });
    }
    Ok((t.shape()[0], t.shape()[1]))
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Cosine similarity matrix `(Q, K)`.
pub fn cosine_matrix(queries: &Tensor, candidates: &Tensor) -> Result<Vec<Vec<f64>>> {
    let (_, d) = check_matrix("cosine_matrix", queries)?;
    let (k, dc) = check_matrix("cosine_matrix", candidates)?;
    if d != dc {
        return Err(Error::ShapeMismatch {
            op: "cosine_matrix",
            lhs: queries.shape().to_vec(),
            rhs: candidates.shape().to_vec(),
        });
    }
    let cand_norms: Vec<f64> = (0..k).map(|j| norm(candidates.row(j))).collect();
    (0..queries.rows())
        .map(|i| {
            let q = queries.row(i);
            let qn = norm(q);
            if qn == 0.0 {
                return Err(Error::InvalidArgument("zero query vector".into()));
            }
            (0..k)
                .map(|j| {
                    if cand_norms[j] == 0.0 {
                        return Err(Error::InvalidArgument("zero candidate vector".into()));
                    }
                    let dot: f64 = q.iter().zip(candidates.row(j)).map(|(a, b)| a * b).sum();
                    Ok(dot / (qn * cand_norms[j]))
                })
                .collect()
        })
        .collect()
}

/// Candidate indices sorted by decreasing score; ties go to the lower index.
pub fn rank_scores(scores: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    idx
}

/// Per-query candidate rankings for one modality.
#[derive(Debug, Clone, PartialEq)]
pub struct RetrievalResult {
    pub modality: Modality,
    pub rankings: Vec<Vec<usize>>,
    pub truth: Vec<usize>,
}

impl RetrievalResult {
    pub fn new(modality: Modality, queries: &Tensor, candidates: &Tensor, truth: &[usize]) -> Result<Self> {
        let sims = cosine_matrix(queries, candidates)?;
        if truth.len() != sims.len() {
            return Err(Error::InvalidArgument(format!(
                "{} truth labels for {} queries",
                truth.len(),
                sims.len()
            )));
        }
        let k = candidates.shape()[0];
        if let Some(bad) = truth.iter().find(|&&t| t >= k) {
            return Err(Error::InvalidArgument(format!("truth index {bad} out of {k} candidates")));
        }
        Ok(Self {
            modality,
            rankings: sims.iter().map(|s| rank_scores(s)).collect(),
            truth: truth.to_vec(),
        })
    }

    pub fn hits(&self, k: usize) -> Result<Vec<bool>> {
        hits(&self.rankings, &self.truth, k)
    }

    pub fn topk(&self, k: usize) -> Result<f64> {
        Ok(fraction(&self.hits(k)?))
    }
}

fn hits(rankings: &[Vec<usize>], truth: &[usize], k: usize) -> Result<Vec<bool>> {
    if rankings.len() != truth.len() {
        return Err(Error::InvalidArgument("rankings and truth differ in length".into()));
    }
    rankings
        .iter()
        .zip(truth)
        .map(|(r, t)| {
            if k == 0 || k > r.len() {
                return Err(Error::InvalidArgument(format!("k={k} with {} candidates", r.len())));
            }
            Ok(r[..k].contains(t))
        })
        .collect()
}

fn fraction(h: &[bool]) -> f64 {
    if h.is_empty() {
        return 0.0;
    }
    h.iter().filter(|&&b| b).count() as f64 / h.len() as f64
}

/// Fraction of queries whose true candidate is among the `k` most similar.
pub fn nway_topk(queries: &Tensor, candidates: &Tensor, truth: &[usize], k: usize) -> Result<f64> {
    let (kc, _) = check_matrix("nway_topk", candidates)?;
    if k == 0 || k > kc {
        return Err(Error::InvalidArgument(format!("k={k} with {kc} candidates")));
    }
    RetrievalResult::new(Modality::Image, queries, candidates, truth)?.topk(k)
}

/// Per-query hit if any modality places the truth within its top `k`.
pub fn union_hits(per_modality: &[Vec<Vec<usize>>], truth: &[usize], k: usize) -> Result<Vec<bool>> {
    if per_modality.is_empty() {
        return Err(Error::InvalidArgument("no modality rankings".into()));
    }
    let mut out = vec![false; truth.len()];
    for rankings in per_modality {
        if rankings.len() != truth.len() {
            return Err(Error::InvalidArgument("inconsistent query counts across modalities".into()));
        }
        for (o, h) in out.iter_mut().zip(hits(rankings, truth, k)?) {
            *o |= h;
        }
    }
    Ok(out)
}

pub fn union_topk(per_modality: &[Vec<Vec<usize>>], truth: &[usize], k: usize) -> Result<f64> {
    Ok(fraction(&union_hits(per_modality, truth, k)?))
}

/// Pearson correlation over the flattened values.
pub fn pearson(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() || a.is_empty() {
        return Err(Error::ShapeMismatch {
            op: "pearson",
            lhs: vec![a.len()],
            rhs: vec![b.len()],
        });
    }
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        let (dx, dy) = (x - ma, y - mb);
        sab += dx * dy;
        saa += dx * dx;
        sbb += dy * dy;
    }
    if saa == 0.0 || sbb == 0.0 {
        return Err(Error::InvalidArgument("correlation of a constant vector".into()));
    }
    Ok((sab / (saa.sqrt() * sbb.sqrt())).clamp(-1.0, 1.0))
}

pub fn pixcorr(a: &Tensor, b: &Tensor) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(Error::ShapeMismatch {
            op: "pixcorr",
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        });
    }
    pearson(a.data(), b.data())
}

/// Mean SSIM over all `window × window` patches at stride 1, uniform weights.
pub fn ssim(a: &Tensor, b: &Tensor, window: usize) -> Result<f64> {
    ssim_with(a, b, window, SSIM_C1, SSIM_C2)
}

pub fn ssim_with(a: &Tensor, b: &Tensor, window: usize, c1: f64, c2: f64) -> Result<f64> {
    let (h, w) = check_matrix("ssim", a)?;
    if a.shape() != b.shape() {
        return Err(Error::ShapeMismatch {
            op: "ssim",
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        });
    }
    if window == 0 || window > h || window > w {
        return Err(Error::InvalidArgument(format!("window {window} does not fit a {h}x{w} image")));
    }
    let (x, y) = (a.data(), b.data());
    let area = (window * window) as f64;
    let mut total = 0.0;
    let mut count = 0usize;
    for r0 in 0..=h - window {
        for c0 in 0..=w - window {
            let (mut sx, mut sy, mut sxx, mut syy, mut sxy) = (0.0, 0.0, 0.0, 0.0, 0.0);
            for r in r0..r0 + window {
                for c in c0..c0 + window {
                    let (u, v) = (x[r * w + c], y[r * w + c]);
                    sx += u;
                    sy += v;
                    sxx += u * u;
                    syy += v * v;
                    sxy += u * v;
                }
            }
            let (mx, my) = (sx / area, sy / area);
            let vx = (sxx / area - mx * mx).max(0.0);
            let vy = (syy / area - my * my).max(0.0);
            let cov = sxy / area - mx * my;
            total += ((2.0 * mx * my + c1) * (2.0 * cov + c2)) / ((mx * mx + my * my + c1) * (vx + vy + c2));
            count += 1;
        }
    }
    Ok(total / count as f64)
}

/// Fraction of ordered pairs `(i, j≠i)` where reconstruction `i` correlates
/// more with its own target than with target `j`.
pub fn two_way_identification(recon: &Tensor, truth: &Tensor) -> Result<f64> {
    Ok(fraction(&two_way_outcomes(recon, truth)?.concat()))
}

/// Per-query pairwise outcomes, `out[i]` has `Q−1` entries.
pub fn two_way_outcomes(recon: &Tensor, truth: &Tensor) -> Result<Vec<Vec<bool>>> {
    let (q, _) = check_matrix("two_way_identification", recon)?;
    if recon.shape() != truth.shape() {
        return Err(Error::ShapeMismatch {
            op: "two_way_identification",
            lhs: recon.shape().to_vec(),
            rhs: truth.shape().to_vec(),
        });
    }
    if q < 2 {
        return Err(Error::InvalidArgument("two-way identification needs at least 2 items".into()));
    }
    let corr: Vec<Vec<f64>> = (0..q)
        .map(|i| (0..q).map(|j| pearson(recon.row(i), truth.row(j))).collect::<Result<_>>())
        .collect::<Result<_>>()?;
    Ok((0..q)
        .map(|i| (0..q).filter(|&j| j != i).map(|j| corr[i][i] > corr[i][j]).collect())
        .collect())
}

/// Mean correlation distance `1 − r` between matched rows.
pub fn correlation_distance(recon: &Tensor, truth: &Tensor) -> Result<f64> {
    let (q, _) = check_matrix("correlation_distance", recon)?;
    if recon.shape() != truth.shape() {
        return Err(Error::ShapeMismatch {
            op: "correlation_distance",
            lhs: recon.shape().to_vec(),
            rhs: truth.shape().to_vec(),
        });
    }
    let mut s = 0.0;
    for i in 0..q {
        s += 1.0 - pearson(recon.row(i), truth.row(i))?;
    }
    Ok(s / q as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Interval {
    pub lo: f64,
    pub hi: f64,
}

/// Percentile bootstrap interval of the mean of per-item `values`. The
/// interval is widened if needed so it always contains the point estimate.
pub fn bootstrap_mean_ci(values: &[f64], resamples: usize, level: f64, seed: u64) -> Result<Interval> {
    if values.is_empty() || resamples == 0 {
        return Err(Error::InvalidArgument("bootstrap needs values and resamples".into()));
    }
    if !(0.0 < level && level < 1.0) {
        return Err(Error::InvalidArgument(format!("confidence level {level} outside (0, 1)")));
    }
    let n = values.len();
    let point = values.iter().sum::<f64>() / n as f64;
    let mut rng = rng_for(seed, "bootstrap");
    let mut means: Vec<f64> = (0..resamples)
        .map(|_| (0..n).map(|_| values[rng.gen_range(0..n)]).sum::<f64>() / n as f64)
        .collect();
    means.sort_by(f64::total_cmp);
    let alpha = (1.0 - level) / 2.0;
    let at = |q: f64| means[((q * resamples as f64).floor() as usize).min(resamples - 1)];
    Ok(Interval {
        lo: at(alpha).min(point),
        hi: at(1.0 - alpha).max(point),
    })
}

fn ln_choose(n: u64, k: u64) -> f64 {
    let lg = |m: u64| (1..=m).map(|i| (i as f64).ln()).sum::<f64>();
    lg(n) - lg(k) - lg(n - k)
}

/// `P(X ≤ k)` for `X ~ Binomial(n, p)`.
pub fn binomial_cdf(k: u64, n: u64, p: f64) -> f64 {
    (0..=k.min(n))
        .map(|i| {
            if p == 0.0 {
                return if i == 0 { 1.0 } else { 0.0 };
            }
            if p == 1.0 {
                return if i == n { 1.0 } else { 0.0 };
            }
            (ln_choose(n, i) + i as f64 * p.ln() + (n - i) as f64 * (1.0 - p).ln()).exp()
        })
        .sum::<f64>()
        .min(1.0)
}

/// Central interval `[lo, hi]` of success counts holding at least `level` of
/// the `Binomial(n, p)` mass, from exact quantiles.
pub fn binomial_interval(n: u64, p: f64, level: f64) -> (u64, u64) {
    let alpha = (1.0 - level) / 2.0;
    let quantile = |q: f64| (0..=n).find(|&k| binomial_cdf(k, n, p) >= q).unwrap_or(n);
    let lo = (0..=n).find(|&k| binomial_cdf(k, n, p) > alpha).unwrap_or(0);
    (lo, quantile(1.0 - alpha))
}
