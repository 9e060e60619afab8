//! Multi-positive InfoNCE with a learnable temperature, and the alignment
//! training loop that fits one EEG expert per modality.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, NodeId};
use crate::data::{preprocess_test, preprocess_train, stack_signals, PreprocessConfig, SynthDataset};
use crate::embedders::{embed_modality, embed_modality_node, embedder_init, FrozenEmbedder, ResidualProjection};
use crate::encoder::{EegEncoder, EncoderConfig};
use crate::error::{Error, Result};
use crate::metrics::RetrievalResult;
use crate::modality::Modality;
use crate::optim::{AdamW, AdamWConfig};
use crate::seed::{derive_seed, rng_for};
use crate::tensor::Tensor;

/// Upper bound on the inverse temperature.
pub const MAX_INV_TEMP: f64 = 100.0;
pub const INIT_TAU: f64 = 0.07;

/// `mask[a][b]` is true iff items `a` and `b` show the same image.
pub fn positive_mask(image_indices: &[usize]) -> Vec<Vec<bool>> {
    image_indices
        .iter()
        .map(|a| image_indices.iter().map(|b| a == b).collect())
        .collect()
}

fn mask_tensor(mask: &[Vec<bool>]) -> Tensor {
    let n = mask.len();
    let data = mask.iter().flatten().map(|&b| if b { 1.0 } else { 0.0 }).collect();
    Tensor::new(vec![n, n], data).unwrap()
}

/// Query/key embeddings with the image index of each row.
#[derive(Debug, Clone, PartialEq)]
pub struct ContrastiveBatch {
    pub q: Tensor,
    pub k: Tensor,
    pub image_indices: Vec<usize>,
}

impl ContrastiveBatch {
    pub fn new(q: Tensor, k: Tensor, image_indices: Vec<usize>) -> Result<Self> {
        if q.shape().len() != 2 || q.shape() != k.shape() {
            return Err(Error::ShapeMismatch {
                op: "contrastive_batch",
                lhs: q.shape().to_vec(),
                rhs: k.shape().to_vec(),
            });
        }
        let n = q.shape()[0];
        if n < 2 || image_indices.len() != n {
            return Err(Error::InvalidArgument(format!(
                "batch of {n} rows with {} indices (need at least 2)",
                image_indices.len()
            )));
        }
        for t in [&q, &k] {
            for r in 0..n {
                let norm = t.row(r).iter().map(|v| v * v).sum::<f64>().sqrt();
                if (norm - 1.0).abs() > 1e-9 {
                    return Err(Error::InvalidArgument(format!("row {r} has norm {norm}, expected 1")));
                }
            }
        }
        Ok(Self { q, k, image_indices })
    }
}

/// Mean over anchors (columns of `s`) of
/// `log Σ_a exp(s[a,b]) − log Σ_{a positive} exp(s[a,b])`.
fn column_anchor_loss(g: &mut Graph, s: NodeId, mask: NodeId) -> Result<NodeId> {
    // Column maxima, held constant, keep the exponentials in range without
    // changing the value or the gradient.
    let (n, m) = (g.shape(s)[0], g.shape(s)[1]);
    let sv = g.value(s).data();
    let maxes: Vec<f64> = (0..m)
        .map(|b| (0..n).map(|a| sv[a * m + b]).fold(f64::NEG_INFINITY, f64::max))
        .collect();
    let shift = g.constant(Tensor::new(vec![m], maxes)?);
    let shifted = g.sub(s, shift)?;
    let e = g.exp(shifted)?;
    let total = g.sum_axis(e, 0)?;
    let pos = g.mul(e, mask)?;
    let pos = g.sum_axis(pos, 0)?;
    let lt = g.log(total)?;
    let lp = g.log(pos)?;
    let per_anchor = g.sub(lt, lp)?;
    g.mean_all(per_anchor)
}

/// One-sided loss with keys as anchors. `scale` is a one-element node
/// holding the inverse temperature.
pub fn info_nce_node(g: &mut Graph, q: NodeId, k: NodeId, mask: &[Vec<bool>], scale: NodeId) -> Result<NodeId> {
    let kt = g.transpose(k)?;
    let s = g.matmul(q, kt)?;
    let s = g.scale_by(s, scale)?;
    let m = g.constant(mask_tensor(mask));
    column_anchor_loss(g, s, m)
}

/// `info_nce(q, k) + info_nce(k, q)`.
pub fn symmetric_loss_node(g: &mut Graph, q: NodeId, k: NodeId, mask: &[Vec<bool>], scale: NodeId) -> Result<NodeId> {
    let a = info_nce_node(g, q, k, mask, scale)?;
    let b = info_nce_node(g, k, q, mask, scale)?;
    g.add(a, b)
}

fn check_tau(tau: f64) -> Result<()> {
    if !(tau > 0.0) || !tau.is_finite() {
        return Err(Error::InvalidArgument(format!("temperature must be positive, got {tau}")));
    }
    Ok(())
}

pub fn info_nce(batch: &ContrastiveBatch, tau: f64) -> Result<f64> {
    check_tau(tau)?;
    let mut g = Graph::new();
    let q = g.constant(batch.q.clone());
    let k = g.constant(batch.k.clone());
    let scale = g.constant(Tensor::scalar(1.0 / tau));
    let l = info_nce_node(&mut g, q, k, &positive_mask(&batch.image_indices), scale)?;
    Ok(g.value(l).item())
}

pub fn symmetric_loss(batch: &ContrastiveBatch, tau: f64) -> Result<f64> {
    check_tau(tau)?;
    let mut g = Graph::new();
    let q = g.constant(batch.q.clone());
    let k = g.constant(batch.k.clone());
    let scale = g.constant(Tensor::scalar(1.0 / tau));
    let l = symmetric_loss_node(&mut g, q, k, &positive_mask(&batch.image_indices), scale)?;
    Ok(g.value(l).item())
}

/// Learnable log inverse temperature.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Temperature {
    pub log_inv_temp: f64,
}

impl Default for Temperature {
    fn default() -> Self {
        Self {
            log_inv_temp: (1.0 / INIT_TAU).ln(),
        }
    }
}

impl Temperature {
    pub fn inv_temp(&self) -> f64 {
        self.log_inv_temp.exp().min(MAX_INV_TEMP)
    }

    pub fn tau(&self) -> f64 {
        1.0 / self.inv_temp()
    }

    /// Binds the parameter and returns `(param, inverse temperature)`.
    /// Past the clamp the inverse temperature is a constant, so the
    /// parameter gets no gradient there.
    pub fn bind(&self, g: &mut Graph) -> Result<(NodeId, NodeId)> {
        let p = g.param(Tensor::scalar(self.log_inv_temp));
        let scale = if self.log_inv_temp.exp() < MAX_INV_TEMP {
            g.exp(p)?
        } else {
            g.constant(Tensor::scalar(MAX_INV_TEMP))
        };
        Ok((p, scale))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AlignConfig {
    pub batch_size: usize,
    pub epochs: usize,
    pub optimizer: AdamWConfig,
}

impl Default for AlignConfig {
    fn default() -> Self {
        Self {
            batch_size: 128,
            epochs: 30,
            optimizer: AdamWConfig::default(),
        }
    }
}

impl AlignConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size < 2 {
            return Err(Error::InvalidConfig("batch_size must be at least 2".into()));
        }
        if self.epochs == 0 {
            return Err(Error::InvalidConfig("epochs must be at least 1".into()));
        }
        if !(self.optimizer.lr > 0.0) {
            return Err(Error::InvalidConfig("learning rate must be positive".into()));
        }
        Ok(())
    }
}

/// Preprocessed tensors the alignment stage works from.
#[derive(Debug, Clone, PartialEq)]
pub struct AlignmentData {
    /// `(N, C, T)`.
    pub train_x: Tensor,
    pub train_images: Vec<usize>,
    /// Repetition-averaged test trials, `(Q, C, T)`.
    pub test_x: Tensor,
    pub test_images: Vec<usize>,
    /// Raw targets per modality, row = image index.
    pub targets: [Tensor; 3],
    /// Channel whitening matrix estimated on the training trials.
    pub whitening: Tensor,
}

impl AlignmentData {
    pub fn prepare(dataset: &SynthDataset, cfg: &PreprocessConfig) -> Result<Self> {
        let (whitening, train) = preprocess_train(&dataset.train_trials, cfg)?;
        let test = preprocess_test(&dataset.test_trials, &whitening, cfg)?;
        Ok(Self {
            train_x: stack_signals(&train)?,
            train_images: train.iter().map(|t| t.image_index).collect(),
            test_x: stack_signals(&test)?,
            test_images: test.iter().map(|t| t.image_index).collect(),
            targets: dataset.modality_targets.clone(),
            whitening,
        })
    }

    pub fn raw_dim(&self) -> usize {
        self.targets[0].shape()[1]
    }

    pub fn channels(&self) -> usize {
        self.train_x.shape()[1]
    }

    pub fn samples(&self) -> usize {
        self.train_x.shape()[2]
    }

    /// Raw targets of the given images for one modality.
    pub fn targets_for(&self, m: Modality, images: &[usize]) -> Tensor {
        self.targets[m.index()].select_rows(images)
    }
}

/// EEG encoder, frozen modality embedder, its projection and temperature.
#[derive(Debug, Clone, PartialEq)]
pub struct ModalityExpert {
    pub modality: Modality,
    pub encoder: EegEncoder,
    pub embedder: FrozenEmbedder,
    pub projection: ResidualProjection,
    pub temperature: Temperature,
}

impl ModalityExpert {
    pub fn init(modality: Modality, encoder_cfg: EncoderConfig, raw_dim: usize, master_seed: u64) -> Result<Self> {
        let enc_seed = derive_seed(master_seed, &format!("encoder/{}", modality.name()));
        let (embedder, projection) = embedder_init(modality, master_seed, raw_dim, encoder_cfg.embed_dim);
        Ok(Self {
            modality,
            encoder: EegEncoder::init(encoder_cfg, enc_seed)?,
            embedder,
            projection,
            temperature: Temperature::default(),
        })
    }

    /// Unit-norm EEG embeddings in eval mode.
    pub fn embed_eeg(&self, x: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let z = g.constant(self.encoder.embed(x)?);
        let z = g.l2_normalize(z)?;
        Ok(g.value(z).clone())
    }

    /// Unit-norm modality embeddings of raw targets.
    pub fn embed_targets(&self, targets: &Tensor) -> Result<Tensor> {
        embed_modality(&self.embedder, &self.projection, targets)
    }

    /// Test retrieval of every query against all distinct test images.
    pub fn retrieval(&self, data: &AlignmentData) -> Result<RetrievalResult> {
        let mut images = data.test_images.clone();
        images.sort_unstable();
        images.dedup();
        let candidates = self.embed_targets(&data.targets_for(self.modality, &images))?;
        let queries = self.embed_eeg(&data.test_x)?;
        let truth: Vec<usize> = data
            .test_images
            .iter()
            .map(|i| images.binary_search(i).unwrap())
            .collect();
        RetrievalResult::new(self.modality, &queries, &candidates, &truth)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub modality: Modality,
    pub loss: f64,
    pub test_top1: f64,
    pub test_top5: f64,
    pub tau: f64,
}

/// Shuffled minibatches for one epoch. A trailing batch of one item is
/// dropped since it has no negatives.
pub fn epoch_batches(n: usize, batch_size: usize, seed: u64, epoch: usize) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng_for(seed, &format!("shuffle/{epoch}")));
    order
        .chunks(batch_size)
        .filter(|c| c.len() >= 2)
        .map(<[usize]>::to_vec)
        .collect()
}

/// One optimization step on `batch`; returns the loss before the update.
fn train_step(expert: &mut ModalityExpert, opt: &mut AdamW, data: &AlignmentData, batch: &[usize]) -> Result<f64> {
    let images: Vec<usize> = batch.iter().map(|&i| data.train_images[i]).collect();
    let x = data.train_x.select_rows(batch);
    let targets = data.targets_for(expert.modality, &images);

    let mut g = Graph::new();
    let enc_p = expert.encoder.params.bind(&mut g, true);
    let proj_p = expert.projection.params.bind(&mut g, true);
    let (temp_p, scale) = expert.temperature.bind(&mut g)?;

    let xn = g.constant(x);
    let out = expert.encoder.forward(&mut g, &enc_p, xn, true)?;
    let q = g.l2_normalize(out.embedding)?;
    let tn = g.constant(targets);
    let k = embed_modality_node(&mut g, &expert.embedder, &expert.projection, &proj_p, tn)?;
    let loss = symmetric_loss_node(&mut g, q, k, &positive_mask(&images), scale)?;
    let loss_value = g.value(loss).item();

    let mut ids: Vec<NodeId> = enc_p.ids().to_vec();
    ids.extend_from_slice(proj_p.ids());
    ids.push(temp_p);
    let grads = g.grad(loss, &ids)?;
    if grads.iter().any(|t| !t.all_finite()) {
        return Err(Error::NonFinite { op: "alignment gradient" });
    }

    let mut temp = Tensor::scalar(expert.temperature.log_inv_temp);
    {
        let mut params: Vec<&mut Tensor> = expert.encoder.params.tensors_mut().iter_mut().collect();
        params.extend(expert.projection.params.tensors_mut().iter_mut());
        params.push(&mut temp);
        let mut decay = vec![true; params.len()];
        *decay.last_mut().unwrap() = false;
        opt.step(&mut params, &grads, &decay);
    }
    expert.temperature.log_inv_temp = temp.item();
    if let Some(stats) = out.batch_stats {
        let elems = expert.encoder.bn_elems(batch.len());
        expert.encoder.update_running_stats(&stats, elems);
    }
    Ok(loss_value)
}

fn optimizer_for(expert: &ModalityExpert, cfg: &AdamWConfig) -> AdamW {
    let temp = Tensor::scalar(0.0);
    let mut shapes: Vec<&Tensor> = expert.encoder.params.tensors().iter().collect();
    shapes.extend(expert.projection.params.tensors());
    shapes.push(&temp);
    AdamW::new(*cfg, &shapes)
}

/// Trains one modality expert. `on_epoch` sees the expert after every
/// completed epoch, so a caller can persist the last good state. A
/// non-finite loss aborts with [`Error::Diverged`].
pub fn train_expert(
    modality: Modality,
    data: &AlignmentData,
    encoder_cfg: &EncoderConfig,
    cfg: &AlignConfig,
    seed: u64,
    mut on_epoch: impl FnMut(&ModalityExpert, &EpochRecord) -> Result<()>,
) -> Result<(ModalityExpert, Vec<EpochRecord>)> {
    cfg.validate()?;
    if encoder_cfg.channels != data.channels() || encoder_cfg.samples != data.samples() {
        return Err(Error::InvalidConfig(format!(
            "encoder expects {}x{} inputs, data has {}x{}",
            encoder_cfg.channels,
            encoder_cfg.samples,
            data.channels(),
            data.samples()
        )));
    }
    let mut expert = ModalityExpert::init(modality, encoder_cfg.clone(), data.raw_dim(), seed)?;
    let mut opt = optimizer_for(&expert, &cfg.optimizer);
    let shuffle_seed = derive_seed(seed, &format!("align/{}", modality.name()));
    let n = data.train_images.len();
    let mut log = Vec::with_capacity(cfg.epochs);

    for epoch in 0..cfg.epochs {
        let mut total = 0.0;
        let batches = epoch_batches(n, cfg.batch_size, shuffle_seed, epoch);
        for batch in &batches {
            let loss = train_step(&mut expert, &mut opt, data, batch).map_err(|e| match e {
                Error::NonFinite { op } => Error::Diverged {
                    stage: "alignment".into(),
                    detail: format!("{modality} epoch {epoch}: non-finite value in {op}"),
                },
                other => other,
            })?;
            total += loss;
        }
        let retrieval = expert.retrieval(data)?;
        let top5 = retrieval.rankings.first().map_or(1, |r| r.len().min(5));
        let record = EpochRecord {
            epoch,
            modality,
            loss: total / batches.len() as f64,
            test_top1: retrieval.topk(1)?,
            test_top5: retrieval.topk(top5)?,
            tau: expert.temperature.tau(),
        };
        on_epoch(&expert, &record)?;
        log.push(record);
    }
    Ok((expert, log))
}

/// Trains all three experts, on parallel threads when `threads > 1`.
pub fn train_alignment(
    data: &AlignmentData,
    encoder_cfg: &EncoderConfig,
    cfg: &AlignConfig,
    seed: u64,
    threads: usize,
) -> Result<(Vec<ModalityExpert>, Vec<EpochRecord>)> {
    let run = |m: Modality| train_expert(m, data, encoder_cfg, cfg, seed, |_, _| Ok(()));
    let results: Vec<Result<(ModalityExpert, Vec<EpochRecord>)>> = if threads > 1 {
        std::thread::scope(|s| {
            let handles: Vec<_> = Modality::ALL.iter().map(|&m| s.spawn(move || run(m))).collect();
            handles.into_iter().map(|h| h.join().expect("training thread panicked")).collect()
        })
    } else {
        Modality::ALL.iter().map(|&m| run(m)).collect()
    };
    let mut experts = Vec::new();
    let mut log = Vec::new();
    for r in results {
        let (e, l) = r?;
        experts.push(e);
        log.extend(l);
    }
    log.sort_by_key(|r| (r.epoch, r.modality.index()));
    Ok((experts, log))
}

/// Training log as JSON lines.
pub fn log_to_jsonl(log: &[EpochRecord]) -> String {
    log.iter()
        .map(|r| serde_json::to_string(r).unwrap() + "\n")
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::finite_diff_check;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    fn unit_rows(n: usize, d: usize, seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut data = Vec::with_capacity(n * d);
        for _ in 0..n {
            let row: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
            let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            data.extend(row.iter().map(|v| v / norm));
        }
        Tensor::new(vec![n, d], data).unwrap()
    }

    fn same_rows(n: usize, d: usize) -> Tensor {
        let mut row = vec![0.0; d];
        row[0] = 1.0;
        Tensor::new(vec![n, d], row.repeat(n)).unwrap()
    }

    #[test]
    fn mask_examples() {
        let m = positive_mask(&[7, 7, 3]);
        assert_eq!(m, vec![vec![true, true, false], vec![true, true, false], vec![false, false, true]]);
        let id = positive_mask(&[0, 1, 2]);
        assert!((0..3).all(|i| (0..3).all(|j| id[i][j] == (i == j))));
        assert!(positive_mask(&[4; 5]).iter().flatten().all(|&b| b));
    }

    #[test]
    fn uniform_logits_closed_forms() {
        let b = ContrastiveBatch::new(same_rows(4, 3), same_rows(4, 3), vec![0, 1, 2, 3]).unwrap();
        assert!((info_nce(&b, 0.07).unwrap() - 4f64.ln()).abs() < 1e-9);
        assert!((symmetric_loss(&b, 0.5).unwrap() - 2.0 * 4f64.ln()).abs() < 1e-9);
        let b = ContrastiveBatch::new(same_rows(4, 3), same_rows(4, 3), vec![0, 0, 1, 1]).unwrap();
        assert!((info_nce(&b, 1.0).unwrap() - 2f64.ln()).abs() < 1e-9);
        let b = ContrastiveBatch::new(same_rows(4, 3), same_rows(4, 3), vec![5; 4]).unwrap();
        assert!(info_nce(&b, 0.3).unwrap().abs() < 1e-9);
    }

    #[test]
    fn orthonormal_pair() {
        let e = Tensor::new(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let b = ContrastiveBatch::new(e.clone(), e, vec![0, 1]).unwrap();
        let expect = -(1f64.exp() / (1f64.exp() + 1.0)).ln();
        assert!((info_nce(&b, 1.0).unwrap() - expect).abs() < 1e-12);
        assert!((expect - 0.313262).abs() < 1e-6);
        assert!((symmetric_loss(&b, 1.0).unwrap() - 2.0 * expect).abs() < 1e-12);
    }

    #[test]
    fn symmetric_is_sum_of_both_directions() {
        let q = unit_rows(6, 5, 1);
        let k = unit_rows(6, 5, 2);
        let idx = vec![0, 1, 1, 2, 3, 3];
        let fwd = ContrastiveBatch::new(q.clone(), k.clone(), idx.clone()).unwrap();
        let bwd = ContrastiveBatch::new(k, q, idx).unwrap();
        let sum = info_nce(&fwd, 0.2).unwrap() + info_nce(&bwd, 0.2).unwrap();
        assert!((symmetric_loss(&fwd, 0.2).unwrap() - sum).abs() < 1e-12);
    }

    #[test]
    fn invalid_inputs() {
        let q = unit_rows(3, 4, 1);
        let b = ContrastiveBatch::new(q.clone(), q.clone(), vec![0, 1, 2]).unwrap();
        assert!(info_nce(&b, 0.0).is_err());
        assert!(info_nce(&b, -1.0).is_err());
        assert!(ContrastiveBatch::new(q.clone(), q.clone(), vec![0, 1]).is_err());
        assert!(ContrastiveBatch::new(Tensor::ones(&[3, 4]), q, vec![0, 1, 2]).is_err());
    }

    #[test]
    fn large_inverse_temperature_stays_finite() {
        // unshifted, exp(1000) would overflow
        let q = unit_rows(8, 4, 3);
        let b = ContrastiveBatch::new(q.clone(), q, (0..8).collect()).unwrap();
        assert!(info_nce(&b, 1e-3).unwrap().is_finite());
    }

    #[test]
    fn temperature_clamp() {
        let t = Temperature::default();
        assert!((t.tau() - 0.07).abs() < 1e-12);
        let hot = Temperature { log_inv_temp: 10.0 };
        assert_eq!(hot.inv_temp(), MAX_INV_TEMP);
        let mut g = Graph::new();
        let (p, s) = hot.bind(&mut g).unwrap();
        let l = g.sum_all(s).unwrap();
        assert_eq!(g.grad(l, &[p]).unwrap()[0].item(), 0.0);
    }

    #[test]
    fn symmetric_loss_gradient_matches_finite_differences() {
        for seed in 0..20 {
            let q = unit_rows(5, 4, seed);
            let k = unit_rows(5, 4, seed + 100);
            let mask = positive_mask(&[0, 1, 1, 2, 0]);
            let lit = Tensor::scalar(1.3);
            let err = finite_diff_check(
                |g, p| {
                    let q = g.l2_normalize(p[0])?;
                    let k = g.l2_normalize(p[1])?;
                    let s = g.exp(p[2])?;
                    symmetric_loss_node(g, q, k, &mask, s)
                },
                &[q, k, lit],
                1e-6,
            )
            .unwrap();
            assert!(err < 1e-4, "seed {seed}: {err}");
        }
    }

    #[test]
    fn duplicate_positive_never_hurts_partner() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for trial in 0..50 {
            let n = 6;
            let q = unit_rows(n, 4, 1000 + trial);
            let mut k = unit_rows(n, 4, 2000 + trial);
            // item 1 duplicates the image of item 0
            let row0 = k.row(0).to_vec();
            k.data_mut()[4..8].copy_from_slice(&row0);
            let scale: f64 = rng.gen_range(1.0..20.0);
            let per_anchor = |mask: &[Vec<bool>]| {
                let mut g = Graph::new();
                let qn = g.constant(q.clone());
                let kt = g.constant(k.clone());
                let kt = g.transpose(kt).unwrap();
                let s = g.matmul(qn, kt).unwrap();
                let s = g.scale(s, scale).unwrap();
                let sv = g.value(s).data().to_vec();
                // anchor 0 column
                let col: Vec<f64> = (0..n).map(|a| sv[a * n]).collect();
                let total: f64 = col.iter().map(|v| v.exp()).sum();
                let pos: f64 = (0..n).filter(|&a| mask[a][0]).map(|a| col[a].exp()).sum();
                total.ln() - pos.ln()
            };
            let multi = positive_mask(&[0, 0, 1, 2, 3, 4]);
            let single = positive_mask(&[0, 5, 1, 2, 3, 4]);
            assert!(per_anchor(&multi) <= per_anchor(&single) + 1e-15);
        }
    }

    #[test]
    fn retrieval_argmax_ignores_temperature() {
        let q = unit_rows(10, 6, 1);
        let c = unit_rows(10, 6, 2);
        let top = |tau: f64| -> Vec<usize> {
            (0..10)
                .map(|i| {
                    let logits: Vec<f64> = (0..10)
                        .map(|j| q.row(i).iter().zip(c.row(j)).map(|(a, b)| a * b).sum::<f64>() / tau)
                        .collect();
                    crate::metrics::rank_scores(&logits)[0]
                })
                .collect()
        };
        let base = top(0.07);
        for tau in [0.01, 0.5, 3.0, 70.0] {
            assert_eq!(top(tau), base);
        }
    }

    #[test]
    fn batches_cover_everything_once() {
        let b = epoch_batches(10, 4, 1, 0);
        let mut all: Vec<usize> = b.concat();
        all.sort_unstable();
        assert_eq!(all, (0..10).collect::<Vec<_>>());
        assert_eq!(b, epoch_batches(10, 4, 1, 0));
        assert_ne!(b, epoch_batches(10, 4, 1, 1));
        assert_eq!(epoch_batches(9, 4, 1, 0).concat().len(), 8);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(64))]

            #[test]
            fn loss_is_never_negative(
                seed in any::<u64>(),
                images in proptest::collection::vec(0usize..4, 2..8),
                tau in 0.01f64..5.0,
            ) {
                let n = images.len();
                let batch = ContrastiveBatch::new(unit_rows(n, 5, seed), unit_rows(n, 5, seed ^ 3), images).unwrap();
                prop_assert!(info_nce(&batch, tau).unwrap() >= 0.0);
                prop_assert!(symmetric_loss(&batch, tau).unwrap() >= 0.0);
            }

            #[test]
            fn all_positive_batch_has_zero_loss(seed in any::<u64>(), n in 2usize..8, tau in 0.01f64..5.0) {
                let batch = ContrastiveBatch::new(unit_rows(n, 5, seed), unit_rows(n, 5, seed ^ 5), vec![7; n]).unwrap();
                prop_assert!(info_nce(&batch, tau).unwrap().abs() < 1e-9);
            }
        }
    }
}
