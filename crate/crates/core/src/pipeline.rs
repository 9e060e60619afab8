//! Stage drivers shared by the command line and the tests: alignment and
//! prior training from a [`RunConfig`], the evaluation report, saliency
//! extraction and the batch-size × learning-rate sweep.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::attribution::{average_saliency, gradcam, SaliencyMap};
use crate::checkpoint::{prior_seed, AlignmentCheckpoint, PriorCheckpoint};
use crate::config::RunConfig;
use crate::contrastive::{epoch_batches, train_alignment, train_expert, AlignConfig, AlignmentData, EpochRecord, ModalityExpert};
use crate::data::SynthDataset;
use crate::error::{Error, Result};
use crate::metrics::{bootstrap_mean_ci, pearson, ssim, two_way_outcomes, union_hits, Interval, RetrievalResult};
use crate::modality::Modality;
use crate::prior::{prior_sample_trace, prior_train, PriorEpoch, PriorNetwork};
use crate::seed::derive_seed;
use crate::tensor::Tensor;

/// Checks that `dataset` was generated from `cfg.data` and preprocesses it.
pub fn prepare_data(dataset: &SynthDataset, cfg: &RunConfig) -> Result<AlignmentData> {
    if dataset.generation_config != cfg.data {
        return Err(Error::InvalidConfig(
            "dataset was generated with a different data section than the run config".into(),
        ));
    }
    AlignmentData::prepare(dataset, &cfg.preprocess)
}

fn steps_per_run(n: usize, cfg: &AlignConfig) -> u64 {
    (epoch_batches(n, cfg.batch_size, 0, 0).len() * cfg.epochs) as u64
}

/// Trains the three experts; `threads > 1` runs them concurrently.
pub fn run_alignment(data: &AlignmentData, cfg: &RunConfig, threads: usize) -> Result<(AlignmentCheckpoint, Vec<EpochRecord>)> {
    let (experts, log) = train_alignment(data, &cfg.encoder, &cfg.align, cfg.seed, threads)?;
    Ok((
        AlignmentCheckpoint {
            experts,
            whitening: data.whitening.clone(),
            step: steps_per_run(data.train_images.len(), &cfg.align),
        },
        log,
    ))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PriorRecord {
    pub modality: Modality,
    pub epoch: usize,
    pub loss: f64,
}

/// Training pairs of one prior: the expert's EEG embedding of every
/// training trial and the modality embedding of the image it showed.
pub fn prior_pairs(expert: &ModalityExpert, data: &AlignmentData) -> Result<(Tensor, Tensor)> {
    let cond = expert.embed_eeg(&data.train_x)?;
    let target = expert.embed_targets(&data.targets_for(expert.modality, &data.train_images))?;
    Ok((cond, target))
}

/// Trains one prior per expert.
pub fn run_priors(
    data: &AlignmentData,
    align: &AlignmentCheckpoint,
    cfg: &RunConfig,
    threads: usize,
) -> Result<(PriorCheckpoint, Vec<PriorRecord>)> {
    let run = |e: &ModalityExpert| -> Result<(PriorNetwork, Vec<PriorEpoch>)> {
        let (cond, target) = prior_pairs(e, data)?;
        prior_train(&cond, &target, &cfg.prior, prior_seed(cfg.seed, e.modality))
    };
    let results: Vec<Result<(PriorNetwork, Vec<PriorEpoch>)>> = if threads > 1 {
        std::thread::scope(|s| {
            let handles: Vec<_> = align.experts.iter().map(|e| s.spawn(move || run(e))).collect();
            handles.into_iter().map(|h| h.join().expect("prior thread panicked")).collect()
        })
    } else {
        align.experts.iter().map(run).collect()
    };
    let mut priors = Vec::new();
    let mut log = Vec::new();
    for (e, r) in align.experts.iter().zip(results) {
        let (net, epochs) = r?;
        priors.push(net);
        log.extend(epochs.into_iter().map(|p| PriorRecord {
            modality: e.modality,
            epoch: p.epoch,
            loss: p.loss,
        }));
    }
    log.sort_by_key(|r| (r.epoch, r.modality.index()));
    Ok((
        PriorCheckpoint {
            priors,
            step: steps_per_run(data.train_images.len(), &AlignConfig {
                batch_size: cfg.prior.batch_size,
                epochs: cfg.prior.epochs,
                optimizer: cfg.prior.optimizer,
            }),
        },
        log,
    ))
}

/// Point estimate with its bootstrap interval.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Estimate {
    pub value: f64,
    pub ci_low: f64,
    pub ci_high: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModalityRetrieval {
    pub modality: Modality,
    pub top1: Estimate,
    pub top5: Estimate,
}

/// Correct when any expert ranks the truth within k. An upper bound: no
/// single decision rule achieves it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UnionRetrieval {
    pub top1: Estimate,
    pub top5: Estimate,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureIdentification {
    /// Frozen embedder used as the feature network.
    pub extractor: Modality,
    pub two_way: Estimate,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModalityReconstruction {
    pub modality: Modality,
    /// Cosine of the EEG embedding itself to the true modality embedding.
    pub direct_cosine: Estimate,
    /// Cosine of the prior sample to the true modality embedding.
    pub prior_cosine: Estimate,
    pub pixcorr: Estimate,
    pub ssim: Estimate,
    pub two_way: Vec<FeatureIdentification>,
    /// Two-way identification pooled over all feature networks.
    pub two_way_combined: Estimate,
    /// Mean `1 − r` on image-network features; lower is better.
    pub correlation_distance: Estimate,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub config_hash: String,
    pub seed: u64,
    pub data_seed: u64,
    pub n_queries: usize,
    pub n_candidates: usize,
    pub ci_level: f64,
    pub retrieval: Vec<ModalityRetrieval>,
    pub union_upper_bound: UnionRetrieval,
    pub reconstruction: Vec<ModalityReconstruction>,
}

impl EvalReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes") + "\n"
    }
}

struct Estimator<'a> {
    cfg: &'a RunConfig,
}

impl Estimator<'_> {
    fn of(&self, label: &str, values: &[f64]) -> Result<Estimate> {
        let value = values.iter().sum::<f64>() / values.len() as f64;
        let Interval { lo, hi } = bootstrap_mean_ci(
            values,
            self.cfg.eval.bootstrap_resamples,
            self.cfg.eval.ci_level,
            derive_seed(self.cfg.seed, &format!("eval/bootstrap/{label}")),
        )?;
        Ok(Estimate {
            value,
            ci_low: lo,
            ci_high: hi,
        })
    }

    fn of_hits(&self, label: &str, hits: &[bool]) -> Result<Estimate> {
        let v: Vec<f64> = hits.iter().map(|&h| f64::from(u8::from(h))).collect();
        self.of(label, &v)
    }
}

/// Linear map from unit-norm modality embeddings back to raw targets,
/// `[e, 1] · W`, fitted by ridge regression on the training images.
#[derive(Debug, Clone, PartialEq)]
pub struct RidgeDecoder {
    weights: DMatrix<f64>,
}

fn to_matrix(t: &Tensor) -> DMatrix<f64> {
    DMatrix::from_row_slice(t.rows(), t.cols(), t.data())
}

fn from_matrix(m: &DMatrix<f64>) -> Tensor {
    Tensor::new(vec![m.nrows(), m.ncols()], m.transpose().as_slice().to_vec()).unwrap()
}

fn with_bias(x: &DMatrix<f64>) -> DMatrix<f64> {
    x.clone().insert_column(x.ncols(), 1.0)
}

impl RidgeDecoder {
    pub fn fit(embeddings: &Tensor, raw: &Tensor, lambda: f64) -> Result<Self> {
        if embeddings.rows() != raw.rows() {
            return Err(Error::ShapeMismatch {
                op: "ridge_fit",
                lhs: embeddings.shape().to_vec(),
                rhs: raw.shape().to_vec(),
            });
        }
        let x = with_bias(&to_matrix(embeddings));
        let mut gram = x.transpose() * &x;
        for i in 0..gram.nrows() - 1 {
            gram[(i, i)] += lambda;
        }
        let rhs = x.transpose() * to_matrix(raw);
        let weights = gram
            .cholesky()
            .ok_or_else(|| Error::LinAlg("ridge system is not positive definite".into()))?
            .solve(&rhs);
        Ok(Self { weights })
    }

    pub fn decode(&self, embeddings: &Tensor) -> Tensor {
        from_matrix(&(with_bias(&to_matrix(embeddings)) * &self.weights))
    }
}

/// Rows and columns of the grid a raw target vector is viewed as: the most
/// square factorization.
pub fn grid_shape(len: usize) -> (usize, usize) {
    let mut rows = (len as f64).sqrt().floor() as usize;
    while rows > 1 && len % rows != 0 {
        rows -= 1;
    }
    (rows.max(1), len / rows.max(1))
}

fn as_image(v: &[f64], lo: f64, hi: f64) -> Tensor {
    let (r, c) = grid_shape(v.len());
    let span = if hi > lo { hi - lo } else { 1.0 };
    let px = v.iter().map(|x| ((x - lo) / span).clamp(0.0, 1.0)).collect();
    Tensor::new(vec![r, c], px).unwrap()
}

fn distinct_test_images(data: &AlignmentData) -> Vec<usize> {
    let mut images = data.test_images.clone();
    images.sort_unstable();
    images.dedup();
    images
}

/// Full evaluation from trained checkpoints.
pub fn evaluate_pipeline(
    dataset: &SynthDataset,
    align: &AlignmentCheckpoint,
    priors: &PriorCheckpoint,
    cfg: &RunConfig,
) -> Result<EvalReport> {
    let data = prepare_data(dataset, cfg)?;
    if data.whitening != align.whitening {
        return Err(Error::CheckpointMismatch(
            "dataset whitening differs from the one stored with the experts".into(),
        ));
    }
    let queries = align
        .experts
        .iter()
        .map(|e| e.embed_eeg(&data.test_x))
        .collect::<Result<Vec<_>>>()?;
    evaluate_queries(&data, &align.experts, &priors.priors, &queries, cfg)
}

/// Evaluation with the per-modality query embeddings supplied directly,
/// e.g. to score an oracle that looks up the true modality embeddings.
pub fn evaluate_queries(
    data: &AlignmentData,
    experts: &[ModalityExpert],
    priors: &[PriorNetwork],
    queries: &[Tensor],
    cfg: &RunConfig,
) -> Result<EvalReport> {
    cfg.eval.validate()?;
    if experts.len() != priors.len() || experts.len() != queries.len() || experts.is_empty() {
        return Err(Error::InvalidArgument("need one expert, prior and query set per modality".into()));
    }
    let est = Estimator { cfg };
    let images = distinct_test_images(data);
    let truth: Vec<usize> = data
        .test_images
        .iter()
        .map(|i| images.binary_search(i).unwrap())
        .collect();
    let k5 = images.len().min(5);

    let mut retrieval = Vec::new();
    let mut rankings = Vec::new();
    for (e, q) in experts.iter().zip(queries) {
        let candidates = e.embed_targets(&data.targets_for(e.modality, &images))?;
        let r = RetrievalResult::new(e.modality, q, &candidates, &truth)?;
        let name = e.modality.name();
        retrieval.push(ModalityRetrieval {
            modality: e.modality,
            top1: est.of_hits(&format!("{name}/top1"), &r.hits(1)?)?,
            top5: est.of_hits(&format!("{name}/top5"), &r.hits(k5)?)?,
        });
        rankings.push(r.rankings);
    }
    let union_upper_bound = UnionRetrieval {
        top1: est.of_hits("union/top1", &union_hits(&rankings, &truth, 1)?)?,
        top5: est.of_hits("union/top5", &union_hits(&rankings, &truth, k5)?)?,
    };

    let mut reconstruction = Vec::new();
    for ((e, prior), q) in experts.iter().zip(priors).zip(queries) {
        reconstruction.push(reconstruct(&est, data, experts, e, prior, q, cfg)?);
    }

    Ok(EvalReport {
        config_hash: cfg.hash(),
        seed: cfg.seed,
        data_seed: cfg.data.seed,
        n_queries: data.test_images.len(),
        n_candidates: images.len(),
        ci_level: cfg.eval.ci_level,
        retrieval,
        union_upper_bound,
        reconstruction,
    })
}

fn row_cosines(a: &Tensor, b: &Tensor) -> Vec<f64> {
    (0..a.rows())
        .map(|r| {
            let (x, y) = (a.row(r), b.row(r));
            let dot: f64 = x.iter().zip(y).map(|(u, v)| u * v).sum();
            let n = (x.iter().map(|v| v * v).sum::<f64>() * y.iter().map(|v| v * v).sum::<f64>()).sqrt();
            dot / n
        })
        .collect()
}

fn per_query_two_way(recon: &Tensor, truth: &Tensor) -> Result<Vec<f64>> {
    Ok(two_way_outcomes(recon, truth)?
        .iter()
        .map(|row| row.iter().filter(|&&c| c).count() as f64 / row.len() as f64)
        .collect())
}

fn reconstruct(
    est: &Estimator,
    data: &AlignmentData,
    experts: &[ModalityExpert],
    expert: &ModalityExpert,
    prior: &PriorNetwork,
    queries: &Tensor,
    cfg: &RunConfig,
) -> Result<ModalityReconstruction> {
    let m = expert.modality;
    let name = m.name();
    let truth_raw = data.targets_for(m, &data.test_images);
    let truth_emb = expert.embed_targets(&truth_raw)?;

    let schedule = cfg.prior.schedule()?;
    let sample_seed = derive_seed(cfg.seed, &format!("eval/sample/{}/{name}", cfg.eval.sample_seed));
    let (sample, _) = prior_sample_trace(prior, queries, &schedule, cfg.prior.sample_steps, cfg.prior.guidance(), sample_seed)?;

    let mut train_images = data.train_images.clone();
    train_images.sort_unstable();
    train_images.dedup();
    let train_raw = data.targets_for(m, &train_images);
    let decoder = RidgeDecoder::fit(&expert.embed_targets(&train_raw)?, &train_raw, cfg.eval.ridge_lambda)?;
    let recon = decoder.decode(&sample);

    let lo = train_raw.data().iter().copied().fold(f64::INFINITY, f64::min);
    let hi = train_raw.data().iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let q = recon.rows();
    let mut pix = Vec::with_capacity(q);
    let mut ss = Vec::with_capacity(q);
    for r in 0..q {
        pix.push(pearson(recon.row(r), truth_raw.row(r))?);
        let (a, b) = (as_image(recon.row(r), lo, hi), as_image(truth_raw.row(r), lo, hi));
        let window = cfg.eval.ssim_window.min(a.shape()[0]).min(a.shape()[1]);
        ss.push(ssim(&a, &b, window)?);
    }

    let mut two_way = Vec::new();
    let mut pooled = vec![0.0; q];
    let mut distance = Vec::new();
    for x in experts {
        let fr = x.embedder.features(&recon)?;
        let ft = x.embedder.features(&truth_raw)?;
        let per = per_query_two_way(&fr, &ft)?;
        for (p, v) in pooled.iter_mut().zip(&per) {
            *p += v / experts.len() as f64;
        }
        two_way.push(FeatureIdentification {
            extractor: x.modality,
            two_way: est.of(&format!("{name}/two_way/{}", x.modality.name()), &per)?,
        });
        if x.modality == Modality::Image {
            distance = (0..q).map(|r| Ok(1.0 - pearson(fr.row(r), ft.row(r))?)).collect::<Result<_>>()?;
        }
    }
    if distance.is_empty() {
        let (fr, ft) = (experts[0].embedder.features(&recon)?, experts[0].embedder.features(&truth_raw)?);
        distance = (0..q).map(|r| Ok(1.0 - pearson(fr.row(r), ft.row(r))?)).collect::<Result<_>>()?;
    }

    Ok(ModalityReconstruction {
        modality: m,
        direct_cosine: est.of(&format!("{name}/direct_cosine"), &row_cosines(queries, &truth_emb))?,
        prior_cosine: est.of(&format!("{name}/prior_cosine"), &row_cosines(&sample, &truth_emb))?,
        pixcorr: est.of(&format!("{name}/pixcorr"), &pix)?,
        ssim: est.of(&format!("{name}/ssim"), &ss)?,
        two_way,
        two_way_combined: est.of(&format!("{name}/two_way/combined"), &pooled)?,
        correlation_distance: est.of(&format!("{name}/correlation_distance"), &distance)?,
    })
}

/// Grad-CAM saliency of every expert on the repetition-averaged test
/// trials, one map per modality.
pub fn attribute(experts: &[ModalityExpert], data: &AlignmentData) -> Result<Vec<SaliencyMap>> {
    experts
        .iter()
        .map(|e| {
            let t = data.targets_for(e.modality, &data.test_images);
            average_saliency(&[gradcam(e, &data.test_x, &t)?])
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub modality: Modality,
    pub batch_size: usize,
    pub lr: f64,
    pub test_top1: f64,
    pub test_top5: f64,
    pub final_loss: f64,
}

/// Trains one expert per grid point and records its final test accuracy.
/// Grid points run on up to `threads` threads; output order is grid order.
pub fn sweep(
    data: &AlignmentData,
    cfg: &RunConfig,
    modality: Modality,
    batch_sizes: &[usize],
    lrs: &[f64],
    threads: usize,
) -> Result<Vec<SweepPoint>> {
    let grid: Vec<(usize, f64)> = batch_sizes.iter().flat_map(|&b| lrs.iter().map(move |&l| (b, l))).collect();
    if grid.is_empty() {
        return Err(Error::InvalidArgument("sweep grid is empty".into()));
    }
    let run = |&(batch_size, lr): &(usize, f64)| -> Result<SweepPoint> {
        let mut align = cfg.align.clone();
        align.batch_size = batch_size;
        align.optimizer.lr = lr;
        let (_, log) = train_expert(modality, data, &cfg.encoder, &align, cfg.seed, |_, _| Ok(()))?;
        let last = log.last().expect("at least one epoch");
        Ok(SweepPoint {
            modality,
            batch_size,
            lr,
            test_top1: last.test_top1,
            test_top5: last.test_top5,
            final_loss: last.loss,
        })
    };
    let mut out = Vec::with_capacity(grid.len());
    for chunk in grid.chunks(threads.max(1)) {
        let results: Vec<Result<SweepPoint>> = std::thread::scope(|s| {
            let handles: Vec<_> = chunk.iter().map(|p| s.spawn(move || run(p))).collect();
            handles.into_iter().map(|h| h.join().expect("sweep thread panicked")).collect()
        });
        for r in results {
            out.push(r?);
        }
    }
    Ok(out)
}
