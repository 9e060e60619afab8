//! Frozen stand-in modality encoders and the trainable residual projection
//! placed on top of them.

use rand::Rng;
use rand_distr::StandardNormal;

use crate::autodiff::{Graph, NodeId};
use crate::error::Result;
use crate::modality::Modality;
use crate::params::{uniform_init, Bound, ParamStore};
use crate::seed::{derive_seed, rng_for};
use crate::tensor::Tensor;

/// First-layer weight scale; large enough that GELU operates in its curved
/// region on unit-norm inputs.
const FROZEN_GAIN: f64 = 1.5;

/// Random two-layer GELU network, never trained.
#[derive(Debug, Clone, PartialEq)]
pub struct FrozenEmbedder {
    pub modality: Modality,
    pub params: ParamStore,
}

impl FrozenEmbedder {
    pub fn new(modality: Modality, seed: u64, raw_dim: usize, embed_dim: usize) -> Self {
        let mut rng = rng_for(seed, "frozen");
        let hidden = 2 * embed_dim;
        let mut normal = |n: usize, scale: f64| -> Vec<f64> {
            (0..n).map(|_| rng.sample::<f64, _>(StandardNormal) * scale).collect()
        };
        let w1 = normal(raw_dim * hidden, FROZEN_GAIN);
        let b1 = normal(hidden, 0.5);
        let w2 = normal(hidden * embed_dim, (1.0 / hidden as f64).sqrt());
        let b2 = normal(embed_dim, 0.1);
        let mut params = ParamStore::new();
        params.push("w1", Tensor::new(vec![raw_dim, hidden], w1).unwrap());
        params.push("b1", Tensor::new(vec![hidden], b1).unwrap());
        params.push("w2", Tensor::new(vec![hidden, embed_dim], w2).unwrap());
        params.push("b2", Tensor::new(vec![embed_dim], b2).unwrap());
        Self { modality, params }
    }

    pub fn raw_dim(&self) -> usize {
        self.params.get("w1").unwrap().shape()[0]
    }

    pub fn embed_dim(&self) -> usize {
        self.params.get("w2").unwrap().shape()[1]
    }

    /// Adds the frozen map to `g`. The weights enter as constants, so no
    /// gradient ever reaches them.
    pub fn forward(&self, g: &mut Graph, x: NodeId) -> Result<(NodeId, Bound)> {
        let p = self.params.bind(g, false);
        let h = g.linear(x, p.id("w1"), Some(p.id("b1")))?;
        let h = g.gelu(h)?;
        let y = g.linear(h, p.id("w2"), Some(p.id("b2")))?;
        Ok((y, p))
    }

    /// Frozen features for a `(N, raw_dim)` batch.
    pub fn features(&self, targets: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let x = g.constant(targets.clone());
        let (y, _) = self.forward(&mut g, x)?;
        Ok(g.value(y).clone())
    }
}

/// `layer_norm(x + W·gelu(x) + b)`, dimension preserving.
#[derive(Debug, Clone, PartialEq)]
pub struct ResidualProjection {
    pub params: ParamStore,
}

impl ResidualProjection {
    pub fn new(seed: u64, dim: usize) -> Self {
        let mut rng = rng_for(seed, "projection");
        let mut params = ParamStore::new();
        params.push("res_w", uniform_init(&mut rng, &[dim, dim], dim));
        params.push("res_b", uniform_init(&mut rng, &[dim], dim));
        params.push("ln_gamma", Tensor::ones(&[dim]));
        params.push("ln_beta", Tensor::zeros(&[dim]));
        Self { params }
    }

    pub fn forward(&self, g: &mut Graph, p: &Bound, x: NodeId) -> Result<NodeId> {
        let r = g.gelu(x)?;
        let r = g.linear(r, p.id("res_w"), Some(p.id("res_b")))?;
        let h = g.add(x, r)?;
        g.layer_norm(h, p.id("ln_gamma"), p.id("ln_beta"))
    }
}

/// Per-modality seed derived from the master seed.
pub fn embedder_seed(master: u64, modality: Modality) -> u64 {
    derive_seed(master, &format!("embedder/{}", modality.name()))
}

pub fn embedder_init(modality: Modality, master_seed: u64, raw_dim: usize, embed_dim: usize) -> (FrozenEmbedder, ResidualProjection) {
    let seed = embedder_seed(master_seed, modality);
    (
        FrozenEmbedder::new(modality, seed, raw_dim, embed_dim),
        ResidualProjection::new(seed, embed_dim),
    )
}

/// Frozen map → residual projection → L2 normalization, inside `g`.
/// `projection` must already be bound into `g` as `p`.
pub fn embed_modality_node(
    g: &mut Graph,
    embedder: &FrozenEmbedder,
    projection: &ResidualProjection,
    p: &Bound,
    targets: NodeId,
) -> Result<NodeId> {
    let (h, _) = embedder.forward(g, targets)?;
    let h = projection.forward(g, p, h)?;
    g.l2_normalize(h)
}

/// Convenience evaluation of [`embed_modality_node`] on plain tensors.
pub fn embed_modality(embedder: &FrozenEmbedder, projection: &ResidualProjection, targets: &Tensor) -> Result<Tensor> {
    let mut g = Graph::new();
    let p = projection.params.bind(&mut g, false);
    let x = g.constant(targets.clone());
    let y = embed_modality_node(&mut g, embedder, projection, &p, x)?;
    Ok(g.value(y).clone())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn targets(n: usize, d: usize, seed: u64) -> Tensor {
        let mut rng = rng_for(seed, "t");
        let data: Vec<f64> = (0..n * d).map(|_| rng.gen_range(-1.0..1.0)).collect();
        Tensor::new(vec![n, d], data).unwrap()
    }

    #[test]
    fn unit_norm_rows_and_shape() {
        let (e, p) = embedder_init(Modality::Image, 3, 32, 64);
        let y = embed_modality(&e, &p, &targets(5, 32, 1)).unwrap();
        assert_eq!(y.shape(), &[5, 64]);
        for r in 0..5 {
            let n: f64 = y.row(r).iter().map(|v| v * v).sum();
            assert!((n.sqrt() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn identical_inputs_identical_outputs() {
        let (e, p) = embedder_init(Modality::Text, 3, 8, 16);
        let x = targets(1, 8, 2);
        let stacked = Tensor::new(vec![2, 8], [x.data(), x.data()].concat()).unwrap();
        let y = embed_modality(&e, &p, &stacked).unwrap();
        assert_eq!(y.row(0), y.row(1));
    }

    #[test]
    fn master_seed_determines_all_three() {
        for m in Modality::ALL {
            assert_eq!(embedder_init(m, 9, 8, 16), embedder_init(m, 9, 8, 16));
        }
        let (img, pi) = embedder_init(Modality::Image, 9, 8, 16);
        let (txt, pt) = embedder_init(Modality::Text, 9, 8, 16);
        let x = targets(3, 8, 4);
        assert_ne!(embed_modality(&img, &pi, &x).unwrap(), embed_modality(&txt, &pt, &x).unwrap());
    }

    #[test]
    fn frozen_weights_get_exactly_zero_gradient() {
        let (e, proj) = embedder_init(Modality::Depth, 1, 8, 16);
        let mut g = Graph::new();
        let p = proj.params.bind(&mut g, true);
        let x = g.constant(targets(4, 8, 5));
        let (h, frozen) = e.forward(&mut g, x).unwrap();
        let h = proj.forward(&mut g, &p, h).unwrap();
        let y = g.l2_normalize(h).unwrap();
        let w = g.constant(targets(4, 16, 6));
        let prod = g.mul(y, w).unwrap();
        let loss = g.sum_all(prod).unwrap();
        let grads = g.grad(loss, frozen.ids()).unwrap();
        assert!(grads.iter().all(|t| t.data().iter().all(|v| *v == 0.0)));
        let trainable = g.grad(loss, p.ids()).unwrap();
        assert!(trainable[0].data().iter().any(|v| *v != 0.0));
    }

    #[test]
    fn zero_vector_before_normalization_is_an_error() {
        let (e, mut p) = embedder_init(Modality::Image, 1, 4, 8);
        p.params.get_mut("ln_gamma").unwrap().data_mut().iter_mut().for_each(|v| *v = 0.0);
        assert!(embed_modality(&e, &p, &targets(2, 4, 0)).is_err());
    }
}
