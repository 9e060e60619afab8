//! Every differentiable primitive against the central-difference oracle.

use cogcap_core::autodiff::{BatchNormMode, Graph, NodeId};
use cogcap_core::error::Result;
use cogcap_core::gradcheck::finite_diff_check;
use cogcap_core::tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const SEEDS: u64 = 20;
const TOL: f64 = 1e-4;
const EPS: f64 = 1e-5;

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(lo..hi)).collect()).unwrap()
}

/// Contracts a tensor-valued output with fixed random weights so the check
/// exercises every output coordinate.
fn weighted_sum(g: &mut Graph, y: NodeId, seed: u64) -> Result<NodeId> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xabcdef);
    let w = rand_tensor(&mut rng, g.shape(y), -1.0, 1.0);
    let w = g.constant(w);
    let p = g.mul(y, w)?;
    g.sum_all(p)
}

fn check(name: &str, shapes: &[&[usize]], lo: f64, hi: f64, f: impl Fn(&mut Graph, &[NodeId]) -> Result<NodeId> + Copy) {
    for seed in 0..SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let params: Vec<Tensor> = shapes.iter().map(|s| rand_tensor(&mut rng, s, lo, hi)).collect();
        let wrapped = |g: &mut Graph, p: &[NodeId]| {
            let y = f(g, p)?;
            weighted_sum(g, y, seed)
        };
        let err = finite_diff_check(wrapped, &params, EPS).unwrap();
        assert!(err < TOL, "{name} seed {seed}: relative error {err:e}");
    }
}

#[test]
fn matmul() {
    check("matmul", &[&[3, 4], &[4, 2]], -1.0, 1.0, |g, p| g.matmul(p[0], p[1]));
}

#[test]
fn batch_matmul() {
    check("batch_matmul", &[&[2, 3, 4], &[2, 4, 3]], -1.0, 1.0, |g, p| g.batch_matmul(p[0], p[1]));
}

#[test]
fn elementwise_binary() {
    check("add", &[&[3, 4], &[4]], -1.0, 1.0, |g, p| g.add(p[0], p[1]));
    check("sub", &[&[3, 4], &[3, 4]], -1.0, 1.0, |g, p| g.sub(p[0], p[1]));
    check("mul", &[&[2, 3, 4], &[3, 4]], -1.0, 1.0, |g, p| g.mul(p[0], p[1]));
    check("div", &[&[3, 4], &[4]], 0.5, 2.0, |g, p| g.div(p[0], p[1]));
}

#[test]
fn elementwise_unary() {
    check("exp", &[&[5]], -2.0, 2.0, |g, p| g.exp(p[0]));
    check("log", &[&[5]], 0.2, 3.0, |g, p| g.log(p[0]));
    check("pow", &[&[5]], 0.2, 3.0, |g, p| g.pow(p[0], 2.5));
    check("elu", &[&[6]], -2.0, 2.0, |g, p| g.elu(p[0], 1.0));
    check("gelu", &[&[6]], -3.0, 3.0, |g, p| g.gelu(p[0]));
    check("scale_by", &[&[3, 2], &[1]], -1.0, 1.0, |g, p| g.scale_by(p[0], p[1]));
}

#[test]
fn reductions() {
    check("sum_axis0", &[&[3, 4, 2]], -1.0, 1.0, |g, p| g.sum_axis(p[0], 0));
    check("mean_axis1", &[&[3, 4, 2]], -1.0, 1.0, |g, p| g.mean_axis(p[0], 1));
    check("mean_all", &[&[3, 4]], -1.0, 1.0, |g, p| g.mean_all(p[0]));
}

#[test]
fn softmax_and_norms() {
    check("softmax", &[&[3, 5]], -2.0, 2.0, |g, p| g.softmax(p[0]));
    check("layer_norm", &[&[3, 6], &[6], &[6]], -1.0, 1.0, |g, p| g.layer_norm(p[0], p[1], p[2]));
    check("l2_normalize", &[&[3, 4]], 0.1, 1.0, |g, p| g.l2_normalize(p[0]));
    check("batch_norm_train", &[&[4, 3, 1, 5], &[3], &[3]], -1.0, 1.0, |g, p| {
        g.batch_norm(p[0], p[1], p[2], BatchNormMode::Train).map(|r| r.0)
    });
    check("batch_norm_eval", &[&[4, 3, 1, 5], &[3], &[3]], -1.0, 1.0, |g, p| {
        let mean = [0.1, -0.2, 0.3];
        let var = [0.5, 1.5, 2.0];
        g.batch_norm(p[0], p[1], p[2], BatchNormMode::Eval { mean: &mean, var: &var })
            .map(|r| r.0)
    });
}

#[test]
fn convolution_and_pooling() {
    check("conv2d", &[&[2, 2, 4, 6], &[3, 2, 2, 3], &[3]], -1.0, 1.0, |g, p| g.conv2d(p[0], p[1], Some(p[2])));
    check("max_pool2d", &[&[2, 2, 3, 8]], -1.0, 1.0, |g, p| g.max_pool2d(p[0], (1, 3), (1, 2)));
}

#[test]
fn shape_ops_and_attention() {
    check("concat", &[&[2, 3], &[2, 2]], -1.0, 1.0, |g, p| g.concat(&[p[0], p[1]], 1));
    check("reshape", &[&[2, 6]], -1.0, 1.0, |g, p| g.reshape(p[0], &[3, 4]));
    check("transpose", &[&[2, 3, 4]], -1.0, 1.0, |g, p| g.transpose(p[0]));
    check("attention", &[&[2, 3, 4], &[2, 3, 4], &[2, 3, 4]], -1.0, 1.0, |g, p| g.attention(p[0], p[1], p[2]));
    check("linear3d", &[&[2, 3, 4], &[4, 5], &[5]], -1.0, 1.0, |g, p| g.linear(p[0], p[1], Some(p[2])));
}

#[test]
fn forward_is_bit_deterministic() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let x = rand_tensor(&mut rng, &[2, 3, 4], -1.0, 1.0);
    let run = || {
        let mut g = Graph::new();
        let a = g.constant(x.clone());
        let b = g.attention(a, a, a).unwrap();
        g.value(b).clone()
    };
    assert_eq!(run().to_cgtn_bytes(), run().to_cgtn_bytes());
}
