//! Tape-based reverse-mode automatic differentiation over [`Tensor`]s.
//!
//! A [`Graph`] records every operation as it is evaluated. Nodes are appended
//! in evaluation order, so the node list is already a topological order and
//! the backward pass is a single reverse sweep that visits each node once.
//!
//! Broadcasting is limited to a right operand whose shape is a suffix of the
//! left operand's shape (for example a bias `(D)` added to `(N, D)`).
//! Everything else needs an explicit reshape.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const LAYER_NORM_EPS: f64 = 1e-5;
pub const BATCH_NORM_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Batch-norm evaluation regime.
#[derive(Debug, Clone, Copy)]
pub enum BatchNormMode<'a> {
    /// Normalize with statistics of the current batch.
    Train,
    /// Pure affine map with frozen running statistics.
    Eval { mean: &'a [f64], var: &'a [f64] },
}

/// Per-channel statistics observed by a train-mode batch-norm.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(NodeId, NodeId),
    BatchMatMul(NodeId, NodeId),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Div(NodeId, NodeId),
    Scale(NodeId, f64),
    AddScalar(NodeId),
    ScaleBy(NodeId, NodeId),
    Exp(NodeId),
    Log(NodeId),
    Pow(NodeId, f64),
    SumAxis { input: NodeId, axis: usize, mean: bool },
    SumAll { input: NodeId, mean: bool },
    MaxPool2d { input: NodeId, argmax: Vec<usize> },
    Conv2d { input: NodeId, weight: NodeId, bias: Option<NodeId> },
    Softmax(NodeId),
    Norm {
        input: NodeId,
        gamma: NodeId,
        beta: NodeId,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
        layout: NormLayout,
        batch_stats: bool,
    },
    Elu(NodeId, f64),
    Gelu(NodeId),
    L2Normalize { input: NodeId, norms: Vec<f64> },
    Concat { inputs: Vec<NodeId>, axis: usize },
    Reshape(NodeId),
    TransposeLast(NodeId),
}

/// How a normalization op groups elements: `outer × groups × inner`, where
/// statistics are taken per `group` over the `outer` and `inner` axes
/// (batch-norm), or per row over the last axis (layer-norm).
#[derive(Debug, Clone, Copy)]
enum NormLayout {
    LastAxis { rows: usize, width: usize },
    Channel { outer: usize, channels: usize, inner: usize },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

fn ensure_finite(t: &Tensor, op: &'static str) -> Result<()> {
    if t.all_finite() {
        Ok(())
    } else {
        Err(Error::NonFinite { op })
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        self.nodes[id.0].value.shape()
    }

    /// Adds a leaf. Gradients flow into it iff `tensor.requires_grad()`.
    pub fn leaf(&mut self, tensor: Tensor) -> NodeId {
        let needs_grad = tensor.requires_grad();
        self.nodes.push(Node {
            value: tensor,
            op: Op::Leaf,
            needs_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    /// Adds a trainable leaf regardless of the tensor's flag.
    pub fn param(&mut self, tensor: Tensor) -> NodeId {
        self.leaf(tensor.with_requires_grad(true))
    }

    /// Adds a leaf that never receives gradients.
    pub fn constant(&mut self, tensor: Tensor) -> NodeId {
        self.leaf(tensor.with_requires_grad(false))
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[NodeId], name: &'static str) -> Result<NodeId> {
        ensure_finite(&value, name)?;
        let needs_grad = inputs.iter().any(|i| self.nodes[i.0].needs_grad);
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Ok(NodeId(self.nodes.len() - 1))
    }

    // ---------------------------------------------------------------- linear algebra

    /// `(M, K) × (K, N) → (M, N)`.
    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                lhs: sa,
                rhs: sb,
            });
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * n];
        gemm_nn(self.value(a).data(), self.value(b).data(), &mut out, m, k, n);
        let t = Tensor::new(vec![m, n], out)?;
        self.push(t, Op::MatMul(a, b), &[a, b], "matmul")
    }

    /// `(B, M, K) × (B, K, N) → (B, M, N)`.
    pub fn batch_matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] || sa[2] != sb[1] {
            return Err(Error::ShapeMismatch {
                op: "batch_matmul",
                lhs: sa,
                rhs: sb,
            });
        }
        let (bs, m, k, n) = (sa[0], sa[1], sa[2], sb[2]);
        let mut out = vec![0.0; bs * m * n];
        let (ad, bd) = (self.value(a).data(), self.value(b).data());
        for i in 0..bs {
            gemm_nn(
                &ad[i * m * k..(i + 1) * m * k],
                &bd[i * k * n..(i + 1) * k * n],
                &mut out[i * m * n..(i + 1) * m * n],
                m,
                k,
                n,
            );
        }
        let t = Tensor::new(vec![bs, m, n], out)?;
        self.push(t, Op::BatchMatMul(a, b), &[a, b], "batch_matmul")
    }

    /// `x W + b` where `x` is `(..., in)`, `W` is `(in, out)` and `b` is `(out)`.
    pub fn linear(&mut self, x: NodeId, w: NodeId, b: Option<NodeId>) -> Result<NodeId> {
        let shape = self.shape(x).to_vec();
        let inner = *shape.last().unwrap();
        let rows = shape.iter().product::<usize>() / inner;
        let flat = if shape.len() == 2 { x } else { self.reshape(x, &[rows, inner])? };
        let mut y = self.matmul(flat, w)?;
        if let Some(b) = b {
            y = self.add(y, b)?;
        }
        if shape.len() == 2 {
            Ok(y)
        } else {
            let mut out_shape = shape;
            *out_shape.last_mut().unwrap() = self.shape(w)[1];
            self.reshape(y, &out_shape)
        }
    }

    // ---------------------------------------------------------------- elementwise

    fn broadcast_check(&self, a: NodeId, b: NodeId, op: &'static str) -> Result<usize> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa == sb {
            return Ok(1);
        }
        if sb.len() < sa.len() && sa.ends_with(sb) {
            return Ok(self.value(a).len() / self.value(b).len());
        }
        Err(Error::ShapeMismatch {
            op,
            lhs: sa.to_vec(),
            rhs: sb.to_vec(),
        })
    }

    fn binary(
        &mut self,
        a: NodeId,
        b: NodeId,
        name: &'static str,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<NodeId> {
        self.broadcast_check(a, b, name)?;
        let (av, bv) = (self.value(a), self.value(b));
        let bl = bv.len();
        let data = av
            .data()
            .iter()
            .enumerate()
            .map(|(i, &x)| f(x, bv.data()[i % bl]))
            .collect();
        let t = Tensor::new(av.shape().to_vec(), data)?;
        self.push(t, op, &[a, b], name)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary(a, b, "add", |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary(a, b, "sub", |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary(a, b, "mul", |x, y| x * y, Op::Mul(a, b))
    }

    pub fn div(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary(a, b, "div", |x, y| x / y, Op::Div(a, b))
    }

    fn unary(&mut self, a: NodeId, name: &'static str, f: impl Fn(f64) -> f64, op: Op) -> Result<NodeId> {
        let av = self.value(a);
        let data = av.data().iter().map(|&x| f(x)).collect();
        let t = Tensor::new(av.shape().to_vec(), data)?;
        self.push(t, op, &[a], name)
    }

    /// Multiplication by a constant.
    pub fn scale(&mut self, a: NodeId, c: f64) -> Result<NodeId> {
        self.unary(a, "scale", |x| c * x, Op::Scale(a, c))
    }

    pub fn neg(&mut self, a: NodeId) -> Result<NodeId> {
        self.scale(a, -1.0)
    }

    pub fn add_scalar(&mut self, a: NodeId, c: f64) -> Result<NodeId> {
        self.unary(a, "add_scalar", |x| x + c, Op::AddScalar(a))
    }

    /// Multiplies every element of `a` by the one-element tensor `s`.
    pub fn scale_by(&mut self, a: NodeId, s: NodeId) -> Result<NodeId> {
        if self.value(s).len() != 1 {
            return Err(Error::ShapeMismatch {
                op: "scale_by",
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(s).to_vec(),
            });
        }
        let c = self.value(s).item();
        self.unary(a, "scale_by", |x| c * x, Op::ScaleBy(a, s))
    }

    pub fn exp(&mut self, a: NodeId) -> Result<NodeId> {
        self.unary(a, "exp", f64::exp, Op::Exp(a))
    }

    pub fn log(&mut self, a: NodeId) -> Result<NodeId> {
        self.unary(a, "log", f64::ln, Op::Log(a))
    }

    pub fn pow(&mut self, a: NodeId, p: f64) -> Result<NodeId> {
        self.unary(a, "pow", |x| x.powf(p), Op::Pow(a, p))
    }

    pub fn elu(&mut self, a: NodeId, alpha: f64) -> Result<NodeId> {
        self.unary(
            a,
            "elu",
            |x| if x > 0.0 { x } else { alpha * x.exp_m1() },
            Op::Elu(a, alpha),
        )
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, a: NodeId) -> Result<NodeId> {
        self.unary(a, "gelu", gelu, Op::Gelu(a))
    }

    // ---------------------------------------------------------------- reductions

    fn axis_dims(shape: &[usize], axis: usize) -> (usize, usize, usize) {
        let outer = shape[..axis].iter().product();
        let inner = shape[axis + 1..].iter().product();
        (outer, shape[axis], inner)
    }

    fn reduce_axis(&mut self, a: NodeId, axis: usize, mean: bool) -> Result<NodeId> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() {
            return Err(Error::InvalidShape {
                op: "sum_axis",
                shape,
                reason: format!("axis {axis} out of range"),
            });
        }
        let (outer, len, inner) = Self::axis_dims(&shape, axis);
        let src = self.value(a).data();
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for l in 0..len {
                let base = (o * len + l) * inner;
                for i in 0..inner {
                    out[o * inner + i] += src[base + i];
                }
            }
        }
        if mean {
            out.iter_mut().for_each(|v| *v /= len as f64);
        }
        let mut out_shape: Vec<usize> = shape.clone();
        out_shape.remove(axis);
        if out_shape.is_empty() {
            out_shape.push(1);
        }
        let t = Tensor::new(out_shape, out)?;
        self.push(t, Op::SumAxis { input: a, axis, mean }, &[a], "sum_axis")
    }

    /// Sum over `axis`; the axis is removed from the shape.
    pub fn sum_axis(&mut self, a: NodeId, axis: usize) -> Result<NodeId> {
        self.reduce_axis(a, axis, false)
    }

    pub fn mean_axis(&mut self, a: NodeId, axis: usize) -> Result<NodeId> {
        self.reduce_axis(a, axis, true)
    }

    pub fn sum_all(&mut self, a: NodeId) -> Result<NodeId> {
        let s = self.value(a).data().iter().sum();
        self.push(Tensor::scalar(s), Op::SumAll { input: a, mean: false }, &[a], "sum_all")
    }

    pub fn mean_all(&mut self, a: NodeId) -> Result<NodeId> {
        let v = self.value(a);
        let s = v.data().iter().sum::<f64>() / v.len() as f64;
        self.push(Tensor::scalar(s), Op::SumAll { input: a, mean: true }, &[a], "mean_all")
    }

    // ---------------------------------------------------------------- nn primitives

    /// Softmax over the last axis.
    pub fn softmax(&mut self, a: NodeId) -> Result<NodeId> {
        let av = self.value(a);
        let width = av.cols();
        let mut out = av.data().to_vec();
        for row in out.chunks_mut(width) {
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for v in row.iter_mut() {
                *v = (*v - m).exp();
                z += *v;
            }
            row.iter_mut().for_each(|v| *v /= z);
        }
        let t = Tensor::new(av.shape().to_vec(), out)?;
        self.push(t, Op::Softmax(a), &[a], "softmax")
    }

    /// Layer normalization over the last axis with affine `gamma`, `beta` of
    /// shape `(width)`.
    pub fn layer_norm(&mut self, x: NodeId, gamma: NodeId, beta: NodeId) -> Result<NodeId> {
        let shape = self.shape(x).to_vec();
        let width = *shape.last().unwrap();
        for p in [gamma, beta] {
            if self.shape(p) != [width] {
                return Err(Error::ShapeMismatch {
                    op: "layer_norm",
                    lhs: shape,
                    rhs: self.shape(p).to_vec(),
                });
            }
        }
        let rows = self.value(x).len() / width;
        let layout = NormLayout::LastAxis { rows, width };
        let (xhat, inv_std) = normalize_groups(self.value(x).data(), layout, None);
        self.finish_norm(x, gamma, beta, xhat, inv_std, layout, true, "layer_norm")
    }

    /// Batch normalization over axis 1 of an `(N, C, ...)` tensor.
    pub fn batch_norm(
        &mut self,
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        mode: BatchNormMode<'_>,
    ) -> Result<(NodeId, Option<BatchStats>)> {
        let shape = self.shape(x).to_vec();
        if shape.len() < 2 {
            return Err(Error::InvalidShape {
                op: "batch_norm",
                shape,
                reason: "need (N, C, ...)".into(),
            });
        }
        let channels = shape[1];
        for p in [gamma, beta] {
            if self.shape(p) != [channels] {
                return Err(Error::ShapeMismatch {
                    op: "batch_norm",
                    lhs: shape,
                    rhs: self.shape(p).to_vec(),
                });
            }
        }
        let layout = NormLayout::Channel {
            outer: shape[0],
            channels,
            inner: shape[2..].iter().product(),
        };
        match mode {
            BatchNormMode::Train => {
                let stats = channel_stats(self.value(x).data(), layout);
                let (xhat, inv_std) = normalize_groups(self.value(x).data(), layout, None);
                let id = self.finish_norm(x, gamma, beta, xhat, inv_std, layout, true, "batch_norm")?;
                Ok((id, Some(stats)))
            }
            BatchNormMode::Eval { mean, var } => {
                if mean.len() != channels || var.len() != channels {
                    return Err(Error::InvalidArgument("running stats length".into()));
                }
                let (xhat, inv_std) = normalize_groups(self.value(x).data(), layout, Some((mean, var)));
                let id = self.finish_norm(x, gamma, beta, xhat, inv_std, layout, false, "batch_norm")?;
                Ok((id, None))
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn finish_norm(
        &mut self,
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
        layout: NormLayout,
        batch_stats: bool,
        name: &'static str,
    ) -> Result<NodeId> {
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let mut out = vec![0.0; xhat.len()];
        for (i, o) in out.iter_mut().enumerate() {
            let c = layout.param_index(i);
            *o = xhat[i] * g[c] + b[c];
        }
        let t = Tensor::new(self.shape(x).to_vec(), out)?;
        self.push(
            t,
            Op::Norm {
                input: x,
                gamma,
                beta,
                xhat,
                inv_std,
                layout,
                batch_stats,
            },
            &[x, gamma, beta],
            name,
        )
    }

    /// Divides each row (last axis) by its Euclidean norm. A zero row is an error.
    pub fn l2_normalize(&mut self, a: NodeId) -> Result<NodeId> {
        let av = self.value(a);
        let width = av.cols();
        let mut out = av.data().to_vec();
        let mut norms = Vec::with_capacity(out.len() / width);
        for row in out.chunks_mut(width) {
            let n = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            if n == 0.0 {
                return Err(Error::InvalidArgument("cannot normalize a zero vector".into()));
            }
            row.iter_mut().for_each(|v| *v /= n);
            norms.push(n);
        }
        let t = Tensor::new(av.shape().to_vec(), out)?;
        self.push(t, Op::L2Normalize { input: a, norms }, &[a], "l2_normalize")
    }

    /// 2-D max pooling of an `(N, C, H, W)` tensor, no padding.
    pub fn max_pool2d(&mut self, a: NodeId, kernel: (usize, usize), stride: (usize, usize)) -> Result<NodeId> {
        let shape = self.shape(a).to_vec();
        if shape.len() != 4 || kernel.0 > shape[2] || kernel.1 > shape[3] || kernel.0 == 0 || kernel.1 == 0 || stride.0 == 0 || stride.1 == 0 {
            return Err(Error::InvalidShape {
                op: "max_pool2d",
                shape,
                reason: format!("kernel {kernel:?} stride {stride:?}"),
            });
        }
        let (n, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
        let ho = (h - kernel.0) / stride.0 + 1;
        let wo = (w - kernel.1) / stride.1 + 1;
        let src = self.value(a).data();
        let mut out = Vec::with_capacity(n * c * ho * wo);
        let mut argmax = Vec::with_capacity(n * c * ho * wo);
        for plane in 0..n * c {
            let base = plane * h * w;
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut best = f64::NEG_INFINITY;
                    let mut best_i = 0;
                    for ky in 0..kernel.0 {
                        for kx in 0..kernel.1 {
                            let i = base + (oy * stride.0 + ky) * w + ox * stride.1 + kx;
                            if src[i] > best {
                                best = src[i];
                                best_i = i;
                            }
                        }
                    }
                    out.push(best);
                    argmax.push(best_i);
                }
            }
        }
        let t = Tensor::new(vec![n, c, ho, wo], out)?;
        self.push(t, Op::MaxPool2d { input: a, argmax }, &[a], "max_pool2d")
    }

    /// Valid 2-D convolution, stride 1: `(N, Cin, H, W) ⋆ (Cout, Cin, KH, KW)`.
    pub fn conv2d(&mut self, x: NodeId, weight: NodeId, bias: Option<NodeId>) -> Result<NodeId> {
        let (sx, sw) = (self.shape(x).to_vec(), self.shape(weight).to_vec());
        if sx.len() != 4 || sw.len() != 4 || sx[1] != sw[1] || sw[2] > sx[2] || sw[3] > sx[3] {
            return Err(Error::ShapeMismatch {
                op: "conv2d",
                lhs: sx,
                rhs: sw,
            });
        }
        if let Some(b) = bias {
            if self.shape(b) != [sw[0]] {
                return Err(Error::ShapeMismatch {
                    op: "conv2d bias",
                    lhs: sw,
                    rhs: self.shape(b).to_vec(),
                });
            }
        }
        let geo = ConvGeometry::new(&sx, &sw);
        let xd = self.value(x).data();
        let wd = self.value(weight).data();
        let mut out = vec![0.0; geo.n * geo.cout * geo.positions()];
        let mut cols = vec![0.0; geo.patch() * geo.positions()];
        for s in 0..geo.n {
            geo.im2col(&xd[s * geo.in_len()..(s + 1) * geo.in_len()], &mut cols);
            let o = &mut out[s * geo.out_len()..(s + 1) * geo.out_len()];
            gemm_nn(wd, &cols, o, geo.cout, geo.patch(), geo.positions());
            if let Some(b) = bias {
                let bd = self.value(b).data();
                for (co, chunk) in o.chunks_mut(geo.positions()).enumerate() {
                    chunk.iter_mut().for_each(|v| *v += bd[co]);
                }
            }
        }
        let t = Tensor::new(vec![geo.n, geo.cout, geo.ho, geo.wo], out)?;
        let mut inputs = vec![x, weight];
        inputs.extend(bias);
        self.push(
            t,
            Op::Conv2d {
                input: x,
                weight,
                bias,
            },
            &inputs,
            "conv2d",
        )
    }

    /// Concatenation along `axis`; all other dims must agree.
    pub fn concat(&mut self, inputs: &[NodeId], axis: usize) -> Result<NodeId> {
        let first = self.shape(inputs[0]).to_vec();
        if axis >= first.len() {
            return Err(Error::InvalidShape {
                op: "concat",
                shape: first,
                reason: format!("axis {axis} out of range"),
            });
        }
        let mut total = 0;
        for &i in inputs {
            let s = self.shape(i);
            let compatible = s.len() == first.len()
                && s.iter().zip(&first).enumerate().all(|(d, (a, b))| d == axis || a == b);
            if !compatible {
                return Err(Error::ShapeMismatch {
                    op: "concat",
                    lhs: first,
                    rhs: s.to_vec(),
                });
            }
            total += s[axis];
        }
        let outer: usize = first[..axis].iter().product();
        let inner: usize = first[axis + 1..].iter().product();
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &i in inputs {
                let len = self.shape(i)[axis] * inner;
                out.extend_from_slice(&self.value(i).data()[o * len..(o + 1) * len]);
            }
        }
        let mut shape = first;
        shape[axis] = total;
        let t = Tensor::new(shape, out)?;
        self.push(
            t,
            Op::Concat {
                inputs: inputs.to_vec(),
                axis,
            },
            inputs,
            "concat",
        )
    }

    pub fn reshape(&mut self, a: NodeId, shape: &[usize]) -> Result<NodeId> {
        let t = self.value(a).reshape(shape)?;
        self.push(t, Op::Reshape(a), &[a], "reshape")
    }

    /// Swaps the last two axes.
    pub fn transpose(&mut self, a: NodeId) -> Result<NodeId> {
        let shape = self.shape(a).to_vec();
        if shape.len() < 2 {
            return Err(Error::InvalidShape {
                op: "transpose",
                shape,
                reason: "need at least 2 axes".into(),
            });
        }
        let (r, c) = (shape[shape.len() - 2], shape[shape.len() - 1]);
        let src = self.value(a).data();
        let mut out = Vec::with_capacity(src.len());
        for block in src.chunks(r * c) {
            out.extend(transpose2(block, r, c));
        }
        let mut ts = shape;
        let n = ts.len();
        ts.swap(n - 1, n - 2);
        let t = Tensor::new(ts, out)?;
        self.push(t, Op::TransposeLast(a), &[a], "transpose")
    }

    /// Single-head scaled dot-product attention on `(B, S, d)` tensors.
    pub fn attention(&mut self, q: NodeId, k: NodeId, v: NodeId) -> Result<NodeId> {
        let d = *self.shape(q).last().unwrap() as f64;
        let kt = self.transpose(k)?;
        let scores = self.batch_matmul(q, kt)?;
        let scores = self.scale(scores, 1.0 / d.sqrt())?;
        let weights = self.softmax(scores)?;
        self.batch_matmul(weights, v)
    }

    // ---------------------------------------------------------------- backward

    /// Gradients of the one-element `output` with respect to each of `params`,
    /// which may be leaves or intermediate nodes. Nodes not connected to
    /// `output` get zero tensors.
    pub fn grad(&self, output: NodeId, params: &[NodeId]) -> Result<Vec<Tensor>> {
        let out = &self.nodes[output.0].value;
        if out.len() != 1 {
            return Err(Error::NonScalarOutput(out.shape().to_vec()));
        }
        let mut adj: Vec<Option<Vec<f64>>> = vec![None; output.0 + 1];
        if self.nodes[output.0].needs_grad {
            adj[output.0] = Some(vec![1.0]);
        }
        for idx in (0..=output.0).rev() {
            let node = &self.nodes[idx];
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let requested = params.iter().any(|p| p.0 == idx);
            let g = if requested { adj[idx].clone() } else { adj[idx].take() };
            let Some(g) = g else { continue };
            self.backward_node(idx, &g, &mut adj);
        }
        Ok(params
            .iter()
            .map(|p| {
                let shape = self.shape(*p).to_vec();
                match adj.get(p.0).and_then(|a| a.clone()) {
                    Some(data) => Tensor::new(shape, data).expect("adjoint shape"),
                    None => Tensor::zeros(&shape),
                }
            })
            .collect())
    }

    fn accumulate(&self, adj: &mut [Option<Vec<f64>>], id: NodeId, grad: Vec<f64>) {
        if !self.nodes[id.0].needs_grad {
            return;
        }
        match &mut adj[id.0] {
            Some(existing) => existing.iter_mut().zip(grad).for_each(|(e, g)| *e += g),
            slot @ None => *slot = Some(grad),
        }
    }

    fn needs(&self, id: NodeId) -> bool {
        self.nodes[id.0].needs_grad
    }

    /// Reduces a gradient for the left operand's shape onto a suffix-broadcast
    /// right operand.
    fn reduce_broadcast(&self, g: &[f64], b: NodeId) -> Vec<f64> {
        let bl = self.value(b).len();
        let mut out = vec![0.0; bl];
        for (i, v) in g.iter().enumerate() {
            out[i % bl] += v;
        }
        out
    }

    fn backward_node(&self, idx: usize, g: &[f64], adj: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[idx];
        let y = node.value.data();
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (sa, sb) = (self.shape(*a), self.shape(*b));
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                if self.needs(*a) {
                    let mut da = vec![0.0; m * k];
                    gemm_nt(g, self.value(*b).data(), &mut da, m, n, k);
                    self.accumulate(adj, *a, da);
                }
                if self.needs(*b) {
                    let mut db = vec![0.0; k * n];
                    gemm_tn(self.value(*a).data(), g, &mut db, k, m, n);
                    self.accumulate(adj, *b, db);
                }
            }
            Op::BatchMatMul(a, b) => {
                let (sa, sb) = (self.shape(*a), self.shape(*b));
                let (bs, m, k, n) = (sa[0], sa[1], sa[2], sb[2]);
                let (ad, bd) = (self.value(*a).data(), self.value(*b).data());
                if self.needs(*a) {
                    let mut da = vec![0.0; bs * m * k];
                    for i in 0..bs {
                        gemm_nt(
                            &g[i * m * n..(i + 1) * m * n],
                            &bd[i * k * n..(i + 1) * k * n],
                            &mut da[i * m * k..(i + 1) * m * k],
                            m,
                            n,
                            k,
                        );
                    }
                    self.accumulate(adj, *a, da);
                }
                if self.needs(*b) {
                    let mut db = vec![0.0; bs * k * n];
                    for i in 0..bs {
                        gemm_tn(
                            &ad[i * m * k..(i + 1) * m * k],
                            &g[i * m * n..(i + 1) * m * n],
                            &mut db[i * k * n..(i + 1) * k * n],
                            k,
                            m,
                            n,
                        );
                    }
                    self.accumulate(adj, *b, db);
                }
            }
            Op::Add(a, b) | Op::Sub(a, b) => {
                let sign = if matches!(node.op, Op::Sub(..)) { -1.0 } else { 1.0 };
                if self.needs(*a) {
                    self.accumulate(adj, *a, g.to_vec());
                }
                if self.needs(*b) {
                    let mut db = self.reduce_broadcast(g, *b);
                    db.iter_mut().for_each(|v| *v *= sign);
                    self.accumulate(adj, *b, db);
                }
            }
            Op::Mul(a, b) => {
                let (ad, bd) = (self.value(*a).data(), self.value(*b).data());
                let bl = bd.len();
                if self.needs(*a) {
                    let da = g.iter().enumerate().map(|(i, gv)| gv * bd[i % bl]).collect();
                    self.accumulate(adj, *a, da);
                }
                if self.needs(*b) {
                    let prod: Vec<f64> = g.iter().zip(ad).map(|(gv, av)| gv * av).collect();
                    self.accumulate(adj, *b, self.reduce_broadcast(&prod, *b));
                }
            }
            Op::Div(a, b) => {
                let (ad, bd) = (self.value(*a).data(), self.value(*b).data());
                let bl = bd.len();
                if self.needs(*a) {
                    let da = g.iter().enumerate().map(|(i, gv)| gv / bd[i % bl]).collect();
                    self.accumulate(adj, *a, da);
                }
                if self.needs(*b) {
                    let prod: Vec<f64> = g
                        .iter()
                        .enumerate()
                        .map(|(i, gv)| -gv * ad[i] / (bd[i % bl] * bd[i % bl]))
                        .collect();
                    self.accumulate(adj, *b, self.reduce_broadcast(&prod, *b));
                }
            }
            Op::Scale(a, c) => {
                self.accumulate(adj, *a, g.iter().map(|v| v * c).collect());
            }
            Op::AddScalar(a) | Op::Reshape(a) => {
                self.accumulate(adj, *a, g.to_vec());
            }
            Op::ScaleBy(a, s) => {
                let c = self.value(*s).item();
                if self.needs(*a) {
                    self.accumulate(adj, *a, g.iter().map(|v| v * c).collect());
                }
                if self.needs(*s) {
                    let ds = g.iter().zip(self.value(*a).data()).map(|(gv, av)| gv * av).sum();
                    self.accumulate(adj, *s, vec![ds]);
                }
            }
            Op::Exp(a) => {
                self.accumulate(adj, *a, g.iter().zip(y).map(|(gv, yv)| gv * yv).collect());
            }
            Op::Log(a) => {
                let ad = self.value(*a).data();
                self.accumulate(adj, *a, g.iter().zip(ad).map(|(gv, av)| gv / av).collect());
            }
            Op::Pow(a, p) => {
                let ad = self.value(*a).data();
                let da = g.iter().zip(ad).map(|(gv, av)| gv * p * av.powf(p - 1.0)).collect();
                self.accumulate(adj, *a, da);
            }
            Op::Elu(a, alpha) => {
                let ad = self.value(*a).data();
                let da = g
                    .iter()
                    .zip(ad.iter().zip(y))
                    .map(|(gv, (xv, yv))| if *xv > 0.0 { *gv } else { gv * (yv + alpha) })
                    .collect();
                self.accumulate(adj, *a, da);
            }
            Op::Gelu(a) => {
                let ad = self.value(*a).data();
                let da = g.iter().zip(ad).map(|(gv, xv)| gv * gelu_grad(*xv)).collect();
                self.accumulate(adj, *a, da);
            }
            Op::SumAxis { input, axis, mean } => {
                let shape = self.shape(*input);
                let (outer, len, inner) = Self::axis_dims(shape, *axis);
                let scale = if *mean { 1.0 / len as f64 } else { 1.0 };
                let mut da = vec![0.0; outer * len * inner];
                for o in 0..outer {
                    for l in 0..len {
                        let base = (o * len + l) * inner;
                        for i in 0..inner {
                            da[base + i] = g[o * inner + i] * scale;
                        }
                    }
                }
                self.accumulate(adj, *input, da);
            }
            Op::SumAll { input, mean } => {
                let n = self.value(*input).len();
                let v = if *mean { g[0] / n as f64 } else { g[0] };
                self.accumulate(adj, *input, vec![v; n]);
            }
            Op::MaxPool2d { input, argmax } => {
                let mut da = vec![0.0; self.value(*input).len()];
                for (gv, &i) in g.iter().zip(argmax) {
                    da[i] += gv;
                }
                self.accumulate(adj, *input, da);
            }
            Op::Conv2d { input, weight, bias } => {
                let geo = ConvGeometry::new(self.shape(*input), self.shape(*weight));
                let xd = self.value(*input).data();
                let wd = self.value(*weight).data();
                let mut dw = vec![0.0; wd.len()];
                let mut dx = vec![0.0; xd.len()];
                let mut cols = vec![0.0; geo.patch() * geo.positions()];
                let mut dcols = vec![0.0; cols.len()];
                for s in 0..geo.n {
                    let gs = &g[s * geo.out_len()..(s + 1) * geo.out_len()];
                    if self.needs(*weight) {
                        geo.im2col(&xd[s * geo.in_len()..(s + 1) * geo.in_len()], &mut cols);
                        gemm_nt(gs, &cols, &mut dw, geo.cout, geo.positions(), geo.patch());
                    }
                    if self.needs(*input) {
                        dcols.iter_mut().for_each(|v| *v = 0.0);
                        gemm_tn(wd, gs, &mut dcols, geo.patch(), geo.cout, geo.positions());
                        geo.col2im(&dcols, &mut dx[s * geo.in_len()..(s + 1) * geo.in_len()]);
                    }
                }
                self.accumulate(adj, *weight, dw);
                self.accumulate(adj, *input, dx);
                if let Some(b) = bias {
                    let mut db = vec![0.0; geo.cout];
                    for s in 0..geo.n {
                        for co in 0..geo.cout {
                            let off = s * geo.out_len() + co * geo.positions();
                            db[co] += g[off..off + geo.positions()].iter().sum::<f64>();
                        }
                    }
                    self.accumulate(adj, *b, db);
                }
            }
            Op::Softmax(a) => {
                let width = node.value.cols();
                let mut da = vec![0.0; y.len()];
                for ((dr, yr), gr) in da.chunks_mut(width).zip(y.chunks(width)).zip(g.chunks(width)) {
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for j in 0..width {
                        dr[j] = yr[j] * (gr[j] - dot);
                    }
                }
                self.accumulate(adj, *a, da);
            }
            Op::Norm {
                input,
                gamma,
                beta,
                xhat,
                inv_std,
                layout,
                batch_stats,
            } => {
                let gd = self.value(*gamma).data();
                let groups = gd.len();
                let mut dgamma = vec![0.0; groups];
                let mut dbeta = vec![0.0; groups];
                let mut dxhat = vec![0.0; g.len()];
                for i in 0..g.len() {
                    let c = layout.param_index(i);
                    dgamma[c] += g[i] * xhat[i];
                    dbeta[c] += g[i];
                    dxhat[i] = g[i] * gd[c];
                }
                if self.needs(*input) {
                    let mut dx = vec![0.0; g.len()];
                    if *batch_stats {
                        let stat_groups = inv_std.len();
                        let mut sum_d = vec![0.0; stat_groups];
                        let mut sum_dx = vec![0.0; stat_groups];
                        for i in 0..g.len() {
                            let s = layout.stat_index(i);
                            sum_d[s] += dxhat[i];
                            sum_dx[s] += dxhat[i] * xhat[i];
                        }
                        let count = layout.stat_count() as f64;
                        for i in 0..g.len() {
                            let s = layout.stat_index(i);
                            dx[i] = inv_std[s] / count * (count * dxhat[i] - sum_d[s] - xhat[i] * sum_dx[s]);
                        }
                    } else {
                        for i in 0..g.len() {
                            dx[i] = dxhat[i] * inv_std[layout.stat_index(i)];
                        }
                    }
                    self.accumulate(adj, *input, dx);
                }
                self.accumulate(adj, *gamma, dgamma);
                self.accumulate(adj, *beta, dbeta);
            }
            Op::L2Normalize { input, norms } => {
                let width = node.value.cols();
                let mut da = vec![0.0; y.len()];
                for (r, ((dr, yr), gr)) in da.chunks_mut(width).zip(y.chunks(width)).zip(g.chunks(width)).enumerate() {
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for j in 0..width {
                        dr[j] = (gr[j] - yr[j] * dot) / norms[r];
                    }
                }
                self.accumulate(adj, *input, da);
            }
            Op::Concat { inputs, axis } => {
                let shape = node.value.shape();
                let outer: usize = shape[..*axis].iter().product();
                let inner: usize = shape[axis + 1..].iter().product();
                let total = shape[*axis] * inner;
                let mut offset = 0;
                for &i in inputs {
                    let len = self.shape(i)[*axis] * inner;
                    if self.needs(i) {
                        let mut di = Vec::with_capacity(outer * len);
                        for o in 0..outer {
                            di.extend_from_slice(&g[o * total + offset..o * total + offset + len]);
                        }
                        self.accumulate(adj, i, di);
                    }
                    offset += len;
                }
            }
            Op::TransposeLast(a) => {
                let shape = node.value.shape();
                let (r, c) = (shape[shape.len() - 2], shape[shape.len() - 1]);
                let mut da = Vec::with_capacity(g.len());
                for block in g.chunks(r * c) {
                    da.extend(transpose2(block, r, c));
                }
                self.accumulate(adj, *a, da);
            }
        }
    }
}

impl NormLayout {
    /// Index into gamma/beta for flat element `i`.
    fn param_index(&self, i: usize) -> usize {
        match *self {
            NormLayout::LastAxis { width, .. } => i % width,
            NormLayout::Channel { channels, inner, .. } => (i / inner) % channels,
        }
    }

    /// Index of the statistics group for flat element `i`.
    fn stat_index(&self, i: usize) -> usize {
        match *self {
            NormLayout::LastAxis { width, .. } => i / width,
            NormLayout::Channel { channels, inner, .. } => (i / inner) % channels,
        }
    }

    fn stat_groups(&self) -> usize {
        match *self {
            NormLayout::LastAxis { rows, .. } => rows,
            NormLayout::Channel { channels, .. } => channels,
        }
    }

    fn stat_count(&self) -> usize {
        match *self {
            NormLayout::LastAxis { width, .. } => width,
            NormLayout::Channel { outer, inner, .. } => outer * inner,
        }
    }
}

fn channel_stats(x: &[f64], layout: NormLayout) -> BatchStats {
    let groups = layout.stat_groups();
    let count = layout.stat_count() as f64;
    let mut mean = vec![0.0; groups];
    for (i, v) in x.iter().enumerate() {
        mean[layout.stat_index(i)] += v;
    }
    mean.iter_mut().for_each(|m| *m /= count);
    let mut var = vec![0.0; groups];
    for (i, v) in x.iter().enumerate() {
        let s = layout.stat_index(i);
        var[s] += (v - mean[s]).powi(2);
    }
    var.iter_mut().for_each(|v| *v /= count);
    BatchStats { mean, var }
}

/// Returns `(xhat, inv_std)`; statistics come from `x` unless `fixed` is given.
fn normalize_groups(x: &[f64], layout: NormLayout, fixed: Option<(&[f64], &[f64])>) -> (Vec<f64>, Vec<f64>) {
    let eps = match layout {
        NormLayout::LastAxis { .. } => LAYER_NORM_EPS,
        NormLayout::Channel { .. } => BATCH_NORM_EPS,
    };
    let (mean, var) = match fixed {
        Some((m, v)) => (m.to_vec(), v.to_vec()),
        None => {
            let s = channel_stats(x, layout);
            (s.mean, s.var)
        }
    };
    let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
    let xhat = x
        .iter()
        .enumerate()
        .map(|(i, v)| {
            let s = layout.stat_index(i);
            (v - mean[s]) * inv_std[s]
        })
        .collect();
    (xhat, inv_std)
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    let du = GELU_C * (1.0 + 3.0 * 0.044715 * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
}

struct ConvGeometry {
    n: usize,
    cin: usize,
    h: usize,
    w: usize,
    cout: usize,
    kh: usize,
    kw: usize,
    ho: usize,
    wo: usize,
}

impl ConvGeometry {
    fn new(sx: &[usize], sw: &[usize]) -> Self {
        let (ho, wo) = (sx[2] - sw[2] + 1, sx[3] - sw[3] + 1);
        Self {
            n: sx[0],
            cin: sx[1],
            h: sx[2],
            w: sx[3],
            cout: sw[0],
            kh: sw[2],
            kw: sw[3],
            ho,
            wo,
        }
    }

    fn patch(&self) -> usize {
        self.cin * self.kh * self.kw
    }

    fn positions(&self) -> usize {
        self.ho * self.wo
    }

    fn in_len(&self) -> usize {
        self.cin * self.h * self.w
    }

    fn out_len(&self) -> usize {
        self.cout * self.positions()
    }

    fn im2col(&self, x: &[f64], cols: &mut [f64]) {
        let p = self.positions();
        for ci in 0..self.cin {
            for ky in 0..self.kh {
                for kx in 0..self.kw {
                    let row = (ci * self.kh + ky) * self.kw + kx;
                    let dst = &mut cols[row * p..(row + 1) * p];
                    for oy in 0..self.ho {
                        let src = (ci * self.h + oy + ky) * self.w + kx;
                        dst[oy * self.wo..(oy + 1) * self.wo].copy_from_slice(&x[src..src + self.wo]);
                    }
                }
            }
        }
    }

    fn col2im(&self, cols: &[f64], dx: &mut [f64]) {
        let p = self.positions();
        for ci in 0..self.cin {
            for ky in 0..self.kh {
                for kx in 0..self.kw {
                    let row = (ci * self.kh + ky) * self.kw + kx;
                    let src = &cols[row * p..(row + 1) * p];
                    for oy in 0..self.ho {
                        let dst = (ci * self.h + oy + ky) * self.w + kx;
                        for ox in 0..self.wo {
                            dx[dst + ox] += src[oy * self.wo + ox];
                        }
                    }
                }
            }
        }
    }
}

/// `c += a (m×k) · b (k×n)`.
pub(crate) fn gemm_nn(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let crow = &mut c[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (cv, bv) in crow.iter_mut().zip(brow) {
                *cv += av * bv;
            }
        }
    }
}

/// `c += a (m×k) · bᵀ` where `b` is `(n×k)`.
pub(crate) fn gemm_nt(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            c[i * n + j] += arow.iter().zip(brow).map(|(x, y)| x * y).sum::<f64>();
        }
    }
}

/// `c += aᵀ · b` where `a` is `(k×m)` and `b` is `(k×n)`; `c` is `(m×n)`.
pub(crate) fn gemm_tn(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    for p in 0..k {
        let brow = &b[p * n..(p + 1) * n];
        for i in 0..m {
            let av = a[p * m + i];
            if av == 0.0 {
                continue;
            }
            let crow = &mut c[i * n..(i + 1) * n];
            for (cv, bv) in crow.iter_mut().zip(brow) {
                *cv += av * bv;
            }
        }
    }
}

fn transpose2(src: &[f64], r: usize, c: usize) -> Vec<f64> {
    let mut out = vec![0.0; r * c];
    for i in 0..r {
        for j in 0..c {
            out[j * r + i] = src[i * c + j];
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn gradient_at_intermediate_node() {
        let mut g = Graph::new();
        let x = g.param(t(&[2], &[1.0, 2.0]));
        let y = g.scale(x, 3.0).unwrap();
        let z = g.mul(y, y).unwrap();
        let l = g.sum_all(z).unwrap();
        let grads = g.grad(l, &[y, x]).unwrap();
        assert_eq!(grads[0].data(), &[6.0, 12.0]);
        assert_eq!(grads[1].data(), &[18.0, 36.0]);
    }

    #[test]
    fn matmul_shapes() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::ones(&[2, 3]));
        let b = g.constant(Tensor::ones(&[3, 2]));
        let c = g.matmul(a, b).unwrap();
        assert_eq!(g.shape(c), &[2, 2]);
        assert!(g.value(c).data().iter().all(|&v| v == 3.0));
        let err = g.matmul(a, a).unwrap_err().to_string();
        assert!(err.contains("matmul") && err.contains("[2, 3]"), "{err}");
    }

    #[test]
    fn softmax_of_zeros_is_uniform() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::zeros(&[3]));
        let s = g.softmax(a).unwrap();
        for v in g.value(s).data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn elu_negative_one() {
        let mut g = Graph::new();
        let a = g.constant(t(&[1], &[-1.0]));
        let e = g.elu(a, 1.0).unwrap();
        let expected = (-1.0f64).exp() - 1.0;
        assert!((g.value(e).item() - expected).abs() < 1e-15);
        assert!((g.value(e).item() + 0.632).abs() < 1e-3);
    }

    #[test]
    fn square_gradient() {
        let mut g = Graph::new();
        let x = g.param(Tensor::scalar(3.0));
        let y = g.mul(x, x).unwrap();
        let gr = g.grad(y, &[x]).unwrap();
        assert_eq!(gr[0].item(), 6.0);
    }

    #[test]
    fn sum_of_softmax_has_zero_gradient() {
        let mut g = Graph::new();
        let x = g.param(t(&[4], &[0.3, -1.2, 2.0, 0.1]));
        let s = g.softmax(x).unwrap();
        let total = g.sum_all(s).unwrap();
        let gr = g.grad(total, &[x]).unwrap();
        for v in gr[0].data() {
            assert!(v.abs() < 1e-15);
        }
    }

    #[test]
    fn non_scalar_output_is_rejected() {
        let mut g = Graph::new();
        let x = g.param(Tensor::ones(&[2]));
        assert!(matches!(g.grad(x, &[x]), Err(Error::NonScalarOutput(_))));
    }

    #[test]
    fn disconnected_parameter_gets_zero() {
        let mut g = Graph::new();
        let x = g.param(Tensor::scalar(2.0));
        let unused = g.param(Tensor::ones(&[2, 2]));
        let y = g.exp(x).unwrap();
        let gr = g.grad(y, &[x, unused]).unwrap();
        assert_eq!(gr[1], Tensor::zeros(&[2, 2]));
    }

    #[test]
    fn constants_receive_no_gradient() {
        let mut g = Graph::new();
        let w = g.constant(Tensor::ones(&[2]));
        let x = g.param(Tensor::ones(&[2]));
        let y = g.mul(w, x).unwrap();
        let s = g.sum_all(y).unwrap();
        let gr = g.grad(s, &[w, x]).unwrap();
        assert_eq!(gr[0], Tensor::zeros(&[2]));
        assert_eq!(gr[1], Tensor::ones(&[2]));
    }

    #[test]
    fn log_of_zero_is_an_error() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::zeros(&[1]));
        assert!(matches!(g.log(x), Err(Error::NonFinite { op: "log" })));
    }

    #[test]
    fn conv_matches_naive_loops() {
        let x: Vec<f64> = (0..2 * 2 * 4 * 5).map(|i| ((i * 7) % 11) as f64 - 5.0).collect();
        let w: Vec<f64> = (0..3 * 2 * 2 * 3).map(|i| ((i * 5) % 7) as f64 / 7.0).collect();
        let mut g = Graph::new();
        let xi = g.constant(t(&[2, 2, 4, 5], &x));
        let wi = g.constant(t(&[3, 2, 2, 3], &w));
        let y = g.conv2d(xi, wi, None).unwrap();
        assert_eq!(g.shape(y), &[2, 3, 3, 3]);
        let out = g.value(y).data();
        for n in 0..2 {
            for co in 0..3 {
                for oy in 0..3 {
                    for ox in 0..3 {
                        let mut acc = 0.0;
                        for ci in 0..2 {
                            for ky in 0..2 {
                                for kx in 0..3 {
                                    acc += x[((n * 2 + ci) * 4 + oy + ky) * 5 + ox + kx]
                                        * w[((co * 2 + ci) * 2 + ky) * 3 + kx];
                                }
                            }
                        }
                        let got = out[((n * 3 + co) * 3 + oy) * 3 + ox];
                        assert!((got - acc).abs() < 1e-12);
                    }
                }
            }
        }
    }

    #[test]
    fn batch_norm_eval_is_affine_and_pure() {
        let mut g = Graph::new();
        let x = g.constant(t(&[2, 2, 1, 2], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0]));
        let gamma = g.constant(t(&[2], &[2.0, 1.0]));
        let beta = g.constant(t(&[2], &[0.5, -1.0]));
        let mean = [1.0, 2.0];
        let var = [4.0 - BATCH_NORM_EPS, 1.0 - BATCH_NORM_EPS];
        let (y, stats) = g
            .batch_norm(x, gamma, beta, BatchNormMode::Eval { mean: &mean, var: &var })
            .unwrap();
        assert!(stats.is_none());
        // channel 0: (x-1)/2*2+0.5, channel 1: (x-2)/1*1-1
        let expect_ch: Vec<f64> = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0]
            .iter()
            .enumerate()
            .map(|(i, v)| if (i / 2) % 2 == 0 { (v - 1.0) + 0.5 } else { (v - 2.0) - 1.0 })
            .collect();
        for (a, b) in g.value(y).data().iter().zip(&expect_ch) {
            assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn layer_norm_of_constant_is_shift() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::full(&[2, 4], 3.0));
        let gamma = g.constant(Tensor::ones(&[4]));
        let beta = g.constant(Tensor::zeros(&[4]));
        let y = g.layer_norm(x, gamma, beta).unwrap();
        assert!(g.value(y).data().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn concat_and_transpose_shapes() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::ones(&[2, 3]));
        let b = g.constant(Tensor::zeros(&[2, 1]));
        let c = g.concat(&[a, b], 1).unwrap();
        assert_eq!(g.value(c).data(), &[1.0, 1.0, 1.0, 0.0, 1.0, 1.0, 1.0, 0.0]);
        let tt = g.transpose(c).unwrap();
        assert_eq!(g.shape(tt), &[4, 2]);
        assert_eq!(g.value(tt).data(), &[1.0, 1.0, 1.0, 1.0, 1.0, 1.0, 0.0, 0.0]);
    }

    #[test]
    fn broadcast_only_over_leading_axes() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::ones(&[3, 2]));
        let bias = g.constant(t(&[2], &[1.0, 2.0]));
        let wrong = g.constant(Tensor::ones(&[3]));
        assert!(g.add(a, bias).is_ok());
        assert!(g.add(a, wrong).is_err());
    }
}
