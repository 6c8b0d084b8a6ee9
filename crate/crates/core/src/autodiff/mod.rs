//! Reverse-mode automatic differentiation over a single-use tape.
//!
//! A [`Graph`] records every operation applied to its [`Var`]s. Calling
//! [`Graph::backward`] on a scalar node walks the tape once in reverse and
//! returns the gradient of every node that depends on a trainable leaf.

pub mod kernels;

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{arg_err, numeric_err, Result};
use crate::tensor::Tensor;
use kernels::ConvGeom;

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// How the normalized axis is laid out in memory: element `(channel, group)`
/// lives at `channel * channel_stride + group * group_stride`.
#[derive(Clone, Copy, Debug)]
struct NormLayout {
    groups: usize,
    channels: usize,
    channel_stride: usize,
    group_stride: usize,
}

impl NormLayout {
    #[inline]
    fn at(&self, c: usize, g: usize) -> usize {
        c * self.channel_stride + g * self.group_stride
    }
}

enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Reshape(Var),
    Transpose(Var),
    AddBias { x: Var, bias: Var, inner: usize },
    Conv3d { x: Var, w: Var, ci: usize, co: usize, geom: ConvGeom },
    Depthwise { x: Var, w: Var, c: usize, geom: ConvGeom },
    Matmul(Var, Var),
    MatmulBt(Var, Var),
    LayerNorm { x: Var, gamma: Var, beta: Var, layout: NormLayout, xhat: Vec<f64>, rstd: Vec<f64> },
    Gelu(Var),
    Upsample { x: Var, split: (usize, usize, usize), taps: Vec<(usize, usize, f64, f64)> },
    Concat(Var, Var),
    SoftmaxRows(Var),
    ClusterMean { p: Var, owner: Vec<usize>, counts: Vec<usize> },
    Sum(Var),
    Cosine { a: Var, b: Var, na: f64, nb: f64 },
    Stack(Vec<Var>),
    Element(Var, usize),
    LogSumExp(Var),
    CrossEntropy { probs: Var, labels: Vec<u8>, floor: f64 },
    Dice { probs: Var, labels: Vec<u8>, eps: f64, inter: Vec<f64>, denom: Vec<f64> },
}

struct Node {
    value: Tensor,
    op: Op,
    tracked: bool,
}

/// Gradient tape. Build it forward, then call [`Graph::backward`] once.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Result of a backward pass, indexed by [`Var`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }
}

fn same_shape(a: &Tensor, b: &Tensor, what: &str) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(arg_err!("{what}: shape {:?} vs {:?}", a.shape(), b.shape()));
    }
    Ok(())
}

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::erf(x * core::f64::consts::FRAC_1_SQRT_2))
}

fn gelu_grad(x: f64) -> f64 {
    let cdf = 0.5 * (1.0 + libm::erf(x * core::f64::consts::FRAC_1_SQRT_2));
    let pdf = libm::exp(-0.5 * x * x) / libm::sqrt(2.0 * core::f64::consts::PI);
    cdf + x * pdf
}

fn vol_dims(t: &Tensor, what: &str) -> Result<(usize, [usize; 3])> {
    match t.shape() {
        &[c, d, h, w] => Ok((c, [d, h, w])),
        s => Err(arg_err!("{what}: expected (C, D, H, W), got {s:?}")),
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

    fn push(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Var {
        let tracked = inputs.iter().any(|v| self.nodes[v.0].tracked);
        self.nodes.push(Node { value, op, tracked });
        Var(self.nodes.len() - 1)
    }

    /// Adds an input tensor. Gradients are only produced for `trainable` leaves
    /// and the nodes that depend on them.
    pub fn leaf(&mut self, value: Tensor, trainable: bool) -> Var {
        self.nodes.push(Node { value, op: Op::Leaf, tracked: trainable });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        same_shape(ta, tb, "add")?;
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| x + y).collect();
        let t = Tensor::from_parts(ta.shape().to_vec(), data);
        Ok(self.push(t, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        same_shape(ta, tb, "sub")?;
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| x - y).collect();
        let t = Tensor::from_parts(ta.shape().to_vec(), data);
        Ok(self.push(t, Op::Sub(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        same_shape(ta, tb, "mul")?;
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| x * y).collect();
        let t = Tensor::from_parts(ta.shape().to_vec(), data);
        Ok(self.push(t, Op::Mul(a, b), &[a, b]))
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        let ta = self.value(a);
        let data = ta.data().iter().map(|x| x * factor).collect();
        let t = Tensor::from_parts(ta.shape().to_vec(), data);
        self.push(t, Op::Scale(a, factor), &[a])
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(a).reshape(shape)?;
        Ok(self.push(t, Op::Reshape(a), &[a]))
    }

    /// Transpose of a matrix.
    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let ta = self.value(a);
        let (r, c) = ta.dims2()?;
        let mut data = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                data[j * r + i] = ta.data()[i * c + j];
            }
        }
        Ok(self.push(Tensor::from_parts(vec![c, r], data), Op::Transpose(a), &[a]))
    }

    /// Adds `bias[c]` to every element of slice `c` along axis 0 (channels-first
    /// volumes), or to column `c` of a matrix when `per_column` is set.
    fn add_bias_impl(&mut self, x: Var, bias: Var, per_column: bool) -> Result<Var> {
        let (tx, tb) = (self.value(x), self.value(bias));
        let nb = tb.len();
        let (lead, inner) = if per_column {
            let (r, c) = tx.dims2()?;
            (r, c)
        } else {
            let c = tx.shape().first().copied().unwrap_or(0);
            (c, tx.len() / c.max(1))
        };
        let expect = if per_column { inner } else { lead };
        if nb != expect {
            return Err(arg_err!("bias length {nb} does not match {expect} channels"));
        }
        let mut data = tx.data().to_vec();
        if per_column {
            for row in data.chunks_mut(inner) {
                for (v, b) in row.iter_mut().zip(tb.data()) {
                    *v += b;
                }
            }
        } else {
            for (chunk, b) in data.chunks_mut(inner).zip(tb.data()) {
                for v in chunk {
                    *v += b;
                }
            }
        }
        let t = Tensor::from_parts(tx.shape().to_vec(), data);
        let inner = if per_column { 0 } else { inner };
        Ok(self.push(t, Op::AddBias { x, bias, inner }, &[x, bias]))
    }

    pub fn add_channel_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        self.add_bias_impl(x, bias, false)
    }

    pub fn add_column_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        self.add_bias_impl(x, bias, true)
    }

    /// Dense 3-D convolution of a `(Ci, D, H, W)` input with `(Co, Ci, k, k, k)` weights.
    pub fn conv3d(&mut self, x: Var, w: Var, stride: usize, pad: usize) -> Result<Var> {
        let (ci, dims) = vol_dims(self.value(x), "conv3d input")?;
        let (co, ci_w, k) = match self.shape(w) {
            &[co, ci, k, k2, k3] if k == k2 && k == k3 => (co, ci, k),
            s => return Err(arg_err!("conv3d weight: expected (Co, Ci, k, k, k), got {s:?}")),
        };
        if ci != ci_w {
            return Err(arg_err!("conv3d: input has {ci} channels, weight expects {ci_w}"));
        }
        let geom = ConvGeom::new(dims, k, stride, pad)
            .ok_or_else(|| arg_err!("conv3d: kernel {k} larger than padded input {dims:?}"))?;
        let out = kernels::conv3d_forward(self.value(x).data(), self.value(w).data(), ci, co, &geom);
        let [d, h, wd] = geom.out_dims;
        let t = Tensor::from_parts(vec![co, d, h, wd], out);
        Ok(self.push(t, Op::Conv3d { x, w, ci, co, geom }, &[x, w]))
    }

    /// Stride-1 depthwise convolution with `(C, k, k, k)` weights.
    pub fn depthwise_conv3d(&mut self, x: Var, w: Var, pad: usize) -> Result<Var> {
        let (c, dims) = vol_dims(self.value(x), "depthwise input")?;
        let k = match self.shape(w) {
            &[cw, k, k2, k3] if cw == c && k == k2 && k == k3 => k,
            s => return Err(arg_err!("depthwise weight: expected ({c}, k, k, k), got {s:?}")),
        };
        let geom = ConvGeom::new(dims, k, 1, pad)
            .ok_or_else(|| arg_err!("depthwise: kernel {k} larger than padded input {dims:?}"))?;
        let out = kernels::depthwise_forward(self.value(x).data(), self.value(w).data(), c, &geom);
        let [d, h, wd] = geom.out_dims;
        let t = Tensor::from_parts(vec![c, d, h, wd], out);
        Ok(self.push(t, Op::Depthwise { x, w, c, geom }, &[x, w]))
    }

    /// `a (m, k) · b (k, n)`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.value(a).dims2()?;
        let (k2, n) = self.value(b).dims2()?;
        if k != k2 {
            return Err(arg_err!("matmul: inner dims {k} vs {k2}"));
        }
        let mut out = vec![0.0; m * n];
        kernels::matmul_acc(self.value(a).data(), self.value(b).data(), &mut out, m, k, n);
        Ok(self.push(Tensor::from_parts(vec![m, n], out), Op::Matmul(a, b), &[a, b]))
    }

    /// `a (m, k) · b (n, k)ᵀ`.
    pub fn matmul_bt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.value(a).dims2()?;
        let (n, k2) = self.value(b).dims2()?;
        if k != k2 {
            return Err(arg_err!("matmul_bt: inner dims {k} vs {k2}"));
        }
        let mut out = vec![0.0; m * n];
        kernels::matmul_bt_acc(self.value(a).data(), self.value(b).data(), &mut out, m, k, n);
        Ok(self.push(Tensor::from_parts(vec![m, n], out), Op::MatmulBt(a, b), &[a, b]))
    }

    fn layer_norm_impl(&mut self, x: Var, gamma: Var, beta: Var, layout: NormLayout) -> Result<Var> {
        const EPS: f64 = 1e-6;
        let (tx, tg, tb) = (self.value(x), self.value(gamma), self.value(beta));
        if tg.len() != layout.channels || tb.len() != layout.channels {
            return Err(arg_err!("layer norm: affine params must have {} entries", layout.channels));
        }
        let xs = tx.data();
        let inv_c = 1.0 / layout.channels as f64;
        let mut mean = vec![0.0; layout.groups];
        let mut var = vec![0.0; layout.groups];
        for c in 0..layout.channels {
            for (g, m) in mean.iter_mut().enumerate() {
                *m += xs[layout.at(c, g)];
            }
        }
        mean.iter_mut().for_each(|m| *m *= inv_c);
        for c in 0..layout.channels {
            for (g, v) in var.iter_mut().enumerate() {
                let d = xs[layout.at(c, g)] - mean[g];
                *v += d * d;
            }
        }
        let rstd: Vec<f64> = var.iter().map(|v| 1.0 / libm::sqrt(v * inv_c + EPS)).collect();
        let mut xhat = vec![0.0; xs.len()];
        let mut out = vec![0.0; xs.len()];
        for c in 0..layout.channels {
            let (gc, bc) = (tg.data()[c], tb.data()[c]);
            for g in 0..layout.groups {
                let i = layout.at(c, g);
                let h = (xs[i] - mean[g]) * rstd[g];
                xhat[i] = h;
                out[i] = h * gc + bc;
            }
        }
        let t = Tensor::from_parts(tx.shape().to_vec(), out);
        Ok(self.push(t, Op::LayerNorm { x, gamma, beta, layout, xhat, rstd }, &[x, gamma, beta]))
    }

    /// Layer normalization across the channel axis of a `(C, ...)` volume,
    /// independently per voxel.
    pub fn layer_norm_channels(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let t = self.value(x);
        let c = *t.shape().first().ok_or_else(|| arg_err!("layer norm on a scalar"))?;
        let groups = t.len() / c.max(1);
        let layout = NormLayout { groups, channels: c, channel_stride: groups, group_stride: 1 };
        self.layer_norm_impl(x, gamma, beta, layout)
    }

    /// Layer normalization of each row of a matrix.
    pub fn layer_norm_rows(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let (r, c) = self.value(x).dims2()?;
        let layout = NormLayout { groups: r, channels: c, channel_stride: 1, group_stride: c };
        self.layer_norm_impl(x, gamma, beta, layout)
    }

    /// Exact (erf) GELU.
    pub fn gelu(&mut self, x: Var) -> Var {
        let tx = self.value(x);
        let data = tx.data().iter().map(|&v| gelu(v)).collect();
        let t = Tensor::from_parts(tx.shape().to_vec(), data);
        self.push(t, Op::Gelu(x), &[x])
    }

    /// Doubles one axis by nearest-neighbour or linear (half-pixel) interpolation.
    pub fn upsample_axis(&mut self, x: Var, axis: usize, linear: bool) -> Result<Var> {
        let tx = self.value(x);
        if axis >= tx.shape().len() || tx.shape()[axis] == 0 {
            return Err(arg_err!("upsample: bad axis {axis} for shape {:?}", tx.shape()));
        }
        let split = kernels::axis_split(tx.shape(), axis);
        let taps = kernels::upsample_taps(split.1, linear);
        let out = kernels::upsample_axis_forward(tx.data(), split, &taps);
        let mut shape = tx.shape().to_vec();
        shape[axis] *= 2;
        let t = Tensor::from_parts(shape, out);
        Ok(self.push(t, Op::Upsample { x, split, taps }, &[x]))
    }

    /// Concatenates along axis 0.
    pub fn concat(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape().len() != tb.shape().len() || ta.shape()[1..] != tb.shape()[1..] {
            return Err(arg_err!("concat: shapes {:?} and {:?}", ta.shape(), tb.shape()));
        }
        let mut shape = ta.shape().to_vec();
        shape[0] += tb.shape()[0];
        let mut data = Vec::with_capacity(ta.len() + tb.len());
        data.extend_from_slice(ta.data());
        data.extend_from_slice(tb.data());
        Ok(self.push(Tensor::from_parts(shape, data), Op::Concat(a, b), &[a, b]))
    }

    /// Row-wise softmax, stabilized by subtracting each row maximum.
    pub fn softmax_rows(&mut self, x: Var) -> Result<Var> {
        let tx = self.value(x);
        let (r, c) = tx.dims2()?;
        if !tx.all_finite() {
            return Err(numeric_err!("softmax input contains non-finite values"));
        }
        let mut out = vec![0.0; r * c];
        for (orow, xrow) in out.chunks_mut(c).zip(tx.data().chunks(c)) {
            let m = xrow.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut s = 0.0;
            for (o, v) in orow.iter_mut().zip(xrow) {
                *o = libm::exp(v - m);
                s += *o;
            }
            orow.iter_mut().for_each(|o| *o /= s);
        }
        Ok(self.push(Tensor::from_parts(vec![r, c], out), Op::SoftmaxRows(x), &[x]))
    }

    /// Per-cluster mean of the rows of `p (S, C)`; `owner[s]` is the cluster of
    /// row `s`. Empty clusters yield zero rows. The assignment is a constant.
    pub fn cluster_mean(&mut self, p: Var, owner: &[usize], clusters: usize) -> Result<Var> {
        let tp = self.value(p);
        let (s, c) = tp.dims2()?;
        if owner.len() != s {
            return Err(arg_err!("cluster mean: {} owners for {s} rows", owner.len()));
        }
        let mut counts = vec![0usize; clusters];
        let mut out = vec![0.0; clusters * c];
        for (row, &o) in tp.data().chunks(c).zip(owner) {
            if o >= clusters {
                return Err(arg_err!("cluster mean: owner {o} out of range {clusters}"));
            }
            counts[o] += 1;
            for (a, v) in out[o * c..(o + 1) * c].iter_mut().zip(row) {
                *a += v;
            }
        }
        for (row, &n) in out.chunks_mut(c).zip(&counts) {
            if n > 0 {
                let inv = 1.0 / n as f64;
                row.iter_mut().for_each(|v| *v *= inv);
            }
        }
        let t = Tensor::from_parts(vec![clusters, c], out);
        Ok(self.push(t, Op::ClusterMean { p, owner: owner.to_vec(), counts }, &[p]))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(x), &[x])
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.value(x).len().max(1);
        let s = self.sum(x);
        self.scale(s, 1.0 / n as f64)
    }

    /// Cosine similarity of two tensors viewed as flat vectors.
    pub fn cosine(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.len() != tb.len() {
            return Err(arg_err!("cosine: lengths {} vs {}", ta.len(), tb.len()));
        }
        let na = libm::sqrt(ta.data().iter().map(|v| v * v).sum());
        let nb = libm::sqrt(tb.data().iter().map(|v| v * v).sum());
        if na == 0.0 || nb == 0.0 {
            return Err(numeric_err!("cosine similarity of a zero-norm vector"));
        }
        let dot: f64 = ta.data().iter().zip(tb.data()).map(|(x, y)| x * y).sum();
        let t = Tensor::scalar(dot / (na * nb));
        Ok(self.push(t, Op::Cosine { a, b, na, nb }, &[a, b]))
    }

    /// Stacks scalar nodes into a vector.
    pub fn stack(&mut self, xs: &[Var]) -> Result<Var> {
        let mut data = Vec::with_capacity(xs.len());
        for &x in xs {
            let t = self.value(x);
            if t.len() != 1 {
                return Err(arg_err!("stack expects scalars, got shape {:?}", t.shape()));
            }
            data.push(t.item());
        }
        let t = Tensor::from_parts(vec![xs.len()], data);
        Ok(self.push(t, Op::Stack(xs.to_vec()), xs))
    }

    /// Selects one element (flat index) as a scalar.
    pub fn element(&mut self, x: Var, index: usize) -> Result<Var> {
        let v = *self
            .value(x)
            .data()
            .get(index)
            .ok_or_else(|| arg_err!("element index {index} out of range"))?;
        Ok(self.push(Tensor::scalar(v), Op::Element(x, index), &[x]))
    }

    pub fn logsumexp(&mut self, x: Var) -> Result<Var> {
        let d = self.value(x).data();
        if d.is_empty() {
            return Err(arg_err!("logsumexp of an empty vector"));
        }
        let m = d.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let s: f64 = d.iter().map(|v| libm::exp(v - m)).sum();
        let t = Tensor::scalar(m + libm::log(s));
        Ok(self.push(t, Op::LogSumExp(x), &[x]))
    }

    /// Mean voxel negative log-likelihood of class probabilities `(S, K)`.
    pub fn cross_entropy(&mut self, probs: Var, labels: &[u8]) -> Result<Var> {
        const FLOOR: f64 = 1e-12;
        let tp = self.value(probs);
        let (s, k) = tp.dims2()?;
        if labels.len() != s {
            return Err(arg_err!("cross entropy: {} labels for {s} voxels", labels.len()));
        }
        let mut acc = 0.0;
        for (row, &y) in tp.data().chunks(k).zip(labels) {
            if y as usize >= k {
                return Err(arg_err!("label {y} outside [0, {k})"));
            }
            acc -= libm::log(row[y as usize].max(FLOOR));
        }
        let t = Tensor::scalar(acc / s as f64);
        Ok(self.push(t, Op::CrossEntropy { probs, labels: labels.to_vec(), floor: FLOOR }, &[probs]))
    }

    /// Soft Dice loss `1 - mean_c (2 Σ p y + eps) / (Σ p + Σ y + eps)` over all classes.
    pub fn dice_loss(&mut self, probs: Var, labels: &[u8], eps: f64) -> Result<Var> {
        let tp = self.value(probs);
        let (s, k) = tp.dims2()?;
        if labels.len() != s {
            return Err(arg_err!("dice: {} labels for {s} voxels", labels.len()));
        }
        let mut inter = vec![0.0; k];
        let mut psum = vec![0.0; k];
        let mut ysum = vec![0.0; k];
        for (row, &y) in tp.data().chunks(k).zip(labels) {
            let y = y as usize;
            if y >= k {
                return Err(arg_err!("label {y} outside [0, {k})"));
            }
            for (ps, p) in psum.iter_mut().zip(row) {
                *ps += p;
            }
            inter[y] += row[y];
            ysum[y] += 1.0;
        }
        let denom: Vec<f64> = psum.iter().zip(&ysum).map(|(p, y)| p + y + eps).collect();
        let score: f64 = inter.iter().zip(&denom).map(|(i, d)| (2.0 * i + eps) / d).sum();
        let t = Tensor::scalar(1.0 - score / k as f64);
        Ok(self.push(t, Op::Dice { probs, labels: labels.to_vec(), eps, inter, denom }, &[probs]))
    }

    /// Gradients of scalar `root` with respect to every tracked node.
    pub fn backward(&self, root: Var) -> Result<Gradients> {
        if self.value(root).len() != 1 {
            return Err(arg_err!("backward needs a scalar root, got {:?}", self.shape(root)));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        if !self.nodes[root.0].tracked {
            return Ok(Gradients { grads });
        }
        grads[root.0] = Some(Tensor::scalar(1.0));
        for idx in (0..=root.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn slot<'a>(&self, grads: &'a mut [Option<Tensor>], v: Var) -> Option<&'a mut [f64]> {
        let node = &self.nodes[v.0];
        if !node.tracked {
            return None;
        }
        Some(
            grads[v.0]
                .get_or_insert_with(|| Tensor::zeros(node.value.shape()))
                .data_mut(),
        )
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], v: Var, src: &[f64], factor: f64) {
        if let Some(d) = self.slot(grads, v) {
            for (a, b) in d.iter_mut().zip(src) {
                *a += factor * b;
            }
        }
    }

    fn propagate(&self, idx: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let gd = g.data();
        match &self.nodes[idx].op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.accumulate(grads, *a, gd, 1.0);
                self.accumulate(grads, *b, gd, 1.0);
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, gd, 1.0);
                self.accumulate(grads, *b, gd, -1.0);
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                if let Some(d) = self.slot(grads, *a) {
                    for ((x, gv), y) in d.iter_mut().zip(gd).zip(vb) {
                        *x += gv * y;
                    }
                }
                if let Some(d) = self.slot(grads, *b) {
                    for ((x, gv), y) in d.iter_mut().zip(gd).zip(va) {
                        *x += gv * y;
                    }
                }
            }
            Op::Scale(a, f) => self.accumulate(grads, *a, gd, *f),
            Op::Reshape(a) => self.accumulate(grads, *a, gd, 1.0),
            Op::Concat(a, b) => {
                let na = self.value(*a).len();
                self.accumulate(grads, *a, &gd[..na], 1.0);
                self.accumulate(grads, *b, &gd[na..], 1.0);
            }
            Op::Transpose(a) => {
                let (r, c) = (self.shape(*a)[0], self.shape(*a)[1]);
                if let Some(d) = self.slot(grads, *a) {
                    for i in 0..r {
                        for j in 0..c {
                            d[i * c + j] += gd[j * r + i];
                        }
                    }
                }
            }
            Op::AddBias { x, bias, inner } => {
                self.accumulate(grads, *x, gd, 1.0);
                if let Some(d) = self.slot(grads, *bias) {
                    if *inner == 0 {
                        let c = d.len();
                        for row in gd.chunks(c) {
                            for (b, v) in d.iter_mut().zip(row) {
                                *b += v;
                            }
                        }
                    } else {
                        for (b, chunk) in d.iter_mut().zip(gd.chunks(*inner)) {
                            *b += chunk.iter().sum::<f64>();
                        }
                    }
                }
            }
            Op::Conv3d { x, w, ci, co, geom } => {
                let (vx, vw) = (self.value(*x).data(), self.value(*w).data());
                let mut dx = self.nodes[x.0].tracked.then(|| vec![0.0; vx.len()]);
                let mut dw = self.nodes[w.0].tracked.then(|| vec![0.0; vw.len()]);
                kernels::conv3d_backward(vx, vw, gd, *ci, *co, geom, dx.as_deref_mut(), dw.as_deref_mut());
                if let Some(dx) = dx {
                    self.accumulate(grads, *x, &dx, 1.0);
                }
                if let Some(dw) = dw {
                    self.accumulate(grads, *w, &dw, 1.0);
                }
            }
            Op::Depthwise { x, w, c, geom } => {
                let (vx, vw) = (self.value(*x).data(), self.value(*w).data());
                let mut dx = self.nodes[x.0].tracked.then(|| vec![0.0; vx.len()]);
                let mut dw = self.nodes[w.0].tracked.then(|| vec![0.0; vw.len()]);
                kernels::depthwise_backward(vx, vw, gd, *c, geom, dx.as_deref_mut(), dw.as_deref_mut());
                if let Some(dx) = dx {
                    self.accumulate(grads, *x, &dx, 1.0);
                }
                if let Some(dw) = dw {
                    self.accumulate(grads, *w, &dw, 1.0);
                }
            }
            Op::Matmul(a, b) => {
                let (m, k) = (self.shape(*a)[0], self.shape(*a)[1]);
                let n = self.shape(*b)[1];
                let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                // dA = dC · Bᵀ ; dB = Aᵀ · dC
                if let Some(d) = self.slot(grads, *a) {
                    kernels::matmul_bt_acc(gd, vb, d, m, n, k);
                }
                if let Some(d) = self.slot(grads, *b) {
                    kernels::matmul_at_acc(va, gd, d, m, k, n);
                }
            }
            Op::MatmulBt(a, b) => {
                let (m, k) = (self.shape(*a)[0], self.shape(*a)[1]);
                let n = self.shape(*b)[0];
                let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                // C = A Bᵀ: dA = dC · B ; dB = dCᵀ · A
                if let Some(d) = self.slot(grads, *a) {
                    kernels::matmul_acc(gd, vb, d, m, n, k);
                }
                if let Some(d) = self.slot(grads, *b) {
                    kernels::matmul_at_acc(gd, va, d, m, n, k);
                }
            }
            Op::LayerNorm { x, gamma, beta, layout, xhat, rstd } => {
                let gam = self.value(*gamma).data();
                if let Some(d) = self.slot(grads, *gamma) {
                    for (c, dv) in d.iter_mut().enumerate() {
                        for gi in 0..layout.groups {
                            let i = layout.at(c, gi);
                            *dv += gd[i] * xhat[i];
                        }
                    }
                }
                if let Some(d) = self.slot(grads, *beta) {
                    for (c, dv) in d.iter_mut().enumerate() {
                        for gi in 0..layout.groups {
                            *dv += gd[layout.at(c, gi)];
                        }
                    }
                }
                if let Some(d) = self.slot(grads, *x) {
                    let inv_c = 1.0 / layout.channels as f64;
                    let mut mean_dh = vec![0.0; layout.groups];
                    let mut mean_dhx = vec![0.0; layout.groups];
                    for (c, gc) in gam.iter().enumerate() {
                        for gi in 0..layout.groups {
                            let i = layout.at(c, gi);
                            let dh = gd[i] * gc;
                            mean_dh[gi] += dh;
                            mean_dhx[gi] += dh * xhat[i];
                        }
                    }
                    for (c, gc) in gam.iter().enumerate() {
                        for gi in 0..layout.groups {
                            let i = layout.at(c, gi);
                            let dh = gd[i] * gc;
                            d[i] += rstd[gi] * (dh - inv_c * (mean_dh[gi] + xhat[i] * mean_dhx[gi]));
                        }
                    }
                }
            }
            Op::Gelu(x) => {
                let vx = self.value(*x).data();
                if let Some(d) = self.slot(grads, *x) {
                    for ((dv, gv), xv) in d.iter_mut().zip(gd).zip(vx) {
                        *dv += gv * gelu_grad(*xv);
                    }
                }
            }
            Op::Upsample { x, split, taps } => {
                if let Some(d) = self.slot(grads, *x) {
                    kernels::upsample_axis_backward(gd, d, *split, taps);
                }
            }
            Op::SoftmaxRows(x) => {
                let y = self.nodes[idx].value.data();
                let c = self.shape(*x)[1];
                if let Some(d) = self.slot(grads, *x) {
                    for ((drow, yrow), grow) in d.chunks_mut(c).zip(y.chunks(c)).zip(gd.chunks(c)) {
                        let dot: f64 = yrow.iter().zip(grow).map(|(a, b)| a * b).sum();
                        for ((dv, yv), gv) in drow.iter_mut().zip(yrow).zip(grow) {
                            *dv += yv * (gv - dot);
                        }
                    }
                }
            }
            Op::ClusterMean { p, owner, counts } => {
                let c = self.shape(*p)[1];
                if let Some(d) = self.slot(grads, *p) {
                    for (drow, &o) in d.chunks_mut(c).zip(owner) {
                        let inv = 1.0 / counts[o] as f64;
                        for (dv, gv) in drow.iter_mut().zip(&gd[o * c..(o + 1) * c]) {
                            *dv += inv * gv;
                        }
                    }
                }
            }
            Op::Sum(x) => {
                let gv = gd[0];
                if let Some(d) = self.slot(grads, *x) {
                    d.iter_mut().for_each(|v| *v += gv);
                }
            }
            Op::Cosine { a, b, na, nb } => {
                let s = self.nodes[idx].value.item();
                let gv = gd[0];
                let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                // ∂s/∂a = b/(|a||b|) - s a/|a|²
                if let Some(d) = self.slot(grads, *a) {
                    for ((dv, x), y) in d.iter_mut().zip(va).zip(vb) {
                        *dv += gv * (y / (na * nb) - s * x / (na * na));
                    }
                }
                if let Some(d) = self.slot(grads, *b) {
                    for ((dv, x), y) in d.iter_mut().zip(va).zip(vb) {
                        *dv += gv * (x / (na * nb) - s * y / (nb * nb));
                    }
                }
            }
            Op::Stack(xs) => {
                for (x, gv) in xs.iter().zip(gd) {
                    if let Some(d) = self.slot(grads, *x) {
                        d[0] += gv;
                    }
                }
            }
            Op::Element(x, i) => {
                if let Some(d) = self.slot(grads, *x) {
                    d[*i] += gd[0];
                }
            }
            Op::LogSumExp(x) => {
                let out = self.nodes[idx].value.item();
                let vx = self.value(*x).data();
                if let Some(d) = self.slot(grads, *x) {
                    for (dv, v) in d.iter_mut().zip(vx) {
                        *dv += gd[0] * libm::exp(v - out);
                    }
                }
            }
            Op::CrossEntropy { probs, labels, floor } => {
                let k = self.shape(*probs)[1];
                let vp = self.value(*probs).data();
                let scale = gd[0] / labels.len() as f64;
                if let Some(d) = self.slot(grads, *probs) {
                    for (s, &y) in labels.iter().enumerate() {
                        let i = s * k + y as usize;
                        if vp[i] > *floor {
                            d[i] -= scale / vp[i];
                        }
                    }
                }
            }
            Op::Dice { probs, labels, eps, inter, denom } => {
                let k = self.shape(*probs)[1];
                let kf = k as f64;
                // ∂/∂p_sc of -(1/K)(2I_c+eps)/D_c
                let coef: Vec<f64> = inter
                    .iter()
                    .zip(denom)
                    .map(|(i, dn)| (2.0 * i + eps) / (dn * dn))
                    .collect();
                if let Some(d) = self.slot(grads, *probs) {
                    for (drow, &y) in d.chunks_mut(k).zip(labels) {
                        for (c, dv) in drow.iter_mut().enumerate() {
                            let mut v = coef[c];
                            if c == y as usize {
                                v -= 2.0 / denom[c];
                            }
                            *dv += gd[0] * v / kf;
                        }
                    }
                }
            }
        }
    }
}
