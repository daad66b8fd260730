//! Reverse-mode automatic differentiation over [`Tensor`] values.
//!
//! A [`Tape`] records every operation of one forward pass in execution order,
//! so node indices are already a topological order. [`Tape::backward`] walks
//! the nodes once in reverse, summing gradient contributions across fan-out.
//!
//! Leaf gradients accumulate across calls to `backward`; callers clear them
//! with [`Tape::zero_grads`] (or [`ParamStore::zero_grads`] for bound
//! parameters). Interior gradients are kept only for nodes marked with
//! [`Tape::retain_grad`].

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{shape_err, Error, Result};
use crate::kernels::{axpy, conv_backward_input, conv_backward_weight, conv_forward, dot, ConvGeom};
use crate::params::{ParamId, ParamStore, RunningStats};
use crate::tensor::{dims4, numel, Tensor};

/// Normalisation stabiliser added to every variance.
pub const NORM_EPS: f64 = 1e-5;
/// Weight of the newest batch in the running-statistics average.
pub const BN_MOMENTUM: f64 = 0.1;

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Forward-pass behaviour of batch normalisation.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Bcast {
    Same,
    /// Right operand is `N, C, 1, 1` against a `N, C, H, W` left operand.
    Right(usize),
    /// Left operand is `N, C, 1, 1` against a `N, C, H, W` right operand.
    Left(usize),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum NormKind {
    Batch,
    Instance,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Conv { x: usize, w: usize, geom: ConvGeom },
    Add { a: usize, b: usize, bc: Bcast },
    Sub { a: usize, b: usize },
    Mul { a: usize, b: usize, bc: Bcast },
    Scale { x: usize, s: f64 },
    Shift { x: usize },
    Relu { x: usize },
    Sigmoid { x: usize },
    GlobalAvgPool { x: usize },
    MaxPool { x: usize, argmax: Vec<usize> },
    AvgPool { x: usize, k: usize, stride: usize },
    Linear { x: usize, w: usize, b: Option<usize> },
    Norm { x: usize, gamma: usize, beta: usize, kind: NormKind, xhat: Vec<f64>, inv_std: Vec<f64> },
    NormFixed { x: usize, gamma: usize, beta: usize, mean: Vec<f64>, inv_std: Vec<f64> },
    Reshape { x: usize },
    Sum { x: usize },
    Softmax { x: usize },
    WeightedSum { xs: Vec<usize>, w: usize },
    SmoothedCe { logits: usize, dlogits: Vec<f64> },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
    retain: bool,
    grad: Option<Vec<f64>>,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    bound: Vec<(ParamId, Var)>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradient of the last `backward` loss with respect to `v`, when tracked.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].grad.as_deref()
    }

    /// Hash of the branch taken by every piecewise-linear op on the tape:
    /// the sign of each ReLU input and the winner of each max-pool window.
    /// Two evaluations with equal signatures lie on the same smooth piece.
    pub fn branch_signature(&self) -> u64 {
        const PRIME: u64 = 0x0100_0000_01b3;
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        let mut mix = |v: u64| h = (h ^ v).wrapping_mul(PRIME);
        for node in &self.nodes {
            match &node.op {
                Op::Relu { x } => self.nodes[*x].value.data().iter().for_each(|&v| mix(u64::from(v > 0.0))),
                Op::MaxPool { argmax, .. } => argmax.iter().for_each(|&i| mix(i as u64)),
                _ => {}
            }
        }
        h
    }

    /// Keeps the gradient of an interior node after `backward`.
    pub fn retain_grad(&mut self, v: Var) {
        self.nodes[v.0].retain = true;
    }

    pub fn zero_grads(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
    }

    /// Records a leaf value.
    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op: Op::Leaf, requires_grad, retain: false, grad: None });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    /// Brings a stored parameter onto the tape. Binding the same parameter
    /// twice returns the same handle so shared weights sum their gradients.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(&(_, v)) = self.bound.iter().find(|(p, _)| *p == id) {
            return v;
        }
        let p = store.get(id);
        let v = self.leaf(p.value.clone(), p.trainable);
        self.bound.push((id, v));
        v
    }

    /// Adds the gradients of all bound parameters into the store.
    pub fn accumulate_param_grads(&self, store: &mut ParamStore) {
        for &(id, v) in &self.bound {
            if let Some(g) = &self.nodes[v.0].grad {
                for (dst, src) in store.get_mut(id).grad.iter_mut().zip(g) {
                    *dst += src;
                }
            }
        }
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[usize]) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite(format!("output of {}", op_name(&op))));
        }
        let requires_grad = inputs.iter().any(|&i| self.nodes[i].requires_grad);
        self.nodes.push(Node { value, op, requires_grad, retain: false, grad: None });
        Ok(Var(self.nodes.len() - 1))
    }

    fn data(&self, v: Var) -> &[f64] {
        self.nodes[v.0].value.data()
    }

    // ----------------------------------------------------------------------
    // Convolutions
    // ----------------------------------------------------------------------

    fn conv_impl(&mut self, x: Var, w: Var, stride: usize, pad: usize, depthwise: bool) -> Result<Var> {
        let [n, c_in, h, wd] = dims4(self.shape(x))?;
        let [c_out, wc, k, k2] = dims4(self.shape(w))?;
        if k != k2 || k == 0 {
            return Err(shape_err!("kernel must be square, got {k}x{k2}"));
        }
        if stride == 0 {
            return Err(shape_err!("stride must be at least 1"));
        }
        if depthwise {
            if wc != 1 || c_out != c_in {
                return Err(shape_err!("depthwise kernel {:?} does not fit {c_in} channels", self.shape(w)));
            }
        } else if wc != c_in {
            return Err(shape_err!("kernel expects {wc} input channels, input has {c_in}"));
        }
        if h + 2 * pad < k || wd + 2 * pad < k {
            return Err(shape_err!("kernel {k} larger than padded input {h}x{wd}"));
        }
        let geom = ConvGeom {
            n,
            c_in,
            h,
            w: wd,
            c_out,
            k,
            stride,
            pad,
            oh: (h + 2 * pad - k) / stride + 1,
            ow: (wd + 2 * pad - k) / stride + 1,
            depthwise,
        };
        let y = conv_forward(self.data(x), self.data(w), &geom);
        let value = Tensor::new(&[n, c_out, geom.oh, geom.ow], y)?;
        self.push(value, Op::Conv { x: x.0, w: w.0, geom }, &[x.0, w.0])
    }

    /// Dense 2-D convolution of an `N, C, H, W` input with a `C', C, k, k` kernel.
    pub fn conv2d(&mut self, x: Var, w: Var, stride: usize, padding: usize) -> Result<Var> {
        self.conv_impl(x, w, stride, padding, false)
    }

    /// Per-channel spatial convolution with a `C, 1, k, k` kernel, stride 1.
    pub fn depthwise_conv2d(&mut self, x: Var, w: Var, padding: usize) -> Result<Var> {
        self.conv_impl(x, w, 1, padding, true)
    }

    /// 1x1 channel-mixing convolution with a `C', C, 1, 1` kernel.
    pub fn pointwise_conv2d(&mut self, x: Var, w: Var) -> Result<Var> {
        if self.shape(w).len() != 4 || self.shape(w)[2] != 1 || self.shape(w)[3] != 1 {
            return Err(shape_err!("pointwise kernel must be C',C,1,1, got {:?}", self.shape(w)));
        }
        self.conv_impl(x, w, 1, 0, false)
    }

    // ----------------------------------------------------------------------
    // Elementwise
    // ----------------------------------------------------------------------

    fn bcast(&self, a: Var, b: Var) -> Result<Bcast> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa == sb {
            return Ok(Bcast::Same);
        }
        let is_vec = |s: &[usize], full: &[usize]| {
            s.len() == 4 && full.len() == 4 && s[0] == full[0] && s[1] == full[1] && s[2] == 1 && s[3] == 1
        };
        if is_vec(sb, sa) {
            Ok(Bcast::Right(sa[2] * sa[3]))
        } else if is_vec(sa, sb) {
            Ok(Bcast::Left(sb[2] * sb[3]))
        } else {
            Err(shape_err!("cannot broadcast {:?} with {:?}", sa, sb))
        }
    }

    fn binary(&self, a: Var, b: Var, bc: Bcast, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        let (da, db) = (self.data(a), self.data(b));
        let (shape, out): (&[usize], Vec<f64>) = match bc {
            Bcast::Same => (self.shape(a), da.iter().zip(db).map(|(&x, &y)| f(x, y)).collect()),
            Bcast::Right(hw) => (self.shape(a), da.iter().enumerate().map(|(i, &x)| f(x, db[i / hw])).collect()),
            Bcast::Left(hw) => (self.shape(b), db.iter().enumerate().map(|(i, &y)| f(da[i / hw], y)).collect()),
        };
        Tensor::new(shape, out)
    }

    /// Elementwise sum; either operand may be an `N, C, 1, 1` channel vector.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let bc = self.bcast(a, b)?;
        let value = self.binary(a, b, bc, |x, y| x + y)?;
        self.push(value, Op::Add { a: a.0, b: b.0, bc }, &[a.0, b.0])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(shape_err!("sub: {:?} vs {:?}", self.shape(a), self.shape(b)));
        }
        let value = self.binary(a, b, Bcast::Same, |x, y| x - y)?;
        self.push(value, Op::Sub { a: a.0, b: b.0 }, &[a.0, b.0])
    }

    /// Hadamard product; either operand may be an `N, C, 1, 1` channel vector.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let bc = self.bcast(a, b)?;
        let value = self.binary(a, b, bc, |x, y| x * y)?;
        self.push(value, Op::Mul { a: a.0, b: b.0, bc }, &[a.0, b.0])
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Result<Var> {
        let value = Tensor::new(self.shape(x), self.data(x).iter().map(|v| v * s).collect())?;
        self.push(value, Op::Scale { x: x.0, s }, &[x.0])
    }

    /// Adds a constant tensor of the same shape.
    pub fn shift(&mut self, x: Var, offset: &[f64]) -> Result<Var> {
        if offset.len() != self.data(x).len() {
            return Err(shape_err!("shift: {} offsets for {} values", offset.len(), self.data(x).len()));
        }
        let value = Tensor::new(self.shape(x), self.data(x).iter().zip(offset).map(|(a, b)| a + b).collect())?;
        self.push(value, Op::Shift { x: x.0 }, &[x.0])
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let value = Tensor::new(self.shape(x), self.data(x).iter().map(|&v| v.max(0.0)).collect())?;
        self.push(value, Op::Relu { x: x.0 }, &[x.0])
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        let value = Tensor::new(self.shape(x), self.data(x).iter().map(|&v| sigmoid(v)).collect())?;
        self.push(value, Op::Sigmoid { x: x.0 }, &[x.0])
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).clone().reshaped(shape)?;
        self.push(value, Op::Reshape { x: x.0 }, &[x.0])
    }

    /// Sum of all elements as a scalar.
    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.data(x).iter().sum();
        self.push(Tensor::scalar(s), Op::Sum { x: x.0 }, &[x.0])
    }

    /// Softmax over the last axis of a rank-1 or rank-2 tensor.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let k = match shape.len() {
            1 | 2 => *shape.last().unwrap(),
            _ => return Err(shape_err!("softmax expects rank 1 or 2, got {:?}", shape)),
        };
        let mut out = self.data(x).to_vec();
        for row in out.chunks_mut(k.max(1)) {
            softmax_in_place(row);
        }
        self.push(Tensor::new(&shape, out)?, Op::Softmax { x: x.0 }, &[x.0])
    }

    /// `Σ_i weights[i] · xs[i]` for equally shaped inputs and a rank-1 weight vector.
    pub fn weighted_sum(&mut self, xs: &[Var], weights: Var) -> Result<Var> {
        let first = *xs.first().ok_or_else(|| shape_err!("weighted_sum of zero inputs"))?;
        if self.shape(weights) != [xs.len()] {
            return Err(shape_err!("{} inputs but weight shape {:?}", xs.len(), self.shape(weights)));
        }
        let shape = self.shape(first).to_vec();
        let mut out = vec![0.0; numel(&shape)];
        for (i, &x) in xs.iter().enumerate() {
            if self.shape(x) != shape.as_slice() {
                return Err(shape_err!("weighted_sum: {:?} vs {:?}", self.shape(x), shape));
            }
            axpy(&mut out, self.data(weights)[i], self.data(x));
        }
        let mut inputs: Vec<usize> = xs.iter().map(|v| v.0).collect();
        inputs.push(weights.0);
        let op = Op::WeightedSum { xs: xs.iter().map(|v| v.0).collect(), w: weights.0 };
        self.push(Tensor::new(&shape, out)?, op, &inputs)
    }

    // ----------------------------------------------------------------------
    // Pooling
    // ----------------------------------------------------------------------

    /// Mean over H and W, keeping an `N, C, 1, 1` shape.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let [n, c, h, w] = dims4(self.shape(x))?;
        let hw = h * w;
        let out = self.data(x).chunks(hw).map(|p| p.iter().sum::<f64>() / hw as f64).collect();
        self.push(Tensor::new(&[n, c, 1, 1], out)?, Op::GlobalAvgPool { x: x.0 }, &[x.0])
    }

    /// Max pooling; padded positions never win.
    pub fn max_pool(&mut self, x: Var, k: usize, stride: usize, padding: usize) -> Result<Var> {
        let [n, c, h, w] = dims4(self.shape(x))?;
        if k == 0 || stride == 0 || h + 2 * padding < k || w + 2 * padding < k || padding >= k {
            return Err(shape_err!("max_pool window {k} (pad {padding}) does not fit {h}x{w}"));
        }
        let oh = (h + 2 * padding - k) / stride + 1;
        let ow = (w + 2 * padding - k) / stride + 1;
        let src = self.data(x);
        let mut out = Vec::with_capacity(n * c * oh * ow);
        let mut argmax = Vec::with_capacity(n * c * oh * ow);
        for plane in 0..n * c {
            let base = plane * h * w;
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut best = f64::NEG_INFINITY;
                    let mut at = usize::MAX;
                    for ky in 0..k {
                        let iy = oy * stride + ky;
                        if iy < padding || iy - padding >= h {
                            continue;
                        }
                        for kx in 0..k {
                            let ix = ox * stride + kx;
                            if ix < padding || ix - padding >= w {
                                continue;
                            }
                            let idx = base + (iy - padding) * w + ix - padding;
                            if src[idx] > best {
                                best = src[idx];
                                at = idx;
                            }
                        }
                    }
                    out.push(best);
                    argmax.push(at);
                }
            }
        }
        self.push(Tensor::new(&[n, c, oh, ow], out)?, Op::MaxPool { x: x.0, argmax }, &[x.0])
    }

    /// Unpadded average pooling.
    pub fn avg_pool(&mut self, x: Var, k: usize, stride: usize) -> Result<Var> {
        let [n, c, h, w] = dims4(self.shape(x))?;
        if k == 0 || stride == 0 || h < k || w < k {
            return Err(shape_err!("avg_pool window {k} larger than {h}x{w}"));
        }
        let oh = (h - k) / stride + 1;
        let ow = (w - k) / stride + 1;
        let src = self.data(x);
        let norm = (k * k) as f64;
        let mut out = Vec::with_capacity(n * c * oh * ow);
        for plane in 0..n * c {
            let base = plane * h * w;
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = 0.0;
                    for ky in 0..k {
                        let row = base + (oy * stride + ky) * w + ox * stride;
                        acc += src[row..row + k].iter().sum::<f64>();
                    }
                    out.push(acc / norm);
                }
            }
        }
        self.push(Tensor::new(&[n, c, oh, ow], out)?, Op::AvgPool { x: x.0, k, stride }, &[x.0])
    }

    // ----------------------------------------------------------------------
    // Dense
    // ----------------------------------------------------------------------

    /// `x · weightᵀ + bias` for `x: N×d`, `weight: d'×d`, `bias: d'`.
    pub fn linear(&mut self, x: Var, weight: Var, bias: Option<Var>) -> Result<Var> {
        let (sx, sw) = (self.shape(x), self.shape(weight));
        let (&[n, d], &[d_out, d_in]) = (sx, sw) else {
            return Err(shape_err!("linear expects N×d input and d'×d weight, got {:?}, {:?}", sx, sw));
        };
        if d != d_in {
            return Err(shape_err!("linear: input width {d} vs weight width {d_in}"));
        }
        if let Some(b) = bias {
            if self.shape(b) != [d_out] {
                return Err(shape_err!("linear: bias shape {:?}, expected [{d_out}]", self.shape(b)));
            }
        }
        let (xd, wd) = (self.data(x), self.data(weight));
        let mut out = Vec::with_capacity(n * d_out);
        for row in xd.chunks(d) {
            for j in 0..d_out {
                let b = bias.map_or(0.0, |b| self.data(b)[j]);
                out.push(b + dot(&wd[j * d..(j + 1) * d], row));
            }
        }
        let mut inputs = vec![x.0, weight.0];
        inputs.extend(bias.map(|b| b.0));
        let op = Op::Linear { x: x.0, w: weight.0, b: bias.map(|b| b.0) };
        self.push(Tensor::new(&[n, d_out], out)?, op, &inputs)
    }

    // ----------------------------------------------------------------------
    // Normalisation
    // ----------------------------------------------------------------------

    fn check_affine(&self, x: Var, gamma: Var, beta: Var) -> Result<[usize; 4]> {
        let dims = dims4(self.shape(x))?;
        if self.shape(gamma) != [dims[1]] || self.shape(beta) != [dims[1]] {
            return Err(shape_err!(
                "affine parameters {:?}/{:?} do not match {} channels",
                self.shape(gamma),
                self.shape(beta),
                dims[1]
            ));
        }
        Ok(dims)
    }

    /// Batch normalisation over `(N, H, W)` per channel.
    ///
    /// Training mode normalises with batch statistics and folds them into
    /// `stats`; eval mode normalises with `stats`.
    pub fn batch_norm(&mut self, x: Var, gamma: Var, beta: Var, stats: &mut RunningStats, mode: Mode) -> Result<Var> {
        let [n, c, h, w] = self.check_affine(x, gamma, beta)?;
        if stats.mean.len() != c {
            return Err(shape_err!("running statistics for {} channels, input has {c}", stats.mean.len()));
        }
        let hw = h * w;
        let src = self.data(x);
        let (g, b) = (self.data(gamma), self.data(beta));
        if mode == Mode::Eval {
            if stats.batches == 0 {
                log::warn!("batch norm '{}' evaluated before any statistics were accumulated", stats.name);
            }
            let inv_std: Vec<f64> = stats.var.iter().map(|v| 1.0 / libm::sqrt(v + NORM_EPS)).collect();
            let mut out = Vec::with_capacity(src.len());
            for (i, v) in src.iter().enumerate() {
                let ch = (i / hw) % c;
                out.push(g[ch] * (v - stats.mean[ch]) * inv_std[ch] + b[ch]);
            }
            let op = Op::NormFixed { x: x.0, gamma: gamma.0, beta: beta.0, mean: stats.mean.clone(), inv_std };
            return self.push(Tensor::new(&[n, c, h, w], out)?, op, &[x.0, gamma.0, beta.0]);
        }
        let m = (n * hw) as f64;
        let mut mean = vec![0.0; c];
        let mut var = vec![0.0; c];
        for (ch, mu) in mean.iter_mut().enumerate() {
            let mut acc = 0.0;
            for s in 0..n {
                acc += src[(s * c + ch) * hw..][..hw].iter().sum::<f64>();
            }
            *mu = acc / m;
        }
        for (ch, vr) in var.iter_mut().enumerate() {
            let mut acc = 0.0;
            for s in 0..n {
                acc += src[(s * c + ch) * hw..][..hw].iter().map(|v| (v - mean[ch]) * (v - mean[ch])).sum::<f64>();
            }
            *vr = acc / m;
        }
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / libm::sqrt(v + NORM_EPS)).collect();
        let mut xhat = Vec::with_capacity(src.len());
        let mut out = Vec::with_capacity(src.len());
        for (i, v) in src.iter().enumerate() {
            let ch = (i / hw) % c;
            let xh = (v - mean[ch]) * inv_std[ch];
            xhat.push(xh);
            out.push(g[ch] * xh + b[ch]);
        }
        let unbias = if m > 1.0 { m / (m - 1.0) } else { 1.0 };
        for ch in 0..c {
            stats.mean[ch] = (1.0 - BN_MOMENTUM) * stats.mean[ch] + BN_MOMENTUM * mean[ch];
            stats.var[ch] = (1.0 - BN_MOMENTUM) * stats.var[ch] + BN_MOMENTUM * var[ch] * unbias;
        }
        stats.batches += 1;
        let op = Op::Norm { x: x.0, gamma: gamma.0, beta: beta.0, kind: NormKind::Batch, xhat, inv_std };
        self.push(Tensor::new(&[n, c, h, w], out)?, op, &[x.0, gamma.0, beta.0])
    }

    /// Instance normalisation: statistics per `(sample, channel)` over `H × W`,
    /// identical in training and evaluation.
    pub fn instance_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let [n, c, h, w] = self.check_affine(x, gamma, beta)?;
        let hw = h * w;
        let src = self.data(x);
        let (g, b) = (self.data(gamma), self.data(beta));
        let mut inv_std = Vec::with_capacity(n * c);
        let mut xhat = Vec::with_capacity(src.len());
        let mut out = Vec::with_capacity(src.len());
        for (plane, vals) in src.chunks(hw).enumerate() {
            let ch = plane % c;
            let mu = vals.iter().sum::<f64>() / hw as f64;
            let var = vals.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / hw as f64;
            let is = 1.0 / libm::sqrt(var + NORM_EPS);
            inv_std.push(is);
            for v in vals {
                let xh = (v - mu) * is;
                xhat.push(xh);
                out.push(g[ch] * xh + b[ch]);
            }
        }
        let op = Op::Norm { x: x.0, gamma: gamma.0, beta: beta.0, kind: NormKind::Instance, xhat, inv_std };
        self.push(Tensor::new(&[n, c, h, w], out)?, op, &[x.0, gamma.0, beta.0])
    }

    // ----------------------------------------------------------------------
    // Loss
    // ----------------------------------------------------------------------

    /// Mean cross-entropy of `N × K` logits against targets smoothed to
    /// `(1 − ε)·onehot + ε/K`.
    pub fn label_smoothed_ce(&mut self, logits: Var, labels: &[usize], epsilon: f64) -> Result<Var> {
        let &[n, k] = self.shape(logits) else {
            return Err(shape_err!("cross-entropy expects N×K logits, got {:?}", self.shape(logits)));
        };
        if k < 2 {
            return Err(Error::Config(format!("cross-entropy needs at least 2 classes, got {k}")));
        }
        if !(0.0..1.0).contains(&epsilon) {
            return Err(Error::Config(format!("label smoothing {epsilon} outside [0, 1)")));
        }
        if labels.len() != n {
            return Err(shape_err!("{} labels for {n} rows", labels.len()));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
            return Err(Error::Contract(format!("label {bad} outside [0, {k})")));
        }
        let src = self.data(logits);
        let mut loss = 0.0;
        let mut dlogits = Vec::with_capacity(n * k);
        for (row, &label) in src.chunks(k).zip(labels) {
            let mx = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = mx + libm::log(row.iter().map(|v| libm::exp(v - mx)).sum::<f64>());
            for (j, &z) in row.iter().enumerate() {
                let q = if j == label { 1.0 - epsilon + epsilon / k as f64 } else { epsilon / k as f64 };
                loss -= q * (z - lse);
                dlogits.push((libm::exp(z - lse) - q) / n as f64);
            }
        }
        let op = Op::SmoothedCe { logits: logits.0, dlogits };
        self.push(Tensor::scalar(loss / n as f64), op, &[logits.0])
    }

    // ----------------------------------------------------------------------
    // Backward
    // ----------------------------------------------------------------------

    /// Back-propagates from a scalar loss, accumulating into leaf gradients.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.nodes.is_empty() {
            return Err(Error::Contract("backward on an empty tape".into()));
        }
        if self.value(loss).len() != 1 {
            return Err(Error::Contract(format!("backward needs a scalar loss, got shape {:?}", self.shape(loss))));
        }
        let mut grads: Vec<Option<Vec<f64>>> = Vec::new();
        grads.resize_with(loss.0 + 1, || None);
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !self.nodes[i].requires_grad {
                continue;
            }
            self.propagate(i, &g, &mut grads);
            let node = &mut self.nodes[i];
            if matches!(node.op, Op::Leaf) {
                match &mut node.grad {
                    Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
                    None => node.grad = Some(g),
                }
            } else if node.retain {
                node.grad = Some(g);
            }
        }
        Ok(())
    }

    fn wants(&self, i: usize) -> bool {
        self.nodes[i].requires_grad
    }

    fn propagate(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let mut acc = |idx: usize, contrib: Vec<f64>| match &mut grads[idx] {
            Some(e) => e.iter_mut().zip(&contrib).for_each(|(a, b)| *a += b),
            slot @ None => *slot = Some(contrib),
        };
        let node = &self.nodes[i];
        match &node.op {
            Op::Leaf => {}
            Op::Conv { x, w, geom } => {
                if self.wants(*x) {
                    acc(*x, conv_backward_input(g, self.nodes[*w].value.data(), geom));
                }
                if self.wants(*w) {
                    let len = self.nodes[*w].value.len();
                    acc(*w, conv_backward_weight(g, self.nodes[*x].value.data(), geom, len));
                }
            }
            Op::Add { a, b, bc } => {
                let (ga, gb) = split_broadcast(g, *bc, |_, _| 1.0, |_, _| 1.0, self.nodes[*a].value.len(), self.nodes[*b].value.len());
                if self.wants(*a) {
                    acc(*a, ga);
                }
                if self.wants(*b) {
                    acc(*b, gb);
                }
            }
            Op::Sub { a, b } => {
                if self.wants(*a) {
                    acc(*a, g.to_vec());
                }
                if self.wants(*b) {
                    acc(*b, g.iter().map(|v| -v).collect());
                }
            }
            Op::Mul { a, b, bc } => {
                let (da, db) = (self.nodes[*a].value.data(), self.nodes[*b].value.data());
                let (ga, gb) = split_broadcast(g, *bc, |_, ib| db[ib], |ia, _| da[ia], da.len(), db.len());
                if self.wants(*a) {
                    acc(*a, ga);
                }
                if self.wants(*b) {
                    acc(*b, gb);
                }
            }
            Op::Scale { x, s } => acc(*x, g.iter().map(|v| v * s).collect()),
            Op::Shift { x } | Op::Reshape { x } => acc(*x, g.to_vec()),
            Op::Relu { x } => {
                let xd = self.nodes[*x].value.data();
                acc(*x, g.iter().zip(xd).map(|(gv, &v)| if v > 0.0 { *gv } else { 0.0 }).collect());
            }
            Op::Sigmoid { x } => {
                let y = node.value.data();
                acc(*x, g.iter().zip(y).map(|(gv, yv)| gv * yv * (1.0 - yv)).collect());
            }
            Op::Sum { x } => acc(*x, vec![g[0]; self.nodes[*x].value.len()]),
            Op::Softmax { x } => {
                let y = node.value.data();
                let k = *node.value.shape().last().unwrap_or(&1);
                let mut dx = Vec::with_capacity(y.len());
                for (yr, gr) in y.chunks(k).zip(g.chunks(k)) {
                    let s = dot(yr, gr);
                    dx.extend(yr.iter().zip(gr).map(|(yv, gv)| yv * (gv - s)));
                }
                acc(*x, dx);
            }
            Op::WeightedSum { xs, w } => {
                let wd = self.nodes[*w].value.data();
                for (j, &x) in xs.iter().enumerate() {
                    if self.wants(x) {
                        acc(x, g.iter().map(|v| v * wd[j]).collect());
                    }
                }
                if self.wants(*w) {
                    acc(*w, xs.iter().map(|&x| dot(g, self.nodes[x].value.data())).collect());
                }
            }
            Op::GlobalAvgPool { x } => {
                let hw = self.nodes[*x].value.len() / g.len();
                acc(*x, g.iter().flat_map(|v| core::iter::repeat_n(v / hw as f64, hw)).collect());
            }
            Op::MaxPool { x, argmax } => {
                let mut dx = vec![0.0; self.nodes[*x].value.len()];
                for (gv, &at) in g.iter().zip(argmax) {
                    if at != usize::MAX {
                        dx[at] += gv;
                    }
                }
                acc(*x, dx);
            }
            Op::AvgPool { x, k, stride } => {
                let [n, c, h, w] = dims4(self.nodes[*x].value.shape()).expect("rank 4");
                let [_, _, oh, ow] = dims4(node.value.shape()).expect("rank 4");
                let norm = (k * k) as f64;
                let mut dx = vec![0.0; n * c * h * w];
                for plane in 0..n * c {
                    for oy in 0..oh {
                        for ox in 0..ow {
                            let gv = g[(plane * oh + oy) * ow + ox] / norm;
                            for ky in 0..*k {
                                let row = plane * h * w + (oy * stride + ky) * w + ox * stride;
                                dx[row..row + k].iter_mut().for_each(|d| *d += gv);
                            }
                        }
                    }
                }
                acc(*x, dx);
            }
            Op::Linear { x, w, b } => {
                let (xd, wd) = (self.nodes[*x].value.data(), self.nodes[*w].value.data());
                let &[d_out, d] = self.nodes[*w].value.shape() else { unreachable!() };
                if self.wants(*x) {
                    let mut dx = vec![0.0; xd.len()];
                    for (dxr, gr) in dx.chunks_mut(d).zip(g.chunks(d_out)) {
                        for (j, gv) in gr.iter().enumerate() {
                            axpy(dxr, *gv, &wd[j * d..(j + 1) * d]);
                        }
                    }
                    acc(*x, dx);
                }
                if self.wants(*w) {
                    let mut dw = vec![0.0; wd.len()];
                    for (xr, gr) in xd.chunks(d).zip(g.chunks(d_out)) {
                        for (j, gv) in gr.iter().enumerate() {
                            axpy(&mut dw[j * d..(j + 1) * d], *gv, xr);
                        }
                    }
                    acc(*w, dw);
                }
                if let Some(b) = b {
                    if self.wants(*b) {
                        let mut db = vec![0.0; d_out];
                        for gr in g.chunks(d_out) {
                            db.iter_mut().zip(gr).for_each(|(a, v)| *a += v);
                        }
                        acc(*b, db);
                    }
                }
            }
            Op::Norm { x, gamma, beta, kind, xhat, inv_std } => {
                let [n, c, h, w] = dims4(node.value.shape()).expect("rank 4");
                let hw = h * w;
                let gm = self.nodes[*gamma].value.data();
                let mut dgamma = vec![0.0; c];
                let mut dbeta = vec![0.0; c];
                for (i, gv) in g.iter().enumerate() {
                    let ch = (i / hw) % c;
                    dgamma[ch] += gv * xhat[i];
                    dbeta[ch] += gv;
                }
                if self.wants(*x) {
                    let mut dx = vec![0.0; g.len()];
                    match kind {
                        NormKind::Instance => {
                            for plane in 0..n * c {
                                let ch = plane % c;
                                let r = plane * hw..(plane + 1) * hw;
                                let (sg, sgx) = group_sums(&g[r.clone()], &xhat[r.clone()]);
                                let scale = gm[ch] * inv_std[plane] / hw as f64;
                                for j in r {
                                    dx[j] = scale * (hw as f64 * g[j] - sg - xhat[j] * sgx);
                                }
                            }
                        }
                        NormKind::Batch => {
                            let m = (n * hw) as f64;
                            for ch in 0..c {
                                let (mut sg, mut sgx) = (0.0, 0.0);
                                for s in 0..n {
                                    let r = (s * c + ch) * hw..(s * c + ch + 1) * hw;
                                    let (a, b) = group_sums(&g[r.clone()], &xhat[r]);
                                    sg += a;
                                    sgx += b;
                                }
                                let scale = gm[ch] * inv_std[ch] / m;
                                for s in 0..n {
                                    for j in (s * c + ch) * hw..(s * c + ch + 1) * hw {
                                        dx[j] = scale * (m * g[j] - sg - xhat[j] * sgx);
                                    }
                                }
                            }
                        }
                    }
                    acc(*x, dx);
                }
                if self.wants(*gamma) {
                    acc(*gamma, dgamma);
                }
                if self.wants(*beta) {
                    acc(*beta, dbeta);
                }
            }
            Op::NormFixed { x, gamma, beta, mean, inv_std } => {
                let [_, c, h, w] = dims4(node.value.shape()).expect("rank 4");
                let hw = h * w;
                let gm = self.nodes[*gamma].value.data();
                let xd = self.nodes[*x].value.data();
                let mut dgamma = vec![0.0; c];
                let mut dbeta = vec![0.0; c];
                let mut dx = Vec::with_capacity(g.len());
                for (i, gv) in g.iter().enumerate() {
                    let ch = (i / hw) % c;
                    dgamma[ch] += gv * (xd[i] - mean[ch]) * inv_std[ch];
                    dbeta[ch] += gv;
                    dx.push(gv * gm[ch] * inv_std[ch]);
                }
                if self.wants(*x) {
                    acc(*x, dx);
                }
                if self.wants(*gamma) {
                    acc(*gamma, dgamma);
                }
                if self.wants(*beta) {
                    acc(*beta, dbeta);
                }
            }
            Op::SmoothedCe { logits, dlogits } => acc(*logits, dlogits.iter().map(|v| v * g[0]).collect()),
        }
    }
}

fn group_sums(g: &[f64], xhat: &[f64]) -> (f64, f64) {
    (g.iter().sum(), dot(g, xhat))
}

/// Splits an upstream gradient into operand gradients under broadcasting.
/// `da(ia, ib)` / `db(ia, ib)` give the local partials at aligned indices.
fn split_broadcast(
    g: &[f64],
    bc: Bcast,
    da: impl Fn(usize, usize) -> f64,
    db: impl Fn(usize, usize) -> f64,
    len_a: usize,
    len_b: usize,
) -> (Vec<f64>, Vec<f64>) {
    let mut ga = vec![0.0; len_a];
    let mut gb = vec![0.0; len_b];
    for (i, gv) in g.iter().enumerate() {
        let (ia, ib) = match bc {
            Bcast::Same => (i, i),
            Bcast::Right(hw) => (i, i / hw),
            Bcast::Left(hw) => (i / hw, i),
        };
        ga[ia] += gv * da(ia, ib);
        gb[ib] += gv * db(ia, ib);
    }
    (ga, gb)
}

pub fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + libm::exp(-v))
    } else {
        let e = libm::exp(v);
        e / (1.0 + e)
    }
}

pub fn softmax_in_place(row: &mut [f64]) {
    let mx = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for v in row.iter_mut() {
        *v = libm::exp(*v - mx);
        total += *v;
    }
    for v in row.iter_mut() {
        *v /= total;
    }
}

fn op_name(op: &Op) -> &'static str {
    match op {
        Op::Leaf => "leaf",
        Op::Conv { geom, .. } if geom.depthwise => "depthwise_conv2d",
        Op::Conv { .. } => "conv2d",
        Op::Add { .. } => "add",
        Op::Sub { .. } => "sub",
        Op::Mul { .. } => "mul",
        Op::Scale { .. } => "scale",
        Op::Shift { .. } => "shift",
        Op::Relu { .. } => "relu",
        Op::Sigmoid { .. } => "sigmoid",
        Op::GlobalAvgPool { .. } => "global_avg_pool",
        Op::MaxPool { .. } => "max_pool",
        Op::AvgPool { .. } => "avg_pool",
        Op::Linear { .. } => "linear",
        Op::Norm { kind: NormKind::Batch, .. } | Op::NormFixed { .. } => "batch_norm",
        Op::Norm { .. } => "instance_norm",
        Op::Reshape { .. } => "reshape",
        Op::Sum { .. } => "sum",
        Op::Softmax { .. } => "softmax",
        Op::WeightedSum { .. } => "weighted_sum",
        Op::SmoothedCe { .. } => "label_smoothed_ce",
    }
}
