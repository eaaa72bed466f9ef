use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::kernels::{col2im, im2col, ConvGeom};
use super::{Real, Tensor};
use crate::error::{Error, Result};

/// Negative-side slope of the leaky ReLU used throughout the networks.
pub const LEAKY_SLOPE: f64 = 0.2;

const NORM_EPS: f64 = 1e-5;

/// Primitive identifiers, used for reporting and fault injection.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Primitive {
    Leaf,
    Conv2d,
    ConvTranspose2d,
    LeakyRelu,
    Relu,
    Sigmoid,
    Tanh,
    Dropout,
    Concat,
    Add,
    Sub,
    Mul,
    Scale,
    Mean,
    Sum,
    Abs,
    InstanceNorm,
    BceWithLogits,
    L1,
    SelectChannel,
    MatMul,
}

impl Primitive {
    pub fn name(self) -> &'static str {
        match self {
            Primitive::Leaf => "leaf",
            Primitive::Conv2d => "conv2d",
            Primitive::ConvTranspose2d => "conv_transpose2d",
            Primitive::LeakyRelu => "leaky_relu",
            Primitive::Relu => "relu",
            Primitive::Sigmoid => "sigmoid",
            Primitive::Tanh => "tanh",
            Primitive::Dropout => "dropout",
            Primitive::Concat => "concat",
            Primitive::Add => "add",
            Primitive::Sub => "sub",
            Primitive::Mul => "mul",
            Primitive::Scale => "scale",
            Primitive::Mean => "mean",
            Primitive::Sum => "sum",
            Primitive::Abs => "abs",
            Primitive::InstanceNorm => "instance_norm",
            Primitive::BceWithLogits => "bce_with_logits",
            Primitive::L1 => "l1",
            Primitive::SelectChannel => "select_channel",
            Primitive::MatMul => "matmul",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        use Primitive::*;
        [
            Leaf, Conv2d, ConvTranspose2d, LeakyRelu, Relu, Sigmoid, Tanh, Dropout, Concat, Add, Sub, Mul, Scale, Mean,
            Sum, Abs, InstanceNorm, BceWithLogits, L1, SelectChannel, MatMul,
        ]
        .into_iter()
        .find(|p| p.name() == name)
    }
}

impl fmt::Display for Primitive {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Train mode samples dropout masks; eval mode makes dropout the identity.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Handle to a node of one [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

enum Op<T> {
    Leaf,
    Conv2d { stride: usize, pad: usize },
    ConvTranspose2d { stride: usize, pad: usize },
    LeakyRelu { slope: T },
    Relu,
    Sigmoid,
    Tanh,
    Dropout { mask: Vec<T> },
    Concat { channels: Vec<usize> },
    Add,
    Sub,
    Mul,
    Scale(T),
    Mean,
    Sum,
    Abs,
    InstanceNorm { inv_std: Vec<T> },
    BceWithLogits { target: T },
    L1,
    SelectChannel { channel: usize },
    MatMul,
}

impl<T> Op<T> {
    fn primitive(&self) -> Primitive {
        match self {
            Op::Leaf => Primitive::Leaf,
            Op::Conv2d { .. } => Primitive::Conv2d,
            Op::ConvTranspose2d { .. } => Primitive::ConvTranspose2d,
            Op::LeakyRelu { .. } => Primitive::LeakyRelu,
            Op::Relu => Primitive::Relu,
            Op::Sigmoid => Primitive::Sigmoid,
            Op::Tanh => Primitive::Tanh,
            Op::Dropout { .. } => Primitive::Dropout,
            Op::Concat { .. } => Primitive::Concat,
            Op::Add => Primitive::Add,
            Op::Sub => Primitive::Sub,
            Op::Mul => Primitive::Mul,
            Op::Scale(_) => Primitive::Scale,
            Op::Mean => Primitive::Mean,
            Op::Sum => Primitive::Sum,
            Op::Abs => Primitive::Abs,
            Op::InstanceNorm { .. } => Primitive::InstanceNorm,
            Op::BceWithLogits { .. } => Primitive::BceWithLogits,
            Op::L1 => Primitive::L1,
            Op::SelectChannel { .. } => Primitive::SelectChannel,
            Op::MatMul => Primitive::MatMul,
        }
    }
}

struct Node<T> {
    op: Op<T>,
    inputs: Vec<usize>,
    value: Tensor<T>,
    requires_grad: bool,
}

/// Gradients produced by [`Graph::backward`], indexed by [`Var`].
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Real> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }

    /// Gradient of `v`, or zeros of `shape` when nothing reached it.
    pub fn take_or_zeros(&mut self, v: Var, shape: &[usize]) -> Tensor<T> {
        self.take(v).unwrap_or_else(|| Tensor::zeros(shape))
    }
}

/// Tape of primitive applications.
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
    mode: Mode,
    rng: ChaCha8Rng,
    kink_trace: Option<Vec<i8>>,
    fault: Option<Primitive>,
}

impl<T: Real> Graph<T> {
    /// `seed` drives dropout masks in train mode.
    pub fn new(mode: Mode, seed: u64) -> Self {
        Graph { nodes: Vec::new(), mode, rng: ChaCha8Rng::seed_from_u64(seed), kink_trace: None, fault: None }
    }

    pub fn eval() -> Self {
        Self::new(Mode::Eval, 0)
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Record the sign of every ReLU / leaky-ReLU input evaluated from now on.
    pub fn enable_kink_trace(&mut self) {
        self.kink_trace = Some(Vec::new());
    }

    pub fn kink_trace(&self) -> Option<&[i8]> {
        self.kink_trace.as_deref()
    }

    /// Corrupt the backward rule of one primitive (scales its upstream
    /// gradient by 1.5). Only meant for exercising gradient checkers.
    pub fn inject_fault(&mut self, p: Primitive) {
        self.fault = Some(p);
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn node(&self, v: Var) -> Result<&Node<T>> {
        self.nodes
            .get(v.0)
            .ok_or_else(|| Error::State(format!("variable {} does not belong to this graph", v.0)))
    }

    fn shape(&self, v: Var) -> Result<&[usize]> {
        Ok(self.node(v)?.value.shape())
    }

    fn push(&mut self, op: Op<T>, inputs: &[Var], value: Tensor<T>) -> Result<Var> {
        if cfg!(debug_assertions) && !value.all_finite() {
            return Err(Error::Numeric(format!("non-finite output from {}", op.primitive())));
        }
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node { op, inputs: inputs.iter().map(|v| v.0).collect(), value, requires_grad });
        Ok(Var(self.nodes.len() - 1))
    }

    pub fn leaf(&mut self, t: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node { op: Op::Leaf, inputs: Vec::new(), value: t, requires_grad });
        Var(self.nodes.len() - 1)
    }

    /// Trainable leaf.
    pub fn param(&mut self, t: Tensor<T>) -> Var {
        self.leaf(t, true)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.leaf(t, false)
    }

    // ---- convolutions -------------------------------------------------

    /// 2-D convolution. `x: [N,C,H,W]`, `w: [Co,C,k,k]`, `b: [Co]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Result<Var> {
        let (n, c, h, wd) = dims4(self.shape(x)?)?;
        let (co, ci, k, k2) = dims4(self.shape(w)?)?;
        if ci != c || k != k2 || stride == 0 {
            return Err(Error::Shape(format!(
                "conv2d input {:?} incompatible with weight {:?}",
                self.shape(x)?,
                self.shape(w)?
            )));
        }
        let geom = ConvGeom::forward(c, h, wd, k, stride, pad)
            .ok_or_else(|| Error::Shape(format!("kernel {k} larger than padded input {h}x{wd}")))?;
        self.check_bias(b, co)?;
        let plane = geom.oh * geom.ow;
        let mut out = Tensor::zeros(&[n, co, geom.oh, geom.ow]);
        let mut cols = vec![T::zero(); geom.col_rows() * plane];
        {
            let xv = self.value(x).data();
            let wv = self.value(w).data();
            let od = out.data_mut();
            for s in 0..n {
                im2col(&xv[s * c * h * wd..(s + 1) * c * h * wd], &geom, &mut cols);
                T::gemm(false, false, co, plane, geom.col_rows(), T::one(), wv, &cols, T::zero(), &mut od[s * co * plane..(s + 1) * co * plane]);
            }
            if let Some(b) = b {
                add_channel_bias(od, self.value(b).data(), n, co, plane);
            }
        }
        let inputs: Vec<Var> = [x, w].into_iter().chain(b).collect();
        self.push(Op::Conv2d { stride, pad }, &inputs, out)
    }

    /// Transposed convolution. `x: [N,Ci,H,W]`, `w: [Ci,Co,k,k]`, `b: [Co]`;
    /// output extent `(H-1)·stride − 2·pad + k`.
    pub fn conv_transpose2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Result<Var> {
        let (n, ci, h, wd) = dims4(self.shape(x)?)?;
        let (wci, co, k, k2) = dims4(self.shape(w)?)?;
        if wci != ci || k != k2 || stride == 0 {
            return Err(Error::Shape(format!(
                "conv_transpose2d input {:?} incompatible with weight {:?}",
                self.shape(x)?,
                self.shape(w)?
            )));
        }
        let oh = ((h - 1) * stride + k).checked_sub(2 * pad);
        let ow = ((wd - 1) * stride + k).checked_sub(2 * pad);
        let geom = match (oh, ow) {
            (Some(oh), Some(ow)) if oh > 0 && ow > 0 => ConvGeom::forward(co, oh, ow, k, stride, pad),
            _ => None,
        }
        .filter(|g| g.oh == h && g.ow == wd)
        .ok_or_else(|| Error::Shape(format!("invalid transposed conv geometry for {h}x{wd}")))?;
        self.check_bias(b, co)?;
        let in_plane = h * wd;
        let out_plane = geom.h * geom.w;
        let mut out = Tensor::zeros(&[n, co, geom.h, geom.w]);
        let mut cols = vec![T::zero(); geom.col_rows() * in_plane];
        {
            let xv = self.value(x).data();
            let wv = self.value(w).data();
            let od = out.data_mut();
            for s in 0..n {
                T::gemm(true, false, geom.col_rows(), in_plane, ci, T::one(), wv, &xv[s * ci * in_plane..(s + 1) * ci * in_plane], T::zero(), &mut cols);
                col2im(&cols, &geom, &mut od[s * co * out_plane..(s + 1) * co * out_plane]);
            }
            if let Some(b) = b {
                add_channel_bias(od, self.value(b).data(), n, co, out_plane);
            }
        }
        let inputs: Vec<Var> = [x, w].into_iter().chain(b).collect();
        self.push(Op::ConvTranspose2d { stride, pad }, &inputs, out)
    }

    fn check_bias(&self, b: Option<Var>, co: usize) -> Result<()> {
        if let Some(b) = b {
            if self.shape(b)? != [co] {
                return Err(Error::Shape(format!("bias {:?} for {co} output channels", self.shape(b)?)));
            }
        }
        Ok(())
    }

    // ---- pointwise ----------------------------------------------------

    fn trace_signs(&mut self, x: Var) {
        if let Some(trace) = self.kink_trace.as_mut() {
            trace.extend(self.nodes[x.0].value.data().iter().map(|&v| sign(v).to_i8().unwrap_or(0)));
        }
    }

    pub fn leaky_relu(&mut self, x: Var) -> Result<Var> {
        self.node(x)?;
        self.trace_signs(x);
        let slope = T::lit(LEAKY_SLOPE);
        let out = self.value(x).map(|v| if v > T::zero() { v } else { v * slope });
        self.push(Op::LeakyRelu { slope }, &[x], out)
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.node(x)?;
        self.trace_signs(x);
        let out = self.value(x).map(|v| if v > T::zero() { v } else { T::zero() });
        self.push(Op::Relu, &[x], out)
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        let out = self.node(x)?.value.map(sigmoid);
        self.push(Op::Sigmoid, &[x], out)
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var> {
        let out = self.node(x)?.value.map(T::tanh);
        self.push(Op::Tanh, &[x], out)
    }

    pub fn abs(&mut self, x: Var) -> Result<Var> {
        self.node(x)?;
        self.trace_signs(x);
        let out = self.node(x)?.value.map(T::abs);
        self.push(Op::Abs, &[x], out)
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var> {
        let c = T::lit(c);
        let out = self.node(x)?.value.map(|v| v * c);
        self.push(Op::Scale(c), &[x], out)
    }

    /// Inverted dropout: in train mode each element is zeroed with
    /// probability `p` and survivors are scaled by `1/(1−p)`.
    pub fn dropout(&mut self, x: Var, p: f64) -> Result<Var> {
        if !(0.0..1.0).contains(&p) {
            return Err(Error::Config(format!("dropout p must be in [0,1), got {p}")));
        }
        let n = self.node(x)?.value.numel();
        let mask: Vec<T> = if self.mode == Mode::Eval || p == 0.0 {
            vec![T::one(); n]
        } else {
            let keep = T::lit(1.0 / (1.0 - p));
            (0..n).map(|_| if self.rng.gen::<f64>() < p { T::zero() } else { keep }).collect()
        };
        let xv = self.value(x);
        let data = xv.data().iter().zip(&mask).map(|(&a, &m)| a * m).collect();
        let out = Tensor::new(xv.shape(), data)?;
        self.push(Op::Dropout { mask }, &[x], out)
    }

    fn binary(&mut self, a: Var, b: Var, op: Op<T>, f: impl Fn(T, T) -> T) -> Result<Var> {
        let (sa, sb) = (self.shape(a)?, self.shape(b)?);
        if sa != sb {
            return Err(Error::Shape(format!("{} operands {sa:?} vs {sb:?}", op.primitive())));
        }
        let av = self.value(a);
        let data = av.data().iter().zip(self.value(b).data()).map(|(&x, &y)| f(x, y)).collect();
        let out = Tensor::new(av.shape(), data)?;
        self.push(op, &[a, b], out)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Op::Add, |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Op::Sub, |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Op::Mul, |x, y| x * y)
    }

    // ---- shape ---------------------------------------------------------

    /// Concatenate `[N,Ci,H,W]` tensors along the channel axis.
    pub fn concat(&mut self, xs: &[Var]) -> Result<Var> {
        let first = *xs.first().ok_or_else(|| Error::Shape("concat of nothing".into()))?;
        let (n, _, h, w) = dims4(self.shape(first)?)?;
        let mut channels = Vec::with_capacity(xs.len());
        for &x in xs {
            let (xn, xc, xh, xw) = dims4(self.shape(x)?)?;
            if (xn, xh, xw) != (n, h, w) {
                return Err(Error::Shape(format!("concat {:?} with {:?}", self.shape(first)?, self.shape(x)?)));
            }
            channels.push(xc);
        }
        let total: usize = channels.iter().sum();
        let plane = h * w;
        let mut data = Vec::with_capacity(n * total * plane);
        for s in 0..n {
            for (&x, &c) in xs.iter().zip(&channels) {
                data.extend_from_slice(&self.value(x).data()[s * c * plane..(s + 1) * c * plane]);
            }
        }
        let out = Tensor::new(&[n, total, h, w], data)?;
        self.push(Op::Concat { channels }, xs, out)
    }

    /// Channel `c` of `[N,C,H,W]` as `[N,1,H,W]`.
    pub fn select_channel(&mut self, x: Var, channel: usize) -> Result<Var> {
        let (n, c, h, w) = dims4(self.shape(x)?)?;
        if channel >= c {
            return Err(Error::Shape(format!("channel {channel} out of {c}")));
        }
        let plane = h * w;
        let xv = self.value(x).data();
        let mut data = Vec::with_capacity(n * plane);
        for s in 0..n {
            let off = (s * c + channel) * plane;
            data.extend_from_slice(&xv[off..off + plane]);
        }
        let out = Tensor::new(&[n, 1, h, w], data)?;
        self.push(Op::SelectChannel { channel }, &[x], out)
    }

    /// `[m,k] × [k,n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a)?.to_vec(), self.shape(b)?.to_vec());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::Shape(format!("matmul {sa:?} x {sb:?}")));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = Tensor::zeros(&[m, n]);
        T::gemm(false, false, m, n, k, T::one(), self.value(a).data(), self.value(b).data(), T::zero(), out.data_mut());
        self.push(Op::MatMul, &[a, b], out)
    }

    // ---- normalization and reductions -----------------------------------

    /// Per-sample, per-channel normalization over the spatial plane
    /// (no affine parameters).
    pub fn instance_norm(&mut self, x: Var) -> Result<Var> {
        let (n, c, h, w) = dims4(self.shape(x)?)?;
        let plane = h * w;
        let inv_plane = T::lit(1.0 / plane as f64);
        let eps = T::lit(NORM_EPS);
        let xv = self.value(x).data();
        let mut out = Vec::with_capacity(xv.len());
        let mut inv_std = Vec::with_capacity(n * c);
        for chunk in xv.chunks_exact(plane) {
            let mean = chunk.iter().copied().sum::<T>() * inv_plane;
            let var = chunk.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() * inv_plane;
            let is = T::one() / (var + eps).sqrt();
            inv_std.push(is);
            out.extend(chunk.iter().map(|&v| (v - mean) * is));
        }
        let out = Tensor::new(&[n, c, h, w], out)?;
        self.push(Op::InstanceNorm { inv_std }, &[x], out)
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.node(x)?.value.data().iter().copied().sum();
        self.push(Op::Sum, &[x], Tensor::scalar(s))
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let xv = &self.node(x)?.value;
        let s = xv.data().iter().copied().sum::<T>() / T::lit(xv.numel() as f64);
        self.push(Op::Mean, &[x], Tensor::scalar(s))
    }

    /// Mean binary cross-entropy of `sigmoid(logits)` against a constant target.
    pub fn bce_with_logits(&mut self, logits: Var, target: f64) -> Result<Var> {
        let t = T::lit(target);
        let xv = &self.node(logits)?.value;
        let n = T::lit(xv.numel() as f64);
        let total: T = xv
            .data()
            .iter()
            .map(|&x| x.max(T::zero()) - x * t + (-x.abs()).exp().ln_1p())
            .sum();
        self.push(Op::BceWithLogits { target: t }, &[logits], Tensor::scalar(total / n))
    }

    /// `mean |a − b|`.
    pub fn l1(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a)?, self.shape(b)?);
        if sa != sb {
            return Err(Error::Shape(format!("l1 operands {sa:?} vs {sb:?}")));
        }
        if let Some(trace) = self.kink_trace.as_mut() {
            let (av, bv) = (self.nodes[a.0].value.data(), self.nodes[b.0].value.data());
            trace.extend(av.iter().zip(bv).map(|(&x, &y)| sign(x - y).to_i8().unwrap_or(0)));
        }
        let av = self.value(a);
        let n = T::lit(av.numel() as f64);
        let total: T = av.data().iter().zip(self.value(b).data()).map(|(&x, &y)| (x - y).abs()).sum();
        self.push(Op::L1, &[a, b], Tensor::scalar(total / n))
    }

    // ---- backward -------------------------------------------------------

    /// Reverse sweep from a scalar `loss`. Gradients are summed over every
    /// use of a node; only nodes that depend on a `requires_grad` leaf get one.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let root = self.node(loss)?;
        if root.value.numel() != 1 {
            return Err(Error::Shape(format!("backward needs a scalar loss, got shape {:?}", root.value.shape())));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(root.value.shape(), T::one()));

        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(gout) = grads[i].as_ref() else { continue };
            let scaled;
            let gout = if self.fault == Some(node.op.primitive()) {
                scaled = gout.map(|v| v * T::lit(1.5));
                &scaled
            } else {
                gout
            };
            let contributions = self.node_backward(node, gout)?;
            for (slot, g) in node.inputs.iter().zip(contributions) {
                if let Some(g) = g {
                    match grads[*slot].as_mut() {
                        Some(acc) => acc.add_assign(&g),
                        None => grads[*slot] = Some(g),
                    }
                }
            }
        }
        Ok(Gradients { grads })
    }

    fn wants(&self, idx: usize) -> bool {
        self.nodes[idx].requires_grad
    }

    fn node_backward(&self, node: &Node<T>, gout: &Tensor<T>) -> Result<Vec<Option<Tensor<T>>>> {
        let input = |k: usize| &self.nodes[node.inputs[k]].value;
        let wants = |k: usize| self.wants(node.inputs[k]);
        let g = gout.data();
        let pointwise = |f: &dyn Fn(usize) -> T| Tensor::from_fn(input(0).shape(), f);

        let out = match &node.op {
            Op::Leaf => Vec::new(),
            Op::Conv2d { stride, pad } => self.conv2d_backward(node, gout, *stride, *pad)?,
            Op::ConvTranspose2d { stride, pad } => self.conv_transpose2d_backward(node, gout, *stride, *pad)?,
            Op::LeakyRelu { slope } => {
                let x = input(0).data();
                vec![Some(pointwise(&|i| if x[i] > T::zero() { g[i] } else { g[i] * *slope }))]
            }
            Op::Relu => {
                let x = input(0).data();
                vec![Some(pointwise(&|i| if x[i] > T::zero() { g[i] } else { T::zero() }))]
            }
            Op::Sigmoid => {
                let y = node.value.data();
                vec![Some(pointwise(&|i| g[i] * y[i] * (T::one() - y[i])))]
            }
            Op::Tanh => {
                let y = node.value.data();
                vec![Some(pointwise(&|i| g[i] * (T::one() - y[i] * y[i])))]
            }
            Op::Abs => {
                let x = input(0).data();
                vec![Some(pointwise(&|i| g[i] * sign(x[i])))]
            }
            Op::Scale(c) => vec![Some(pointwise(&|i| g[i] * *c))],
            Op::Dropout { mask } => vec![Some(pointwise(&|i| g[i] * mask[i]))],
            Op::Add => vec![wants(0).then(|| gout.clone()), wants(1).then(|| gout.clone())],
            Op::Sub => vec![wants(0).then(|| gout.clone()), wants(1).then(|| gout.map(|v| -v))],
            Op::Mul => {
                let (a, b) = (input(0).data(), input(1).data());
                vec![
                    wants(0).then(|| pointwise(&|i| g[i] * b[i])),
                    wants(1).then(|| pointwise(&|i| g[i] * a[i])),
                ]
            }
            Op::Concat { channels } => {
                let shape = node.value.shape();
                let (n, total, plane) = (shape[0], shape[1], shape[2] * shape[3]);
                let mut offset = 0;
                let mut res = Vec::with_capacity(channels.len());
                for (k, &c) in channels.iter().enumerate() {
                    if wants(k) {
                        let mut d = Vec::with_capacity(n * c * plane);
                        for s in 0..n {
                            let start = (s * total + offset) * plane;
                            d.extend_from_slice(&g[start..start + c * plane]);
                        }
                        res.push(Some(Tensor::new(input(k).shape(), d)?));
                    } else {
                        res.push(None);
                    }
                    offset += c;
                }
                res
            }
            Op::SelectChannel { channel } => {
                let (n, c, h, w) = dims4(input(0).shape())?;
                let plane = h * w;
                let mut d = Tensor::zeros(input(0).shape());
                for s in 0..n {
                    let off = (s * c + channel) * plane;
                    d.data_mut()[off..off + plane].copy_from_slice(&g[s * plane..(s + 1) * plane]);
                }
                vec![Some(d)]
            }
            Op::MatMul => {
                let (a, b) = (input(0), input(1));
                let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
                let da = wants(0).then(|| {
                    let mut d = Tensor::zeros(a.shape());
                    T::gemm(false, true, m, k, n, T::one(), g, b.data(), T::zero(), d.data_mut());
                    d
                });
                let db = wants(1).then(|| {
                    let mut d = Tensor::zeros(b.shape());
                    T::gemm(true, false, k, n, m, T::one(), a.data(), g, T::zero(), d.data_mut());
                    d
                });
                vec![da, db]
            }
            Op::InstanceNorm { inv_std } => {
                let y = node.value.data();
                let plane = {
                    let s = node.value.shape();
                    s[2] * s[3]
                };
                let inv_plane = T::lit(1.0 / plane as f64);
                let mut d = Vec::with_capacity(y.len());
                for (p, is) in inv_std.iter().enumerate() {
                    let ys = &y[p * plane..(p + 1) * plane];
                    let gs = &g[p * plane..(p + 1) * plane];
                    let mean_g = gs.iter().copied().sum::<T>() * inv_plane;
                    let mean_gy = gs.iter().zip(ys).map(|(&a, &b)| a * b).sum::<T>() * inv_plane;
                    d.extend(gs.iter().zip(ys).map(|(&gi, &yi)| *is * (gi - mean_g - yi * mean_gy)));
                }
                vec![Some(Tensor::new(input(0).shape(), d)?)]
            }
            Op::Sum => {
                let g0 = g[0];
                vec![Some(Tensor::full(input(0).shape(), g0))]
            }
            Op::Mean => {
                let x = input(0);
                let g0 = g[0] / T::lit(x.numel() as f64);
                vec![Some(Tensor::full(x.shape(), g0))]
            }
            Op::BceWithLogits { target } => {
                let x = input(0);
                let scale = g[0] / T::lit(x.numel() as f64);
                vec![Some(x.map(|v| (sigmoid(v) - *target) * scale))]
            }
            Op::L1 => {
                let (a, b) = (input(0).data(), input(1).data());
                let scale = g[0] / T::lit(a.len() as f64);
                let da = wants(0).then(|| pointwise(&|i| sign(a[i] - b[i]) * scale));
                let db = wants(1).then(|| pointwise(&|i| -sign(a[i] - b[i]) * scale));
                vec![da, db]
            }
        };
        Ok(out)
    }

    fn conv2d_backward(&self, node: &Node<T>, gout: &Tensor<T>, stride: usize, pad: usize) -> Result<Vec<Option<Tensor<T>>>> {
        let xv = &self.nodes[node.inputs[0]].value;
        let wv = &self.nodes[node.inputs[1]].value;
        let (n, c, h, wd) = dims4(xv.shape())?;
        let co = wv.shape()[0];
        let k = wv.shape()[2];
        let geom = ConvGeom::forward(c, h, wd, k, stride, pad).expect("validated in forward");
        let plane = geom.oh * geom.ow;
        let rows = geom.col_rows();
        let (want_x, want_w) = (self.wants(node.inputs[0]), self.wants(node.inputs[1]));
        let want_b = node.inputs.get(2).is_some_and(|&b| self.wants(b));

        let mut dx = want_x.then(|| Tensor::zeros(xv.shape()));
        let mut dw = want_w.then(|| Tensor::zeros(wv.shape()));
        let mut cols = vec![T::zero(); rows * plane];
        let g = gout.data();
        for s in 0..n {
            let gs = &g[s * co * plane..(s + 1) * co * plane];
            if let Some(dw) = dw.as_mut() {
                im2col(&xv.data()[s * c * h * wd..(s + 1) * c * h * wd], &geom, &mut cols);
                T::gemm(false, true, co, rows, plane, T::one(), gs, &cols, T::one(), dw.data_mut());
            }
            if let Some(dx) = dx.as_mut() {
                T::gemm(true, false, rows, plane, co, T::one(), wv.data(), gs, T::zero(), &mut cols);
                col2im(&cols, &geom, &mut dx.data_mut()[s * c * h * wd..(s + 1) * c * h * wd]);
            }
        }
        let db = want_b.then(|| channel_sums(g, n, co, plane));
        let mut res = vec![dx, dw];
        if node.inputs.len() == 3 {
            res.push(db);
        }
        Ok(res)
    }

    fn conv_transpose2d_backward(&self, node: &Node<T>, gout: &Tensor<T>, stride: usize, pad: usize) -> Result<Vec<Option<Tensor<T>>>> {
        let xv = &self.nodes[node.inputs[0]].value;
        let wv = &self.nodes[node.inputs[1]].value;
        let (n, ci, h, wd) = dims4(xv.shape())?;
        let (_, co, oh, ow) = dims4(node.value.shape())?;
        let k = wv.shape()[2];
        let geom = ConvGeom::forward(co, oh, ow, k, stride, pad).expect("validated in forward");
        let in_plane = h * wd;
        let out_plane = oh * ow;
        let rows = geom.col_rows();
        let (want_x, want_w) = (self.wants(node.inputs[0]), self.wants(node.inputs[1]));
        let want_b = node.inputs.get(2).is_some_and(|&b| self.wants(b));

        let mut dx = want_x.then(|| Tensor::zeros(xv.shape()));
        let mut dw = want_w.then(|| Tensor::zeros(wv.shape()));
        let mut cols = vec![T::zero(); rows * in_plane];
        let g = gout.data();
        if want_x || want_w {
            for s in 0..n {
                im2col(&g[s * co * out_plane..(s + 1) * co * out_plane], &geom, &mut cols);
                if let Some(dx) = dx.as_mut() {
                    T::gemm(false, false, ci, in_plane, rows, T::one(), wv.data(), &cols, T::zero(), &mut dx.data_mut()[s * ci * in_plane..(s + 1) * ci * in_plane]);
                }
                if let Some(dw) = dw.as_mut() {
                    T::gemm(false, true, ci, rows, in_plane, T::one(), &xv.data()[s * ci * in_plane..(s + 1) * ci * in_plane], &cols, T::one(), dw.data_mut());
                }
            }
        }
        let db = want_b.then(|| channel_sums(g, n, co, out_plane));
        let mut res = vec![dx, dw];
        if node.inputs.len() == 3 {
            res.push(db);
        }
        Ok(res)
    }
}

fn dims4(shape: &[usize]) -> Result<(usize, usize, usize, usize)> {
    match *shape {
        [n, c, h, w] => Ok((n, c, h, w)),
        _ => Err(Error::Shape(format!("expected a 4-D tensor, got {shape:?}"))),
    }
}

fn sigmoid<T: Real>(v: T) -> T {
    if v >= T::zero() {
        T::one() / (T::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (T::one() + e)
    }
}

fn sign<T: Real>(v: T) -> T {
    if v > T::zero() {
        T::one()
    } else if v < T::zero() {
        -T::one()
    } else {
        T::zero()
    }
}

fn add_channel_bias<T: Real>(out: &mut [T], bias: &[T], n: usize, co: usize, plane: usize) {
    for s in 0..n {
        for (c, &b) in bias.iter().enumerate().take(co) {
            let off = (s * co + c) * plane;
            for v in &mut out[off..off + plane] {
                *v += b;
            }
        }
    }
}

fn channel_sums<T: Real>(g: &[T], n: usize, co: usize, plane: usize) -> Tensor<T> {
    let mut d = Tensor::zeros(&[co]);
    for s in 0..n {
        for c in 0..co {
            let off = (s * co + c) * plane;
            d.data_mut()[c] += g[off..off + plane].iter().copied().sum::<T>();
        }
    }
    d
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], v: &[f64]) -> Tensor<f64> {
        Tensor::new(shape, v.to_vec()).unwrap()
    }

    #[test]
    fn pointwise_examples() {
        let mut g = Graph::<f64>::eval();
        let x = g.constant(t(&[2], &[-1.0, 2.0]));
        let y = g.leaky_relu(x).unwrap();
        assert_eq!(g.value(y).data(), &[-0.2, 2.0]);
        let z = g.constant(Tensor::scalar(0.0));
        let s = g.sigmoid(z).unwrap();
        assert_eq!(g.value(s).item(), 0.5);
    }

    #[test]
    fn mean_and_dot_gradients() {
        let mut g = Graph::<f64>::eval();
        let x = g.param(t(&[4], &[1.0, 2.0, 3.0, 4.0]));
        let m = g.mean(x).unwrap();
        let grads = g.backward(m).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[0.25; 4]);

        let mut g = Graph::<f64>::eval();
        let x = g.param(t(&[3], &[1.0, 2.0, 3.0]));
        let y = g.constant(t(&[3], &[4.0, -5.0, 6.0]));
        let p = g.mul(x, y).unwrap();
        let s = g.sum(p).unwrap();
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[4.0, -5.0, 6.0]);
        assert!(grads.get(y).is_none());
    }

    #[test]
    fn repeated_use_accumulates() {
        let mut g = Graph::<f64>::eval();
        let x = g.param(t(&[2], &[3.0, -1.0]));
        let sq = g.mul(x, x).unwrap();
        let s = g.sum(sq).unwrap();
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[6.0, -2.0]);
    }

    #[test]
    fn backward_errors() {
        let mut g = Graph::<f64>::eval();
        let x = g.param(t(&[2], &[1.0, 2.0]));
        assert!(matches!(g.backward(x), Err(Error::Shape(_))));
        assert!(matches!(g.backward(Var(17)), Err(Error::State(_))));
    }

    #[test]
    fn identity_conv_passes_through() {
        let mut g = Graph::<f64>::eval();
        let data: Vec<f64> = (0..18).map(|i| i as f64).collect();
        let x = g.constant(t(&[1, 2, 3, 3], &data));
        let mut w = Tensor::zeros(&[2, 2, 1, 1]);
        w.data_mut()[0] = 1.0;
        w.data_mut()[3] = 1.0;
        let w = g.constant(w);
        let y = g.conv2d(x, w, None, 1, 0).unwrap();
        assert_eq!(g.value(y).data(), &data[..]);
    }

    #[test]
    fn transposed_conv_shape() {
        let mut g = Graph::<f32>::eval();
        let x = g.constant(Tensor::zeros(&[2, 8, 4, 4]));
        let w = g.constant(Tensor::zeros(&[8, 3, 4, 4]));
        let b = g.constant(Tensor::full(&[3], 0.5));
        let y = g.conv_transpose2d(x, w, Some(b), 2, 1).unwrap();
        assert_eq!(g.value(y).shape(), &[2, 3, 8, 8]);
        assert!(g.value(y).data().iter().all(|&v| v == 0.5));
    }

    #[test]
    fn dropout_modes() {
        let mut g = Graph::<f64>::eval();
        let x = g.constant(Tensor::full(&[1000], 1.0));
        let y = g.dropout(x, 0.2).unwrap();
        assert_eq!(g.value(y), g.value(x));

        let mut g = Graph::<f64>::new(Mode::Train, 3);
        let x = g.constant(Tensor::full(&[1000], 1.0));
        let y = g.dropout(x, 0.2).unwrap();
        let vals = g.value(y).data();
        assert!(vals.iter().all(|&v| v == 0.0 || v == 1.25));
        assert!(vals.contains(&0.0));
        assert!(g.dropout(x, 1.0).is_err());
    }

    #[test]
    fn bce_at_zero_logits_is_ln2() {
        let mut g = Graph::<f64>::eval();
        let x = g.constant(Tensor::zeros(&[1, 1, 8, 8]));
        for target in [0.0, 1.0] {
            let l = g.bce_with_logits(x, target).unwrap();
            assert!((g.value(l).item() - std::f64::consts::LN_2).abs() < 1e-15);
        }
    }

    #[test]
    fn non_finite_values_trip_in_debug() {
        if !cfg!(debug_assertions) {
            return;
        }
        let mut g = Graph::<f64>::eval();
        let x = g.constant(t(&[1], &[f64::MAX]));
        assert!(matches!(g.scale(x, 10.0), Err(Error::Numeric(_))));
    }
}
