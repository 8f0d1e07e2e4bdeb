//! Tape-based reverse-mode differentiation.
//!
//! A [`Graph`] records every primitive in execution order. Because nodes can
//! only reference earlier nodes, the append order is a topological order and
//! [`Graph::backward`] is a single reverse sweep. Named parameters enter the
//! tape through [`Graph::param`]; their gradients come back keyed by name.

mod gradcheck;
pub(crate) mod kernels;

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

pub use gradcheck::{grad_check, GradCheckConfig, GradReport};
use kernels::{ConvGeom, PoolGeom};

/// Floor applied to the argument of `log`.
pub const LOG_FLOOR: f64 = 1e-7;
/// Negative-side slope of the leaky ReLU.
pub const LEAKY_SLOPE: f64 = 0.2;

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Sigmoid,
    Relu,
    /// Slope [`LEAKY_SLOPE`] for negative inputs.
    LeakyRelu,
    /// Natural log with the argument floored at [`LOG_FLOOR`].
    Log,
    Neg,
    /// Absolute value; subgradient 0 at 0.
    Abs,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PoolKind {
    Max,
    Average,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Elementwise {
    Add,
    Sub,
    Mul,
    /// Ties route the gradient to the first operand.
    Max,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Conv2d(ConvGeom),
    MaxPool { geom: PoolGeom, argmax: Vec<u32> },
    AvgPool(PoolGeom),
    Upsample2x,
    Dense,
    Act(Activation),
    Elem { kind: Elementwise, broadcast: bool },
    Concat(Vec<usize>),
    Reshape,
    Sum,
    Mean,
    Affine { scale: f64 },
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op,
    inputs: Vec<usize>,
    requires_grad: bool,
    param: Option<String>,
}

/// Gradients produced by one backward sweep.
#[derive(Debug, Default)]
pub struct Gradients<T = f32> {
    params: BTreeMap<String, Tensor<T>>,
    leaves: BTreeMap<usize, Tensor<T>>,
}

impl<T: Real> Gradients<T> {
    /// Gradient of a named parameter. Parameters that did not influence the
    /// loss get an all-zero gradient.
    pub fn param(&self, name: &str) -> Option<&Tensor<T>> {
        self.params.get(name)
    }

    pub fn params(&self) -> &BTreeMap<String, Tensor<T>> {
        &self.params
    }

    pub fn into_params(self) -> BTreeMap<String, Tensor<T>> {
        self.params
    }

    /// Gradient of an unnamed leaf created with [`Graph::variable`].
    pub fn leaf(&self, v: Var) -> Option<&Tensor<T>> {
        self.leaves.get(&v.0)
    }
}

/// Recorded forward computation.
#[derive(Debug)]
pub struct Graph<T = f32> {
    nodes: Vec<Node<T>>,
    frozen: Vec<String>,
    consumed: bool,
    kink_hash: Option<u64>,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn mix(h: &mut u64, v: u64) {
    *h = (*h ^ v).wrapping_mul(0x0100_0000_01b3).rotate_left(5);
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            frozen: Vec::new(),
            consumed: false,
            kink_hash: None,
        }
    }

    /// Parameters whose name starts with `prefix` enter this graph as
    /// constants: gradients flow through them but not into them.
    pub fn freeze_prefix(&mut self, prefix: impl Into<String>) {
        self.frozen.push(prefix.into());
    }

    /// Starts recording the branch taken at every non-smooth point (ReLU
    /// sign, pooling argmax, max operand, abs sign, log floor). Two forward
    /// passes with equal [`Graph::kink_signature`] lie on the same smooth piece.
    pub fn track_kinks(&mut self) {
        self.kink_hash = Some(0xcbf2_9ce4_8422_2325);
    }

    pub fn kink_signature(&self) -> Option<u64> {
        self.kink_hash
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Constant input (no gradient).
    pub fn input(&mut self, t: Tensor<T>) -> Var {
        self.push_leaf(t, false, None)
    }

    /// Unnamed differentiable leaf; read its gradient with [`Gradients::leaf`].
    pub fn variable(&mut self, t: Tensor<T>) -> Var {
        self.push_leaf(t, true, None)
    }

    /// Named trainable leaf (constant if it matches a frozen prefix).
    pub fn param(&mut self, name: &str, t: &Tensor<T>) -> Var {
        let frozen = self.frozen.iter().any(|p| name.starts_with(p.as_str()));
        self.push_leaf(t.clone(), !frozen, Some(name.to_string()))
    }

    /// Copies a node's current value into a new constant leaf.
    pub fn detach(&mut self, v: Var) -> Var {
        let t = self.value(v).clone();
        self.input(t)
    }

    fn push_leaf(&mut self, t: Tensor<T>, requires_grad: bool, param: Option<String>) -> Var {
        self.nodes.push(Node {
            value: t,
            op: Op::Leaf,
            inputs: Vec::new(),
            requires_grad,
            param,
        });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, value: Tensor<T>, op: Op, inputs: Vec<usize>, what: &str) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite(format!(
                "{what} (node {}, shape {:?})",
                self.nodes.len(),
                value.shape()
            )));
        }
        let requires_grad = inputs.iter().any(|&i| self.nodes[i].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            inputs,
            requires_grad,
            param: None,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn record_kinks(&mut self, bits: impl Iterator<Item = u64>) {
        if let Some(h) = self.kink_hash.as_mut() {
            for b in bits {
                mix(h, b);
            }
        }
    }

    /// 2-D convolution with zero padding. `weight` is C'×C×k×k, `bias` C'.
    pub fn conv2d(&mut self, x: Var, weight: Var, bias: Var, stride: usize, pad: usize) -> Result<Var> {
        let (n, c, h, w) = self.value(x).dims4()?;
        let (c_out, c_w, kh, kw) = self.value(weight).dims4()?;
        if c_w != c {
            return Err(Error::contract(format!(
                "conv2d: input has {c} channels but weight expects {c_w}"
            )));
        }
        if kh != kw || kh == 0 {
            return Err(Error::contract("conv2d: kernel must be square and non-empty"));
        }
        if stride == 0 {
            return Err(Error::contract("conv2d: stride must be ≥ 1"));
        }
        if h + 2 * pad < kh || w + 2 * pad < kw {
            return Err(Error::contract(format!(
                "conv2d: padded input {}×{} smaller than kernel {kh}",
                h + 2 * pad,
                w + 2 * pad
            )));
        }
        if self.value(bias).numel() != c_out {
            return Err(Error::contract(format!(
                "conv2d: bias has {} entries, expected {c_out}",
                self.value(bias).numel()
            )));
        }
        let geom = ConvGeom {
            c_in: c,
            h,
            w,
            c_out,
            k: kh,
            stride,
            pad,
            h_out: (h + 2 * pad - kh) / stride + 1,
            w_out: (w + 2 * pad - kw) / stride + 1,
        };
        let out = kernels::conv2d_forward(
            self.value(x).data(),
            self.value(weight).data(),
            self.value(bias).data(),
            n,
            &geom,
        );
        let t = Tensor::new(vec![n, c_out, geom.h_out, geom.w_out], out)?;
        self.push(t, Op::Conv2d(geom), vec![x.0, weight.0, bias.0], "conv2d")
    }

    /// Windowed pooling without padding; output size floor((H − k)/stride) + 1.
    pub fn pool(&mut self, x: Var, kind: PoolKind, k: usize, stride: usize) -> Result<Var> {
        let (_, _, h, w) = self.value(x).dims4()?;
        if k == 0 || stride == 0 {
            return Err(Error::contract("pool: window and stride must be ≥ 1"));
        }
        if k > h || k > w {
            return Err(Error::contract(format!("pool: window {k} exceeds input {h}×{w}")));
        }
        if k == stride && (h % stride != 0 || w % stride != 0) {
            return Err(Error::contract(format!(
                "pool: input {h}×{w} not divisible by stride {stride}"
            )));
        }
        self.pool_window(x, kind, k, k, stride)
    }

    /// Pools each channel plane down to 1×1.
    pub fn global_pool(&mut self, x: Var, kind: PoolKind) -> Result<Var> {
        let (_, _, h, w) = self.value(x).dims4()?;
        self.pool_window(x, kind, h, w, h.max(w))
    }

    fn pool_window(&mut self, x: Var, kind: PoolKind, kh: usize, kw: usize, stride: usize) -> Result<Var> {
        let (n, c, h, w) = self.value(x).dims4()?;
        let geom = PoolGeom {
            planes: n * c,
            h,
            w,
            kh,
            kw,
            stride,
            h_out: (h - kh) / stride + 1,
            w_out: (w - kw) / stride + 1,
        };
        let shape = vec![n, c, geom.h_out, geom.w_out];
        match kind {
            PoolKind::Max => {
                let (out, argmax) = kernels::max_pool_forward(self.value(x).data(), &geom);
                self.record_kinks(argmax.iter().map(|&a| a as u64));
                self.push(Tensor::new(shape, out)?, Op::MaxPool { geom, argmax }, vec![x.0], "max-pool")
            }
            PoolKind::Average => {
                let out = kernels::avg_pool_forward(self.value(x).data(), &geom);
                self.push(Tensor::new(shape, out)?, Op::AvgPool(geom), vec![x.0], "average-pool")
            }
        }
    }

    /// Nearest-neighbour 2× upsampling.
    pub fn upsample2x(&mut self, x: Var) -> Result<Var> {
        let (n, c, h, w) = self.value(x).dims4()?;
        let out = kernels::upsample2x_forward(self.value(x).data(), n * c, h, w);
        let t = Tensor::new(vec![n, c, 2 * h, 2 * w], out)?;
        self.push(t, Op::Upsample2x, vec![x.0], "upsample2x")
    }

    /// Affine map `x · Wᵀ + b` for `x` N×C, `W` C'×C, `b` C'.
    pub fn dense(&mut self, x: Var, weight: Var, bias: Var) -> Result<Var> {
        let (xs, ws) = (self.value(x).shape(), self.value(weight).shape());
        let (n, c, c_out) = match (xs, ws) {
            ([n, c], [o, c2]) if c == c2 => (*n, *c, *o),
            _ => {
                return Err(Error::contract(format!(
                    "dense: input {xs:?} incompatible with weight {ws:?}"
                )))
            }
        };
        if self.value(bias).numel() != c_out {
            return Err(Error::contract("dense: bias length differs from output width"));
        }
        let bias_data = self.value(bias).data();
        let mut out: Vec<T> = (0..n).flat_map(|_| bias_data.iter().copied()).collect();
        T::gemm(
            n,
            c,
            c_out,
            T::one(),
            self.value(x).data(),
            c as isize,
            1,
            self.value(weight).data(),
            1,
            c as isize,
            T::one(),
            &mut out,
            c_out as isize,
            1,
        );
        let t = Tensor::new(vec![n, c_out], out)?;
        self.push(t, Op::Dense, vec![x.0, weight.0, bias.0], "dense")
    }

    pub fn activation(&mut self, x: Var, kind: Activation) -> Result<Var> {
        let xv = self.value(x);
        let slope = T::from_f64(LEAKY_SLOPE);
        let floor = T::from_f64(LOG_FLOOR);
        let out = match kind {
            Activation::Sigmoid => xv.map(|v| T::one() / (T::one() + (-v).exp())),
            Activation::Relu => xv.map(|v| if v > T::zero() { v } else { T::zero() }),
            Activation::LeakyRelu => xv.map(|v| if v > T::zero() { v } else { v * slope }),
            Activation::Log => xv.map(|v| v.max(floor).ln()),
            Activation::Neg => xv.map(|v| -v),
            Activation::Abs => xv.map(|v| v.abs()),
        };
        if self.kink_hash.is_some() {
            let bits: Vec<u64> = match kind {
                Activation::Relu | Activation::LeakyRelu => {
                    xv.data().iter().map(|&v| (v > T::zero()) as u64).collect()
                }
                Activation::Abs => xv
                    .data()
                    .iter()
                    .map(|&v| if v > T::zero() { 2 } else if v < T::zero() { 1 } else { 0 })
                    .collect(),
                Activation::Log => xv.data().iter().map(|&v| (v > floor) as u64).collect(),
                _ => Vec::new(),
            };
            self.record_kinks(bits.into_iter());
        }
        self.push(out, Op::Act(kind), vec![x.0], "activation")
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.activation(x, Activation::Relu)
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.activation(x, Activation::Sigmoid)
    }

    /// Elementwise binary op. `b` may also be N×C×1×1 against an N×C×H×W
    /// `a` (per-channel broadcast, `add` and `mul` only).
    pub fn elementwise(&mut self, a: Var, b: Var, kind: Elementwise) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() == bv.shape() {
            let data: Vec<T> = match kind {
                Elementwise::Add => av.data().iter().zip(bv.data()).map(|(&x, &y)| x + y).collect(),
                Elementwise::Sub => av.data().iter().zip(bv.data()).map(|(&x, &y)| x - y).collect(),
                Elementwise::Mul => av.data().iter().zip(bv.data()).map(|(&x, &y)| x * y).collect(),
                Elementwise::Max => av
                    .data()
                    .iter()
                    .zip(bv.data())
                    .map(|(&x, &y)| if x >= y { x } else { y })
                    .collect(),
            };
            if kind == Elementwise::Max && self.kink_hash.is_some() {
                let bits: Vec<u64> = av
                    .data()
                    .iter()
                    .zip(bv.data())
                    .map(|(&x, &y)| (x >= y) as u64)
                    .collect();
                let t = Tensor::new(av.shape().to_vec(), data)?;
                self.record_kinks(bits.into_iter());
                return self.push(t, Op::Elem { kind, broadcast: false }, vec![a.0, b.0], "elementwise");
            }
            let t = Tensor::new(av.shape().to_vec(), data)?;
            return self.push(t, Op::Elem { kind, broadcast: false }, vec![a.0, b.0], "elementwise");
        }
        let (n, c, h, w) = av.dims4()?;
        let bs = bv.shape();
        if bs != [n, c, 1, 1] || !matches!(kind, Elementwise::Add | Elementwise::Mul) {
            return Err(Error::contract(format!(
                "elementwise {kind:?}: incompatible shapes {:?} and {bs:?}",
                av.shape()
            )));
        }
        let hw = h * w;
        let mut data = av.data().to_vec();
        for (plane, &s) in data.chunks_mut(hw).zip(bv.data()) {
            for v in plane {
                *v = match kind {
                    Elementwise::Add => *v + s,
                    _ => *v * s,
                };
            }
        }
        let t = Tensor::new(av.shape().to_vec(), data)?;
        self.push(t, Op::Elem { kind, broadcast: true }, vec![a.0, b.0], "elementwise")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise(a, b, Elementwise::Add)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise(a, b, Elementwise::Sub)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise(a, b, Elementwise::Mul)
    }

    pub fn max(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise(a, b, Elementwise::Max)
    }

    /// Stacks N×Cᵢ×H×W tensors along the channel axis in argument order.
    pub fn concat_channels(&mut self, xs: &[Var]) -> Result<Var> {
        let first = xs
            .first()
            .ok_or_else(|| Error::contract("concat_channels: empty input list"))?;
        let (n, _, h, w) = self.value(*first).dims4()?;
        let mut widths = Vec::with_capacity(xs.len());
        for &x in xs {
            let (nx, cx, hx, wx) = self.value(x).dims4()?;
            if (nx, hx, wx) != (n, h, w) {
                return Err(Error::contract(format!(
                    "concat_channels: shape {:?} does not match N={n}, H={h}, W={w}",
                    self.value(x).shape()
                )));
            }
            widths.push(cx);
        }
        let total: usize = widths.iter().sum();
        let hw = h * w;
        let mut data = Vec::with_capacity(n * total * hw);
        for s in 0..n {
            for (&x, &c) in xs.iter().zip(&widths) {
                data.extend_from_slice(&self.value(x).data()[s * c * hw..(s + 1) * c * hw]);
            }
        }
        let t = Tensor::new(vec![n, total, h, w], data)?;
        self.push(t, Op::Concat(widths), xs.iter().map(|v| v.0).collect(), "concat")
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(x).clone().reshape(shape.to_vec())?;
        self.push(t, Op::Reshape, vec![x.0], "reshape")
    }

    /// Sum of all elements as a 1-element tensor.
    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).sum();
        self.push(Tensor::scalar(s), Op::Sum, vec![x.0], "sum")
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x);
        let m = v.sum() / T::from_f64(v.numel() as f64);
        self.push(Tensor::scalar(m), Op::Mean, vec![x.0], "mean")
    }

    /// `scale · x + shift` with constant coefficients.
    pub fn affine(&mut self, x: Var, scale: f64, shift: f64) -> Result<Var> {
        let (s, b) = (T::from_f64(scale), T::from_f64(shift));
        let t = self.value(x).map(|v| v * s + b);
        self.push(t, Op::Affine { scale }, vec![x.0], "affine")
    }

    pub fn scale(&mut self, x: Var, scale: f64) -> Result<Var> {
        self.affine(x, scale, 0.0)
    }

    /// Reverse sweep from a scalar loss. Consumes the graph: a second call
    /// returns a state error.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients<T>> {
        if self.consumed {
            return Err(Error::State("backward called twice on the same graph".into()));
        }
        if self.value(loss).numel() != 1 {
            return Err(Error::contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        self.consumed = true;
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(self.value(loss).shape(), T::one()));
        let mut out = Gradients {
            params: BTreeMap::new(),
            leaves: BTreeMap::new(),
        };

        for id in (0..=loss.0).rev() {
            let node = &self.nodes[id];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[id].take() else {
                continue;
            };
            if let Op::Leaf = node.op {
                match &node.param {
                    Some(name) => match out.params.get_mut(name) {
                        Some(acc) => acc.add_assign(&g),
                        None => {
                            out.params.insert(name.clone(), g);
                        }
                    },
                    None => {
                        out.leaves.insert(id, g);
                    }
                }
                continue;
            }
            let contributions = self.vjp(id, &g)?;
            for (input, contrib) in contributions {
                match grads[input].as_mut() {
                    Some(acc) => acc.add_assign(&contrib),
                    None => grads[input] = Some(contrib),
                }
            }
        }
        // Parameters that never received a gradient still get a zero entry.
        for node in &self.nodes {
            if let (Op::Leaf, Some(name), true) = (&node.op, &node.param, node.requires_grad) {
                out.params
                    .entry(name.clone())
                    .or_insert_with(|| Tensor::zeros(node.value.shape()));
            }
        }
        Ok(out)
    }

    fn needs(&self, input: usize) -> bool {
        self.nodes[input].requires_grad
    }

    /// Vector-Jacobian products of node `id` for each input that needs one.
    fn vjp(&self, id: usize, g: &Tensor<T>) -> Result<Vec<(usize, Tensor<T>)>> {
        let node = &self.nodes[id];
        let ins = &node.inputs;
        let val = |i: usize| &self.nodes[ins[i]].value;
        let mut out = Vec::with_capacity(ins.len());
        match &node.op {
            Op::Leaf => {}
            Op::Conv2d(geom) => {
                let n = val(0).shape()[0];
                let need_dx = self.needs(ins[0]);
                let need_dw = self.needs(ins[1]) || self.needs(ins[2]);
                let (dx, dw, db) = kernels::conv2d_backward(
                    val(0).data(),
                    val(1).data(),
                    g.data(),
                    n,
                    geom,
                    need_dx,
                    need_dw,
                );
                if let Some(dx) = dx {
                    out.push((ins[0], Tensor::new(val(0).shape().to_vec(), dx)?));
                }
                if let (Some(dw), Some(db)) = (dw, db) {
                    if self.needs(ins[1]) {
                        out.push((ins[1], Tensor::new(val(1).shape().to_vec(), dw)?));
                    }
                    if self.needs(ins[2]) {
                        out.push((ins[2], Tensor::new(val(2).shape().to_vec(), db)?));
                    }
                }
            }
            Op::MaxPool { geom, argmax } => {
                let dx = kernels::max_pool_backward(g.data(), argmax, geom);
                out.push((ins[0], Tensor::new(val(0).shape().to_vec(), dx)?));
            }
            Op::AvgPool(geom) => {
                let dx = kernels::avg_pool_backward(g.data(), geom);
                out.push((ins[0], Tensor::new(val(0).shape().to_vec(), dx)?));
            }
            Op::Upsample2x => {
                let (n, c, h, w) = val(0).dims4()?;
                let dx = kernels::upsample2x_backward(g.data(), n * c, h, w);
                out.push((ins[0], Tensor::new(val(0).shape().to_vec(), dx)?));
            }
            Op::Dense => {
                let (x, wt) = (val(0), val(1));
                let (n, c) = (x.shape()[0], x.shape()[1]);
                let c_out = wt.shape()[0];
                if self.needs(ins[0]) {
                    let mut dx = vec![T::zero(); n * c];
                    T::gemm(
                        n,
                        c_out,
                        c,
                        T::one(),
                        g.data(),
                        c_out as isize,
                        1,
                        wt.data(),
                        c as isize,
                        1,
                        T::zero(),
                        &mut dx,
                        c as isize,
                        1,
                    );
                    out.push((ins[0], Tensor::new(vec![n, c], dx)?));
                }
                if self.needs(ins[1]) {
                    let mut dw = vec![T::zero(); c_out * c];
                    T::gemm(
                        c_out,
                        n,
                        c,
                        T::one(),
                        g.data(),
                        1,
                        c_out as isize,
                        x.data(),
                        c as isize,
                        1,
                        T::zero(),
                        &mut dw,
                        c as isize,
                        1,
                    );
                    out.push((ins[1], Tensor::new(vec![c_out, c], dw)?));
                }
                if self.needs(ins[2]) {
                    let mut db = vec![T::zero(); c_out];
                    for row in g.data().chunks(c_out) {
                        for (acc, &v) in db.iter_mut().zip(row) {
                            *acc = *acc + v;
                        }
                    }
                    out.push((ins[2], Tensor::new(val(2).shape().to_vec(), db)?));
                }
            }
            Op::Act(kind) => {
                let x = val(0);
                let y = &node.value;
                let slope = T::from_f64(LEAKY_SLOPE);
                let floor = T::from_f64(LOG_FLOOR);
                let dx: Vec<T> = match kind {
                    Activation::Sigmoid => y
                        .data()
                        .iter()
                        .zip(g.data())
                        .map(|(&s, &gv)| gv * s * (T::one() - s))
                        .collect(),
                    Activation::Relu => x
                        .data()
                        .iter()
                        .zip(g.data())
                        .map(|(&v, &gv)| if v > T::zero() { gv } else { T::zero() })
                        .collect(),
                    Activation::LeakyRelu => x
                        .data()
                        .iter()
                        .zip(g.data())
                        .map(|(&v, &gv)| if v > T::zero() { gv } else { gv * slope })
                        .collect(),
                    Activation::Log => x
                        .data()
                        .iter()
                        .zip(g.data())
                        .map(|(&v, &gv)| if v > floor { gv / v } else { T::zero() })
                        .collect(),
                    Activation::Neg => g.data().iter().map(|&gv| -gv).collect(),
                    Activation::Abs => x
                        .data()
                        .iter()
                        .zip(g.data())
                        .map(|(&v, &gv)| {
                            if v > T::zero() {
                                gv
                            } else if v < T::zero() {
                                -gv
                            } else {
                                T::zero()
                            }
                        })
                        .collect(),
                };
                out.push((ins[0], Tensor::new(x.shape().to_vec(), dx)?));
            }
            Op::Elem { kind, broadcast } => {
                let (a, b) = (val(0), val(1));
                if !broadcast {
                    let (da, db): (Vec<T>, Vec<T>) = match kind {
                        Elementwise::Add => (g.data().to_vec(), g.data().to_vec()),
                        Elementwise::Sub => (g.data().to_vec(), g.data().iter().map(|&v| -v).collect()),
                        Elementwise::Mul => (
                            g.data().iter().zip(b.data()).map(|(&gv, &y)| gv * y).collect(),
                            g.data().iter().zip(a.data()).map(|(&gv, &x)| gv * x).collect(),
                        ),
                        Elementwise::Max => a
                            .data()
                            .iter()
                            .zip(b.data())
                            .zip(g.data())
                            .map(|((&x, &y), &gv)| if x >= y { (gv, T::zero()) } else { (T::zero(), gv) })
                            .unzip(),
                    };
                    if self.needs(ins[0]) {
                        out.push((ins[0], Tensor::new(a.shape().to_vec(), da)?));
                    }
                    if self.needs(ins[1]) {
                        out.push((ins[1], Tensor::new(b.shape().to_vec(), db)?));
                    }
                } else {
                    let (_, _, h, w) = a.dims4()?;
                    let hw = h * w;
                    let mut da = g.data().to_vec();
                    let mut db = vec![T::zero(); b.numel()];
                    for (p, plane) in g.data().chunks(hw).enumerate() {
                        let s = b.data()[p];
                        match kind {
                            Elementwise::Add => {
                                db[p] = plane.iter().fold(T::zero(), |acc, &v| acc + v);
                            }
                            _ => {
                                let xs = &a.data()[p * hw..(p + 1) * hw];
                                db[p] = plane
                                    .iter()
                                    .zip(xs)
                                    .fold(T::zero(), |acc, (&gv, &x)| acc + gv * x);
                                for v in &mut da[p * hw..(p + 1) * hw] {
                                    *v = *v * s;
                                }
                            }
                        }
                    }
                    if self.needs(ins[0]) {
                        out.push((ins[0], Tensor::new(a.shape().to_vec(), da)?));
                    }
                    if self.needs(ins[1]) {
                        out.push((ins[1], Tensor::new(b.shape().to_vec(), db)?));
                    }
                }
            }
            Op::Concat(widths) => {
                let (n, total, h, w) = node.value.dims4()?;
                let hw = h * w;
                let mut offset = 0;
                for (i, &c) in widths.iter().enumerate() {
                    if self.needs(ins[i]) {
                        let mut d = Vec::with_capacity(n * c * hw);
                        for s in 0..n {
                            let start = (s * total + offset) * hw;
                            d.extend_from_slice(&g.data()[start..start + c * hw]);
                        }
                        out.push((ins[i], Tensor::new(vec![n, c, h, w], d)?));
                    }
                    offset += c;
                }
            }
            Op::Reshape => {
                out.push((ins[0], g.clone().reshape(val(0).shape().to_vec())?));
            }
            Op::Sum => {
                out.push((ins[0], Tensor::full(val(0).shape(), g.data()[0])));
            }
            Op::Mean => {
                let x = val(0);
                let v = g.data()[0] / T::from_f64(x.numel() as f64);
                out.push((ins[0], Tensor::full(x.shape(), v)));
            }
            Op::Affine { scale } => {
                let s = T::from_f64(*scale);
                out.push((ins[0], g.map(|v| v * s)));
            }
        }
        Ok(out)
    }
}
