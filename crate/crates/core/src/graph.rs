//! Reverse-mode automatic differentiation over dense tensors.
//!
//! A [`Graph`] is an append-only tape. Every operation appends one node that
//! records its value, its parents and whatever it needs for the backward
//! rule, so recording order is already a topological order. [`Var`] is a
//! cheap copyable handle into the tape.
//!
//! Leaves come in two kinds: constants (no gradient) and parameters
//! (`requires_grad`). [`Graph::backward`] walks the tape once in reverse and
//! adds `d loss / d leaf` into each parameter's gradient buffer. Buffers keep
//! accumulating across calls until [`Graph::zero_grad`].
//!
//! [`Graph::detach`] makes a new constant leaf sharing the source's values,
//! so nothing upstream of it can receive gradient through that edge.

use alloc::boxed::Box;
use alloc::format;
use alloc::rc::Rc;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{AmadError, Result};
use crate::tensor::{numel, Tensor};

/// Epsilon inside the layer-norm square root.
pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Handle to a node on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// A differentiable operation defined outside the core op set.
///
/// `backward` receives the input values, the forward output and the upstream
/// gradient, and returns one gradient buffer per input (same length as that
/// input).
pub trait CustomOp {
    fn name(&self) -> &'static str;
    fn backward(&self, inputs: &[&[f64]], output: &[f64], grad_out: &[f64]) -> Vec<Vec<f64>>;
}

enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Exp(Var),
    Log(Var),
    Sum(Var),
    Mean(Var),
    FrobeniusSq(Var),
    L1Norm(Var),
    MeanAxis {
        x: Var,
        axis: usize,
    },
    MatMul(Var, Var),
    Permute {
        x: Var,
        axes: Vec<usize>,
    },
    Reshape(Var),
    ConcatLast(Vec<Var>),
    Softmax(Var),
    LogSoftmax(Var),
    Gelu(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        normed: Vec<f64>,
        rstd: Vec<f64>,
    },
    /// Either side may be absent, meaning no gradient flows to it.
    /// `dp`/`dq` cache the per-element partial derivatives.
    JsRows {
        p: Option<Var>,
        q: Option<Var>,
        dp: Rc<[f64]>,
        dq: Rc<[f64]>,
    },
    Custom {
        inputs: Vec<Var>,
        op: Box<dyn CustomOp>,
    },
}

impl Op {
    fn parents(&self) -> Vec<Var> {
        match self {
            Op::Leaf => Vec::new(),
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::MatMul(a, b) => vec![*a, *b],
            Op::Scale(a, _)
            | Op::Exp(a)
            | Op::Log(a)
            | Op::Sum(a)
            | Op::Mean(a)
            | Op::FrobeniusSq(a)
            | Op::L1Norm(a)
            | Op::Reshape(a)
            | Op::Softmax(a)
            | Op::LogSoftmax(a)
            | Op::Gelu(a) => vec![*a],
            Op::MeanAxis { x, .. } | Op::Permute { x, .. } => vec![*x],
            Op::ConcatLast(xs) => xs.clone(),
            Op::LayerNorm { x, gamma, beta, .. } => vec![*x, *gamma, *beta],
            Op::JsRows { p, q, .. } => p.iter().chain(q).copied().collect(),
            Op::Custom { inputs, .. } => inputs.clone(),
        }
    }
}

struct Node {
    shape: Vec<usize>,
    value: Rc<[f64]>,
    op: Op,
    requires_grad: bool,
    /// Accumulated gradient; only present on parameter leaves.
    grad: Option<Vec<f64>>,
}

/// Gradient tape.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    /// Number of recorded nodes.
    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn constant(&mut self, t: &Tensor) -> Var {
        self.leaf(t.shape().to_vec(), Rc::from(t.data()), false)
    }

    /// Constant leaf built from raw parts. Panics if the sizes disagree.
    pub fn constant_from(&mut self, shape: Vec<usize>, data: Vec<f64>) -> Var {
        assert_eq!(numel(&shape), data.len(), "constant_from: size mismatch");
        self.leaf(shape, Rc::from(data), false)
    }

    /// Trainable leaf. Its gradient buffer starts at zero.
    pub fn param(&mut self, t: &Tensor) -> Var {
        self.leaf(t.shape().to_vec(), Rc::from(t.data()), true)
    }

    fn leaf(&mut self, shape: Vec<usize>, value: Rc<[f64]>, requires_grad: bool) -> Var {
        let grad = requires_grad.then(|| vec![0.0; value.len()]);
        self.nodes.push(Node {
            shape,
            value,
            op: Op::Leaf,
            requires_grad,
            grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, shape: Vec<usize>, value: Vec<f64>, op: Op) -> Var {
        self.push_shared(shape, Rc::from(value), op)
    }

    fn push_shared(&mut self, shape: Vec<usize>, value: Rc<[f64]>, op: Op) -> Var {
        debug_assert_eq!(numel(&shape), value.len());
        let requires_grad = op.parents().iter().any(|p| self.nodes[p.0].requires_grad);
        self.nodes.push(Node {
            shape,
            value,
            op,
            requires_grad,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Copies a node's value out as a [`Tensor`].
    pub fn tensor(&self, v: Var) -> Tensor {
        let node = &self.nodes[v.0];
        Tensor::new(node.shape.clone(), node.value.to_vec()).expect("node shape is consistent")
    }

    /// Value of a single-element node.
    pub fn scalar(&self, v: Var) -> f64 {
        let value = self.value(v);
        debug_assert_eq!(value.len(), 1);
        value[0]
    }

    /// Accumulated gradient of a parameter leaf.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].grad.as_deref()
    }

    pub fn zero_grad(&mut self) {
        for node in &mut self.nodes {
            if let Some(g) = node.grad.as_mut() {
                g.iter_mut().for_each(|x| *x = 0.0);
            }
        }
    }

    /// Value-equal constant leaf cut off from the tape.
    pub fn detach(&mut self, v: Var) -> Var {
        let node = &self.nodes[v.0];
        let (shape, value) = (node.shape.clone(), Rc::clone(&node.value));
        self.leaf(shape, value, false)
    }

    // ----- elementwise -------------------------------------------------

    /// `a + b`, where `b`'s shape may be a suffix of `a`'s (repeated over the
    /// leading axes).
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.broadcast_binary("add", a, b, |x, y| x + y)?;
        Ok(self.push(self.shape(a).to_vec(), value, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.broadcast_binary("sub", a, b, |x, y| x - y)?;
        Ok(self.push(self.shape(a).to_vec(), value, Op::Sub(a, b)))
    }

    /// Hadamard product, with the same suffix broadcasting as [`Graph::add`].
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.broadcast_binary("mul", a, b, |x, y| x * y)?;
        Ok(self.push(self.shape(a).to_vec(), value, Op::Mul(a, b)))
    }

    fn broadcast_binary(
        &self,
        op: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Vec<f64>> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sb.len() > sa.len() || sa[sa.len() - sb.len()..] != *sb {
            return Err(AmadError::shape(op, sa, sb));
        }
        let (va, vb) = (self.value(a), self.value(b));
        let period = vb.len();
        Ok(va
            .iter()
            .enumerate()
            .map(|(i, &x)| f(x, vb[i % period]))
            .collect())
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Var {
        let value = self.value(a).iter().map(|x| x * k).collect();
        self.push(self.shape(a).to_vec(), value, Op::Scale(a, k))
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.scale(a, -1.0)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let value = self.value(a).iter().map(|&x| crate::math::exp(x)).collect();
        self.push(self.shape(a).to_vec(), value, Op::Exp(a))
    }

    /// Natural log. Non-positive inputs give `-inf`/NaN; callers floor first.
    pub fn log(&mut self, a: Var) -> Var {
        let value = self.value(a).iter().map(|&x| crate::math::ln(x)).collect();
        self.push(self.shape(a).to_vec(), value, Op::Log(a))
    }

    /// Exact GELU, `x * Phi(x)`.
    pub fn gelu(&mut self, a: Var) -> Var {
        let value = self.value(a).iter().map(|&x| x * std_normal_cdf(x)).collect();
        self.push(self.shape(a).to_vec(), value, Op::Gelu(a))
    }

    // ----- reductions --------------------------------------------------

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).iter().sum();
        self.push(Vec::new(), vec![s], Op::Sum(a))
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let v = self.value(a);
        let m = v.iter().sum::<f64>() / v.len() as f64;
        self.push(Vec::new(), vec![m], Op::Mean(a))
    }

    /// Sum of squares of every entry.
    pub fn frobenius_sq(&mut self, a: Var) -> Var {
        let s = self.value(a).iter().map(|x| x * x).sum();
        self.push(Vec::new(), vec![s], Op::FrobeniusSq(a))
    }

    /// Sum of absolute values. The subgradient at exactly zero is zero.
    pub fn l1_norm(&mut self, a: Var) -> Var {
        let s = self.value(a).iter().map(|x| x.abs()).sum();
        self.push(Vec::new(), vec![s], Op::L1Norm(a))
    }

    /// Mean over one axis, removing it.
    pub fn mean_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(AmadError::Contract(format!(
                "mean_axis: axis {axis} out of range for {shape:?}"
            )));
        }
        let (outer, len, inner) = split_axis(&shape, axis);
        let v = self.value(x);
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for l in 0..len {
                let src = &v[(o * len + l) * inner..][..inner];
                let dst = &mut out[o * inner..][..inner];
                dst.iter_mut().zip(src).for_each(|(d, s)| *d += s);
            }
        }
        let inv = 1.0 / len as f64;
        out.iter_mut().for_each(|d| *d *= inv);
        let mut out_shape = shape;
        out_shape.remove(axis);
        Ok(self.push(out_shape, out, Op::MeanAxis { x, axis }))
    }

    // ----- linear algebra and layout -----------------------------------

    /// Batched matrix product `[.., m, k] x [.., k, n] -> [.., m, n]`.
    ///
    /// Leading batch dimensions must be equal, or one side may be a plain
    /// matrix that is shared across the other side's batch.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let plan = MatMulPlan::new(self.shape(a), self.shape(b))?;
        let (va, vb) = (self.value(a), self.value(b));
        let mut out = vec![0.0; plan.batch * plan.m * plan.n];
        for t in 0..plan.batch {
            let ab = plan.a_block(t);
            let bb = plan.b_block(t);
            mm_nn(
                &va[ab..ab + plan.m * plan.k],
                &vb[bb..bb + plan.k * plan.n],
                &mut out[t * plan.m * plan.n..][..plan.m * plan.n],
                plan.m,
                plan.k,
                plan.n,
            );
        }
        Ok(self.push(plan.out_shape.clone(), out, Op::MatMul(a, b)))
    }

    /// Reorders axes: output axis `i` is input axis `axes[i]`.
    pub fn permute(&mut self, x: Var, axes: &[usize]) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let mut seen = vec![false; shape.len()];
        if axes.len() != shape.len()
            || axes
                .iter()
                .any(|&a| a >= shape.len() || core::mem::replace(&mut seen[a], true))
        {
            return Err(AmadError::Contract(format!(
                "permute: {axes:?} is not a permutation of {} axes",
                shape.len()
            )));
        }
        let (out, out_shape) = permute_data(self.value(x), &shape, axes);
        Ok(self.push(
            out_shape,
            out,
            Op::Permute {
                x,
                axes: axes.to_vec(),
            },
        ))
    }

    /// Swaps the last two axes.
    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let r = self.shape(x).len();
        if r < 2 {
            return Err(AmadError::Contract(
                "transpose needs at least two axes".into(),
            ));
        }
        let mut axes: Vec<usize> = (0..r).collect();
        axes.swap(r - 2, r - 1);
        self.permute(x, &axes)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        if numel(shape) != self.value(x).len() {
            return Err(AmadError::shape("reshape", self.shape(x), shape));
        }
        let value = self.value(x).to_vec();
        Ok(self.push(shape.to_vec(), value, Op::Reshape(x)))
    }

    /// Concatenates along the last axis; all leading dimensions must agree.
    pub fn concat_last_axis(&mut self, xs: &[Var]) -> Result<Var> {
        let first = *xs
            .first()
            .ok_or_else(|| AmadError::Contract("concat of zero tensors".into()))?;
        let lead = self.shape(first)[..self.shape(first).len() - 1].to_vec();
        let mut widths = Vec::with_capacity(xs.len());
        for &x in xs {
            let s = self.shape(x);
            if s.is_empty() || s[..s.len() - 1] != *lead {
                return Err(AmadError::shape("concat_last_axis", self.shape(first), s));
            }
            widths.push(s[s.len() - 1]);
        }
        let total: usize = widths.iter().sum();
        let rows = numel(&lead);
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for (&x, &w) in xs.iter().zip(&widths) {
                out.extend_from_slice(&self.value(x)[r * w..][..w]);
            }
        }
        let mut shape = lead;
        shape.push(total);
        Ok(self.push(shape, out, Op::ConcatLast(xs.to_vec())))
    }

    // ----- normalizations -----------------------------------------------

    /// Softmax over the last axis, stabilized by subtracting the row max.
    pub fn softmax_last_axis(&mut self, x: Var) -> Result<Var> {
        let n = self.last_axis_len(x, "softmax_last_axis")?;
        let v = self.value(x);
        if v.iter().any(|x| x.is_nan()) {
            return Err(AmadError::Numeric("NaN in softmax input".into()));
        }
        let mut out = v.to_vec();
        out.chunks_mut(n).for_each(softmax_in_place);
        Ok(self.push(self.shape(x).to_vec(), out, Op::Softmax(x)))
    }

    pub fn log_softmax_last_axis(&mut self, x: Var) -> Result<Var> {
        let n = self.last_axis_len(x, "log_softmax_last_axis")?;
        let v = self.value(x);
        if v.iter().any(|x| x.is_nan()) {
            return Err(AmadError::Numeric("NaN in log-softmax input".into()));
        }
        let mut out = v.to_vec();
        for row in out.chunks_mut(n) {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + crate::math::ln(row.iter().map(|&r| crate::math::exp(r - max)).sum::<f64>());
            row.iter_mut().for_each(|r| *r -= lse);
        }
        Ok(self.push(self.shape(x).to_vec(), out, Op::LogSoftmax(x)))
    }

    /// `gamma * (x - mean) / sqrt(var + eps) + beta` over the last axis.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let n = self.last_axis_len(x, "layer_norm")?;
        if self.shape(gamma) != [n] {
            return Err(AmadError::shape("layer_norm", self.shape(x), self.shape(gamma)));
        }
        if self.shape(beta) != [n] {
            return Err(AmadError::shape("layer_norm", self.shape(x), self.shape(beta)));
        }
        let v = self.value(x);
        let (g, b) = (self.value(gamma), self.value(beta));
        let rows = v.len() / n;
        let mut normed = Vec::with_capacity(v.len());
        let mut rstd = Vec::with_capacity(rows);
        let mut out = Vec::with_capacity(v.len());
        for row in v.chunks(n) {
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|r| (r - mean) * (r - mean)).sum::<f64>() / n as f64;
            let rs = 1.0 / libm::sqrt(var + LAYER_NORM_EPS);
            rstd.push(rs);
            for (j, &r) in row.iter().enumerate() {
                let xh = (r - mean) * rs;
                normed.push(xh);
                out.push(g[j] * xh + b[j]);
            }
        }
        Ok(self.push(
            self.shape(x).to_vec(),
            out,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                normed,
                rstd,
            },
        ))
    }

    /// Row-wise Jensen-Shannon divergence (natural log) between two tensors
    /// whose last-axis rows are distributions; the last axis is removed.
    ///
    /// Probabilities are floored at `floor` inside the logarithms and entries
    /// that are exactly zero contribute nothing.
    pub fn js_divergence_rows(&mut self, p: Var, q: Var, floor: f64) -> Result<Var> {
        let (shape, value, dp, dq) = self.js_forward(p, q, floor)?;
        Ok(self.push_shared(shape, value, Op::JsRows { p: Some(p), q: Some(q), dp, dq }))
    }

    /// Row-wise JS divergence recorded twice from a single evaluation: the
    /// first result back-propagates only into `p`, the second only into
    /// `q`. Equivalent to `js(p, detach(q))` and `js(detach(p), q)`.
    pub fn js_divergence_rows_split(&mut self, p: Var, q: Var, floor: f64) -> Result<(Var, Var)> {
        let (shape, value, dp, dq) = self.js_forward(p, q, floor)?;
        let to_p = self.push_shared(
            shape.clone(),
            value.clone(),
            Op::JsRows { p: Some(p), q: None, dp: dp.clone(), dq: dq.clone() },
        );
        let to_q = self.push_shared(shape, value, Op::JsRows { p: None, q: Some(q), dp, dq });
        Ok((to_p, to_q))
    }

    #[allow(clippy::type_complexity)]
    fn js_forward(&self, p: Var, q: Var, floor: f64) -> Result<(Vec<usize>, Rc<[f64]>, Rc<[f64]>, Rc<[f64]>)> {
        if self.shape(p) != self.shape(q) {
            return Err(AmadError::shape("js_divergence_rows", self.shape(p), self.shape(q)));
        }
        let n = self.last_axis_len(p, "js_divergence_rows")?;
        let (vp, vq) = (self.value(p), self.value(q));
        let mut dp = vec![0.0; vp.len()];
        let mut dq = vec![0.0; vq.len()];
        let mut out = Vec::with_capacity(vp.len() / n);
        for (r, (pr, qr)) in vp.chunks(n).zip(vq.chunks(n)).enumerate() {
            let mut total = 0.0;
            for (j, (&pi, &qi)) in pr.iter().zip(qr).enumerate() {
                let lm = crate::math::ln((0.5 * (pi + qi)).max(floor));
                let rp = 0.5 * (crate::math::ln(pi.max(floor)) - lm);
                let rq = 0.5 * (crate::math::ln(qi.max(floor)) - lm);
                if pi > 0.0 {
                    total += pi * rp;
                }
                if qi > 0.0 {
                    total += qi * rq;
                }
                dp[r * n + j] = rp;
                dq[r * n + j] = rq;
            }
            out.push(total);
        }
        let shape = self.shape(p)[..self.shape(p).len() - 1].to_vec();
        Ok((shape, Rc::from(out), Rc::from(dp), Rc::from(dq)))
    }

    /// Records a user-defined operation whose forward value has already been
    /// computed.
    pub fn custom(
        &mut self,
        inputs: &[Var],
        shape: Vec<usize>,
        value: Vec<f64>,
        op: Box<dyn CustomOp>,
    ) -> Result<Var> {
        if numel(&shape) != value.len() {
            return Err(AmadError::shape(op.name(), &shape, &[value.len()]));
        }
        Ok(self.push(
            shape,
            value,
            Op::Custom {
                inputs: inputs.to_vec(),
                op,
            },
        ))
    }

    fn last_axis_len(&self, x: Var, op: &'static str) -> Result<usize> {
        match self.shape(x).last() {
            Some(&n) if n >= 1 => Ok(n),
            _ => Err(AmadError::shape(op, self.shape(x), &[])),
        }
    }

    // ----- backward ----------------------------------------------------

    /// Accumulates `d loss / d p` into every parameter leaf reachable from
    /// `loss`.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.nodes[loss.0].value.len() != 1 {
            return Err(AmadError::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.nodes[loss.0].shape
            )));
        }
        let mut adj: Vec<Option<Vec<f64>>> = Vec::new();
        adj.resize_with(loss.0 + 1, || None);
        adj[loss.0] = Some(vec![1.0]);

        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = adj[i].take() else { continue };
            if let Op::Leaf = node.op {
                adj[i] = Some(g);
                continue;
            }
            self.propagate(i, &g, &mut adj);
        }

        for (i, a) in adj.into_iter().enumerate() {
            if let (Some(a), Some(grad)) = (a, self.nodes[i].grad.as_mut()) {
                grad.iter_mut().zip(&a).for_each(|(g, x)| *g += x);
            }
        }
        Ok(())
    }

    fn propagate(&self, i: usize, g: &[f64], adj: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        let y = &node.value;
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.accumulate(adj, *a, g.to_vec());
                if self.wants(*b) {
                    self.accumulate(adj, *b, fold_suffix(g, self.value(*b).len()));
                }
            }
            Op::Sub(a, b) => {
                self.accumulate(adj, *a, g.to_vec());
                if self.wants(*b) {
                    let mut gb = fold_suffix(g, self.value(*b).len());
                    gb.iter_mut().for_each(|x| *x = -*x);
                    self.accumulate(adj, *b, gb);
                }
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                let period = vb.len();
                if self.wants(*a) {
                    let ga = g.iter().enumerate().map(|(k, gk)| gk * vb[k % period]).collect();
                    self.accumulate(adj, *a, ga);
                }
                if self.wants(*b) {
                    let prod: Vec<f64> = g.iter().zip(va).map(|(gk, ak)| gk * ak).collect();
                    self.accumulate(adj, *b, fold_suffix(&prod, period));
                }
            }
            Op::Scale(a, k) => self.accumulate(adj, *a, g.iter().map(|x| x * k).collect()),
            Op::Exp(a) => self.accumulate(adj, *a, g.iter().zip(y.iter()).map(|(g, y)| g * y).collect()),
            Op::Log(a) => {
                let x = self.value(*a);
                self.accumulate(adj, *a, g.iter().zip(x).map(|(g, x)| g / x).collect());
            }
            Op::Gelu(a) => {
                let x = self.value(*a);
                let ga = g
                    .iter()
                    .zip(x)
                    .map(|(g, &x)| g * (std_normal_cdf(x) + x * std_normal_pdf(x)))
                    .collect();
                self.accumulate(adj, *a, ga);
            }
            Op::Sum(a) => self.accumulate(adj, *a, vec![g[0]; self.value(*a).len()]),
            Op::Mean(a) => {
                let n = self.value(*a).len();
                self.accumulate(adj, *a, vec![g[0] / n as f64; n]);
            }
            Op::FrobeniusSq(a) => {
                let ga = self.value(*a).iter().map(|x| 2.0 * x * g[0]).collect();
                self.accumulate(adj, *a, ga);
            }
            Op::L1Norm(a) => {
                let ga = self
                    .value(*a)
                    .iter()
                    .map(|&x| if x > 0.0 { g[0] } else if x < 0.0 { -g[0] } else { 0.0 })
                    .collect();
                self.accumulate(adj, *a, ga);
            }
            Op::MeanAxis { x, axis } => {
                let (outer, len, inner) = split_axis(self.shape(*x), *axis);
                let inv = 1.0 / len as f64;
                let mut gx = vec![0.0; outer * len * inner];
                for o in 0..outer {
                    let src = &g[o * inner..][..inner];
                    for l in 0..len {
                        let dst = &mut gx[(o * len + l) * inner..][..inner];
                        dst.iter_mut().zip(src).for_each(|(d, s)| *d = s * inv);
                    }
                }
                self.accumulate(adj, *x, gx);
            }
            Op::MatMul(a, b) => {
                let plan = MatMulPlan::new(self.shape(*a), self.shape(*b))
                    .expect("shapes validated in forward");
                let (va, vb) = (self.value(*a), self.value(*b));
                let (m, k, n) = (plan.m, plan.k, plan.n);
                if self.wants(*a) {
                    let mut ga = vec![0.0; va.len()];
                    for t in 0..plan.batch {
                        let (ab, bb) = (plan.a_block(t), plan.b_block(t));
                        mm_nt(
                            &g[t * m * n..][..m * n],
                            &vb[bb..bb + k * n],
                            &mut ga[ab..ab + m * k],
                            m,
                            n,
                            k,
                        );
                    }
                    self.accumulate(adj, *a, ga);
                }
                if self.wants(*b) {
                    let mut gb = vec![0.0; vb.len()];
                    for t in 0..plan.batch {
                        let (ab, bb) = (plan.a_block(t), plan.b_block(t));
                        mm_tn(
                            &va[ab..ab + m * k],
                            &g[t * m * n..][..m * n],
                            &mut gb[bb..bb + k * n],
                            m,
                            k,
                            n,
                        );
                    }
                    self.accumulate(adj, *b, gb);
                }
            }
            Op::Permute { x, axes } => {
                let mut inverse = vec![0; axes.len()];
                for (i, &a) in axes.iter().enumerate() {
                    inverse[a] = i;
                }
                let (gx, _) = permute_data(g, &node.shape, &inverse);
                self.accumulate(adj, *x, gx);
            }
            Op::Reshape(x) => self.accumulate(adj, *x, g.to_vec()),
            Op::ConcatLast(xs) => {
                let total = *node.shape.last().expect("concat output has an axis");
                let rows = g.len() / total;
                let mut offset = 0;
                for &x in xs {
                    let w = *self.shape(x).last().expect("concat input has an axis");
                    if self.wants(x) {
                        let mut gx = Vec::with_capacity(rows * w);
                        for r in 0..rows {
                            gx.extend_from_slice(&g[r * total + offset..][..w]);
                        }
                        self.accumulate(adj, x, gx);
                    }
                    offset += w;
                }
            }
            Op::Softmax(x) => {
                let n = *node.shape.last().expect("softmax has an axis");
                let mut gx = vec![0.0; g.len()];
                for ((gr, yr), dr) in g.chunks(n).zip(y.chunks(n)).zip(gx.chunks_mut(n)) {
                    let dot: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                    for j in 0..n {
                        dr[j] = yr[j] * (gr[j] - dot);
                    }
                }
                self.accumulate(adj, *x, gx);
            }
            Op::LogSoftmax(x) => {
                let n = *node.shape.last().expect("log-softmax has an axis");
                let mut gx = vec![0.0; g.len()];
                for ((gr, yr), dr) in g.chunks(n).zip(y.chunks(n)).zip(gx.chunks_mut(n)) {
                    let total: f64 = gr.iter().sum();
                    for j in 0..n {
                        dr[j] = gr[j] - crate::math::exp(yr[j]) * total;
                    }
                }
                self.accumulate(adj, *x, gx);
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                normed,
                rstd,
            } => {
                let n = *node.shape.last().expect("layer norm has an axis");
                let gm = self.value(*gamma);
                if self.wants(*beta) {
                    self.accumulate(adj, *beta, fold_suffix(g, n));
                }
                if self.wants(*gamma) {
                    let prod: Vec<f64> = g.iter().zip(normed).map(|(a, b)| a * b).collect();
                    self.accumulate(adj, *gamma, fold_suffix(&prod, n));
                }
                if self.wants(*x) {
                    let mut gx = vec![0.0; g.len()];
                    let nf = n as f64;
                    for (r, rs) in rstd.iter().enumerate() {
                        let gr = &g[r * n..][..n];
                        let xh = &normed[r * n..][..n];
                        let mut sum_d = 0.0;
                        let mut sum_dx = 0.0;
                        for j in 0..n {
                            let d = gr[j] * gm[j];
                            sum_d += d;
                            sum_dx += d * xh[j];
                        }
                        for j in 0..n {
                            let d = gr[j] * gm[j];
                            gx[r * n + j] = rs / nf * (nf * d - sum_d - xh[j] * sum_dx);
                        }
                    }
                    self.accumulate(adj, *x, gx);
                }
            }
            Op::JsRows { p, q, dp, dq } => {
                let n = dp.len() / g.len();
                for (side, d) in [(p, dp), (q, dq)] {
                    if let Some(v) = side.filter(|&v| self.wants(v)) {
                        let mut gv = vec![0.0; d.len()];
                        for (r, gr) in g.iter().enumerate() {
                            for j in r * n..(r + 1) * n {
                                gv[j] = gr * d[j];
                            }
                        }
                        self.accumulate(adj, v, gv);
                    }
                }
            }
            Op::Custom { inputs, op } => {
                let values: Vec<&[f64]> = inputs.iter().map(|&v| self.value(v)).collect();
                let grads = op.backward(&values, y, g);
                for (&v, gv) in inputs.iter().zip(grads) {
                    if self.wants(v) {
                        debug_assert_eq!(gv.len(), self.value(v).len(), "{} gradient size", op.name());
                        self.accumulate(adj, v, gv);
                    }
                }
            }
        }
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn accumulate(&self, adj: &mut [Option<Vec<f64>>], v: Var, g: Vec<f64>) {
        if !self.wants(v) {
            return;
        }
        match &mut adj[v.0] {
            Some(existing) => existing.iter_mut().zip(&g).for_each(|(e, x)| *e += x),
            slot @ None => *slot = Some(g),
        }
    }
}

struct MatMulPlan {
    batch: usize,
    m: usize,
    k: usize,
    n: usize,
    a_batched: bool,
    b_batched: bool,
    out_shape: Vec<usize>,
}

impl MatMulPlan {
    fn new(sa: &[usize], sb: &[usize]) -> Result<Self> {
        if sa.len() < 2 || sb.len() < 2 {
            return Err(AmadError::shape("matmul", sa, sb));
        }
        let (ra, rb) = (sa.len(), sb.len());
        let (m, k, kb, n) = (sa[ra - 2], sa[ra - 1], sb[rb - 2], sb[rb - 1]);
        if k != kb {
            return Err(AmadError::shape("matmul", sa, sb));
        }
        let (ba, bb) = (&sa[..ra - 2], &sb[..rb - 2]);
        let lead = if ba == bb || bb.is_empty() {
            ba
        } else if ba.is_empty() {
            bb
        } else {
            return Err(AmadError::shape("matmul", sa, sb));
        };
        let mut out_shape = lead.to_vec();
        out_shape.extend_from_slice(&[m, n]);
        Ok(MatMulPlan {
            batch: numel(lead),
            m,
            k,
            n,
            a_batched: !ba.is_empty(),
            b_batched: !bb.is_empty(),
            out_shape,
        })
    }

    fn a_block(&self, t: usize) -> usize {
        if self.a_batched {
            t * self.m * self.k
        } else {
            0
        }
    }

    fn b_block(&self, t: usize) -> usize {
        if self.b_batched {
            t * self.k * self.n
        } else {
            0
        }
    }
}

/// `out[m,n] += a[m,k] * b[k,n]`
fn mm_nn(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let row = &mut out[i * n..][..n];
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == 0.0 {
                continue;
            }
            let brow = &b[p * n..][..n];
            row.iter_mut().zip(brow).for_each(|(o, b)| *o += aip * b);
        }
    }
}

/// `out[m,k] += g[m,n] * b[k,n]^T`
fn mm_nt(g: &[f64], b: &[f64], out: &mut [f64], m: usize, n: usize, k: usize) {
    for i in 0..m {
        let grow = &g[i * n..][..n];
        for p in 0..k {
            let brow = &b[p * n..][..n];
            out[i * k + p] += grow.iter().zip(brow).map(|(x, y)| x * y).sum::<f64>();
        }
    }
}

/// `out[k,n] += a[m,k]^T * g[m,n]`
fn mm_tn(a: &[f64], g: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let grow = &g[i * n..][..n];
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == 0.0 {
                continue;
            }
            let orow = &mut out[p * n..][..n];
            orow.iter_mut().zip(grow).for_each(|(o, g)| *o += aip * g);
        }
    }
}

fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    (
        numel(&shape[..axis]),
        shape[axis],
        numel(&shape[axis + 1..]),
    )
}

/// Sums a buffer over repeats of its trailing `period` elements.
fn fold_suffix(g: &[f64], period: usize) -> Vec<f64> {
    let mut out = vec![0.0; period];
    for chunk in g.chunks(period) {
        out.iter_mut().zip(chunk).for_each(|(o, c)| *o += c);
    }
    out
}

fn permute_data(data: &[f64], shape: &[usize], axes: &[usize]) -> (Vec<f64>, Vec<usize>) {
    let rank = shape.len();
    let out_shape: Vec<usize> = axes.iter().map(|&a| shape[a]).collect();
    let mut in_strides = vec![1; rank];
    for i in (0..rank.saturating_sub(1)).rev() {
        in_strides[i] = in_strides[i + 1] * shape[i + 1];
    }
    let strides: Vec<usize> = axes.iter().map(|&a| in_strides[a]).collect();
    let mut out = Vec::with_capacity(data.len());
    let mut idx = vec![0usize; rank];
    let mut offset = 0usize;
    for _ in 0..data.len() {
        out.push(data[offset]);
        for ax in (0..rank).rev() {
            idx[ax] += 1;
            offset += strides[ax];
            if idx[ax] < out_shape[ax] {
                break;
            }
            offset -= strides[ax] * out_shape[ax];
            idx[ax] = 0;
        }
    }
    (out, out_shape)
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for r in row.iter_mut() {
        *r = crate::math::exp(*r - max);
        total += *r;
    }
    row.iter_mut().for_each(|r| *r /= total);
}

pub(crate) fn js_row(p: &[f64], q: &[f64], floor: f64) -> f64 {
    let mut total = 0.0;
    for (&pi, &qi) in p.iter().zip(q) {
        let lm = crate::math::ln((0.5 * (pi + qi)).max(floor));
        if pi > 0.0 {
            total += 0.5 * pi * (crate::math::ln(pi.max(floor)) - lm);
        }
        if qi > 0.0 {
            total += 0.5 * qi * (crate::math::ln(qi.max(floor)) - lm);
        }
    }
    total
}

fn std_normal_cdf(x: f64) -> f64 {
    0.5 * (1.0 + libm::erf(x * core::f64::consts::FRAC_1_SQRT_2))
}

fn std_normal_pdf(x: f64) -> f64 {
    const INV_SQRT_2PI: f64 = 0.398_942_280_401_432_7;
    INV_SQRT_2PI * crate::math::exp(-0.5 * x * x)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn matmul_examples() {
        let mut g = Graph::new();
        let a = g.constant(&t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]));
        let b = g.constant(&t(&[2, 2], &[3.0, 4.0, 5.0, 6.0]));
        let c = g.matmul(a, b).unwrap();
        assert_eq!(g.value(c), &[3.0, 4.0, 5.0, 6.0]);

        let a = g.constant(&t(&[1, 2], &[1.0, 2.0]));
        let b = g.constant(&t(&[2, 1], &[3.0, 4.0]));
        let c = g.matmul(a, b).unwrap();
        assert_eq!(g.value(c), &[11.0]);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let mut g = Graph::new();
        let a = g.constant(&Tensor::zeros([2, 3]));
        let b = g.constant(&Tensor::zeros([2, 3]));
        let err = g.matmul(a, b).unwrap_err();
        assert_eq!(
            err,
            AmadError::Shape {
                op: "matmul",
                lhs: vec![2, 3],
                rhs: vec![2, 3]
            }
        );
        let msg = alloc::string::ToString::to_string(&err);
        assert!(msg.contains("[2, 3]"));
    }

    #[test]
    fn softmax_examples() {
        let mut g = Graph::new();
        let x = g.constant(&t(&[2], &[0.0, 0.0]));
        let y = g.softmax_last_axis(x).unwrap();
        assert_eq!(g.value(y), &[0.5, 0.5]);

        let x = g.constant(&t(&[2], &[1000.0, 1000.0]));
        let y = g.softmax_last_axis(x).unwrap();
        assert_eq!(g.value(y), &[0.5, 0.5]);

        let x = g.constant(&t(&[3], &[0.0, crate::math::ln(2.0), crate::math::ln(3.0)]));
        let y = g.softmax_last_axis(x).unwrap();
        for (got, want) in g.value(y).iter().zip([1.0 / 6.0, 2.0 / 6.0, 3.0 / 6.0]) {
            assert!((got - want).abs() < 1e-15);
        }
    }

    #[test]
    fn softmax_rejects_nan() {
        let mut g = Graph::new();
        let x = g.constant(&t(&[2], &[f64::NAN, 0.0]));
        assert!(matches!(g.softmax_last_axis(x), Err(AmadError::Numeric(_))));
    }

    #[test]
    fn layer_norm_examples() {
        let mut g = Graph::new();
        let one3 = g.constant(&Tensor::full([3], 1.0));
        let zero3 = g.constant(&Tensor::zeros([3]));
        let x = g.constant(&Tensor::full([3], 1.0));
        let y = g.layer_norm(x, one3, zero3).unwrap();
        assert_eq!(g.value(y), &[0.0, 0.0, 0.0]);

        let one2 = g.constant(&Tensor::full([2], 1.0));
        let zero2 = g.constant(&Tensor::zeros([2]));
        let x = g.constant(&t(&[2], &[-1.0, 1.0]));
        let y = g.layer_norm(x, one2, zero2).unwrap();
        let expect = 1.0 / libm::sqrt(1.0 + LAYER_NORM_EPS);
        assert!((g.value(y)[0] + expect).abs() < 1e-15);
        assert!((g.value(y)[1] - expect).abs() < 1e-15);

        let five = g.constant(&Tensor::full([2], 5.0));
        let x = g.constant(&t(&[2], &[3.0, -7.0]));
        let y = g.layer_norm(x, zero2, five).unwrap();
        assert_eq!(g.value(y), &[5.0, 5.0]);
    }

    #[test]
    fn layer_norm_checks_gamma_shape() {
        let mut g = Graph::new();
        let x = g.constant(&Tensor::zeros([2, 3]));
        let gamma = g.constant(&Tensor::zeros([2]));
        let beta = g.constant(&Tensor::zeros([3]));
        assert!(g.layer_norm(x, gamma, beta).is_err());
    }

    #[test]
    fn gelu_examples() {
        let mut g = Graph::new();
        let x = g.constant(&t(&[3], &[0.0, 1.0, -10.0]));
        let y = g.gelu(x);
        let v = g.value(y);
        assert_eq!(v[0], 0.0);
        // Phi(1) = 0.841344746...
        assert!((v[1] - 0.841_344_746_068_542_9).abs() < 1e-12);
        assert!(v[2].abs() < 1e-8);
    }

    #[test]
    fn reductions_and_concat() {
        let mut g = Graph::new();
        let x = g.constant(&t(&[2, 2], &[1.0, 2.0, 2.0, 0.0]));
        let f = g.frobenius_sq(x);
        assert_eq!(g.scalar(f), 9.0);

        let parts: Vec<Var> = (0..4)
            .map(|i| g.constant(&Tensor::full([2, 5, 3], i as f64)))
            .collect();
        let c = g.concat_last_axis(&parts).unwrap();
        assert_eq!(g.shape(c), &[2, 5, 12]);
        assert_eq!(&g.value(c)[..6], &[0.0, 0.0, 0.0, 1.0, 1.0, 1.0]);
    }

    #[test]
    fn l1_subgradient() {
        let mut g = Graph::new();
        let x = g.param(&t(&[3], &[3.0, -2.0, 0.0]));
        let l = g.l1_norm(x);
        g.backward(l).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[1.0, -1.0, 0.0]);
    }

    #[test]
    fn detach_examples() {
        let mut g = Graph::new();
        let w = g.param(&t(&[1], &[2.0]));
        let d = g.detach(w);
        assert_eq!(g.value(d).as_ptr(), g.value(w).as_ptr());
        let p = g.mul(d, w).unwrap();
        let loss = g.sum(p);
        g.backward(loss).unwrap();
        assert_eq!(g.grad(w).unwrap(), &[2.0]);

        let mut g = Graph::new();
        let w = g.param(&t(&[1], &[2.0]));
        let d = g.detach(w);
        let loss = g.sum(d);
        g.backward(loss).unwrap();
        assert_eq!(g.grad(w).unwrap(), &[0.0]);
    }

    #[test]
    fn backward_examples_and_accumulation() {
        let mut g = Graph::new();
        let x = g.param(&Tensor::scalar(3.0));
        let y = g.mul(x, x).unwrap();
        g.backward(y).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[6.0]);
        g.backward(y).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[12.0]);
        g.zero_grad();
        assert_eq!(g.grad(x).unwrap(), &[0.0]);

        let z = g.param(&Tensor::scalar(0.0));
        let e = g.exp(z);
        g.backward(e).unwrap();
        assert_eq!(g.grad(z).unwrap(), &[1.0]);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut g = Graph::new();
        let x = g.param(&Tensor::zeros([2]));
        assert!(matches!(g.backward(x), Err(AmadError::Contract(_))));
    }

    #[test]
    fn permute_roundtrip() {
        let mut g = Graph::new();
        let data: Vec<f64> = (0..24).map(|i| i as f64).collect();
        let x = g.constant(&t(&[2, 3, 4], &data));
        let y = g.permute(x, &[2, 0, 1]).unwrap();
        assert_eq!(g.shape(y), &[4, 2, 3]);
        // y[i,j,k] = x[j,k,i]
        assert_eq!(g.tensor(y).at(&[3, 1, 2]), g.tensor(x).at(&[1, 2, 3]));
        let z = g.permute(y, &[1, 2, 0]).unwrap();
        assert_eq!(g.value(z), g.value(x));
    }

    #[test]
    fn js_rows_matches_reference_values() {
        let mut g = Graph::new();
        let p = g.constant(&t(&[3, 2], &[0.5, 0.5, 1.0, 0.0, 0.75, 0.25]));
        let q = g.constant(&t(&[3, 2], &[0.5, 0.5, 0.0, 1.0, 0.25, 0.75]));
        let js = g.js_divergence_rows(p, q, 1e-12).unwrap();
        let v = g.value(js);
        assert_eq!(v[0], 0.0);
        assert!((v[1] - core::f64::consts::LN_2).abs() < 1e-15);
        assert!((v[2] - 0.130_812_035_941_137_7).abs() < 1e-12);
    }
}
