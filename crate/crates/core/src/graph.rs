//! Reverse-mode automatic differentiation on a tape of tensor operations.
//!
//! Values are computed eagerly as nodes are appended; `grad_vars` walks the
//! tape backwards and emits each operation's vector-Jacobian product *as new
//! tape operations*. Because adjoints are themselves differentiable nodes,
//! gradients of gradients (needed when unrolling inner-loop updates) come for
//! free. Accumulation order is fixed by node index, so gradient evaluation is
//! bit-deterministic.

use crate::error::{CoreError, Result};
use crate::tensor::{
    kernel_flip_swap, spatial_conv, spatial_conv_w_grad, temporal_conv, temporal_conv_kernel_grad,
    Tensor,
};

/// Handle to a node on the tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Clone, Debug)]
enum Op {
    Input,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Div(usize, usize),
    Neg(usize),
    Scale(usize, f64),
    Offset(usize),
    Reshape(usize),
    Transpose(usize),
    MatMul(usize, usize),
    SpatialConv { x: usize, adj: usize, w: usize },
    SpatialConvWGrad { x: usize, adj: usize, g: usize },
    TemporalConv { x: usize, kernel: usize },
    TemporalConvKGrad { x: usize, g: usize },
    KernelFlipSwap(usize),
    Relu(usize),
    Sigmoid(usize),
    Softplus(usize),
    Exp(usize),
    Ln(usize),
    Sqrt(usize),
    Sum(usize),
    SumAxes { x: usize, axes: Vec<usize> },
    Broadcast { x: usize, axes: Vec<usize> },
    Dot(usize, usize),
    LogSumExp(Vec<usize>),
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Computation tape. Append-only; values are immutable once recorded.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

impl Graph {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    fn req(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> Result<f64> {
        self.nodes[v.0].value.scalar_value()
    }

    /// Leaf that participates in differentiation.
    pub fn input(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Input, true)
    }

    /// Leaf treated as a constant.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Input, false)
    }

    pub fn constant_scalar(&mut self, value: f64) -> Var {
        self.constant(Tensor::scalar(value))
    }

    // -- elementwise ------------------------------------------------------

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).add(self.value(b))?;
        let rg = self.req(a) || self.req(b);
        Ok(self.push(value, Op::Add(a.0, b.0), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).sub(self.value(b))?;
        let rg = self.req(a) || self.req(b);
        Ok(self.push(value, Op::Sub(a.0, b.0), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).mul(self.value(b))?;
        let rg = self.req(a) || self.req(b);
        Ok(self.push(value, Op::Mul(a.0, b.0), rg))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).div(self.value(b))?;
        let rg = self.req(a) || self.req(b);
        Ok(self.push(value, Op::Div(a.0, b.0), rg))
    }

    pub fn neg(&mut self, a: Var) -> Var {
        let value = self.value(a).neg();
        let rg = self.req(a);
        self.push(value, Op::Neg(a.0), rg)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let value = self.value(a).scale(c);
        let rg = self.req(a);
        self.push(value, Op::Scale(a.0, c), rg)
    }

    pub fn offset(&mut self, a: Var, c: f64) -> Var {
        let value = self.value(a).map(|v| v + c);
        let rg = self.req(a);
        self.push(value, Op::Offset(a.0), rg)
    }

    // -- structure --------------------------------------------------------

    pub fn reshape(&mut self, a: Var, shape: Vec<usize>) -> Result<Var> {
        let value = self.value(a).reshaped(shape)?;
        let rg = self.req(a);
        Ok(self.push(value, Op::Reshape(a.0), rg))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let value = self.value(a).transpose2()?;
        let rg = self.req(a);
        Ok(self.push(value, Op::Transpose(a.0), rg))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).matmul(self.value(b))?;
        let rg = self.req(a) || self.req(b);
        Ok(self.push(value, Op::MatMul(a.0, b.0), rg))
    }

    /// Graph convolution step: per time point, adj @ x @ w.
    /// Gradients with respect to the adjacency are not supported; pass it as
    /// a constant.
    pub fn spatial_conv(&mut self, x: Var, adj: Var, w: Var) -> Result<Var> {
        if self.req(adj) {
            return Err(CoreError::Config(
                "spatial_conv: adjacency must be a constant".into(),
            ));
        }
        let value = spatial_conv(self.value(x), self.value(adj), self.value(w))?;
        let rg = self.req(x) || self.req(w);
        Ok(self.push(value, Op::SpatialConv { x: x.0, adj: adj.0, w: w.0 }, rg))
    }

    fn spatial_conv_w_grad(&mut self, x: Var, adj: Var, g: Var) -> Result<Var> {
        let value = spatial_conv_w_grad(self.value(x), self.value(adj), self.value(g))?;
        let rg = self.req(x) || self.req(g);
        Ok(self.push(value, Op::SpatialConvWGrad { x: x.0, adj: adj.0, g: g.0 }, rg))
    }

    /// Per-node temporal convolution, zero same-padding, stride 1, no bias.
    pub fn temporal_conv(&mut self, x: Var, kernel: Var) -> Result<Var> {
        let value = temporal_conv(self.value(x), self.value(kernel))?;
        let rg = self.req(x) || self.req(kernel);
        Ok(self.push(value, Op::TemporalConv { x: x.0, kernel: kernel.0 }, rg))
    }

    fn temporal_conv_k_grad(&mut self, x: Var, g: Var, taps: usize) -> Result<Var> {
        let value = temporal_conv_kernel_grad(self.value(x), self.value(g), taps)?;
        let rg = self.req(x) || self.req(g);
        Ok(self.push(value, Op::TemporalConvKGrad { x: x.0, g: g.0 }, rg))
    }

    fn kernel_flip_swap(&mut self, k: Var) -> Result<Var> {
        let value = kernel_flip_swap(self.value(k))?;
        let rg = self.req(k);
        Ok(self.push(value, Op::KernelFlipSwap(k.0), rg))
    }

    // -- nonlinearities ----------------------------------------------------

    pub fn relu(&mut self, a: Var) -> Var {
        let value = self.value(a).map(|v| if v > 0.0 { v } else { 0.0 });
        let rg = self.req(a);
        self.push(value, Op::Relu(a.0), rg)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let value = self.value(a).map(stable_sigmoid);
        let rg = self.req(a);
        self.push(value, Op::Sigmoid(a.0), rg)
    }

    /// ln(1 + exp(x)) computed without overflow.
    pub fn softplus(&mut self, a: Var) -> Var {
        let value = self.value(a).map(|v| v.max(0.0) + (-v.abs()).exp().ln_1p());
        let rg = self.req(a);
        self.push(value, Op::Softplus(a.0), rg)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let value = self.value(a).map(f64::exp);
        let rg = self.req(a);
        self.push(value, Op::Exp(a.0), rg)
    }

    pub fn ln(&mut self, a: Var) -> Var {
        let value = self.value(a).map(f64::ln);
        let rg = self.req(a);
        self.push(value, Op::Ln(a.0), rg)
    }

    pub fn sqrt(&mut self, a: Var) -> Var {
        let value = self.value(a).map(f64::sqrt);
        let rg = self.req(a);
        self.push(value, Op::Sqrt(a.0), rg)
    }

    // -- reductions --------------------------------------------------------

    /// Sum of all elements -> scalar.
    pub fn sum(&mut self, a: Var) -> Var {
        let value = Tensor::scalar(self.value(a).sum());
        let rg = self.req(a);
        self.push(value, Op::Sum(a.0), rg)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).len() as f64;
        let s = self.sum(a);
        self.scale(s, 1.0 / n)
    }

    pub fn sum_axes(&mut self, a: Var, axes: &[usize]) -> Result<Var> {
        let value = self.value(a).sum_axes(axes)?;
        let rg = self.req(a);
        Ok(self.push(value, Op::SumAxes { x: a.0, axes: axes.to_vec() }, rg))
    }

    pub fn broadcast_axes(&mut self, a: Var, target_shape: &[usize], axes: &[usize]) -> Result<Var> {
        let value = self.value(a).broadcast_axes(target_shape, axes)?;
        let rg = self.req(a);
        Ok(self.push(value, Op::Broadcast { x: a.0, axes: axes.to_vec() }, rg))
    }

    pub fn dot(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = Tensor::scalar(self.value(a).dot(self.value(b))?);
        let rg = self.req(a) || self.req(b);
        Ok(self.push(value, Op::Dot(a.0, b.0), rg))
    }

    /// L2 norm of a vector (composite: sqrt of the self dot product).
    pub fn norm2(&mut self, a: Var) -> Result<Var> {
        let d = self.dot(a, a)?;
        Ok(self.sqrt(d))
    }

    /// Cosine similarity between two vectors (composite).
    /// Errors when either vector has zero norm.
    pub fn cosine_sim(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.value(a).norm2() == 0.0 || self.value(b).norm2() == 0.0 {
            return Err(CoreError::Degenerate(
                "cosine similarity of a zero-norm embedding".into(),
            ));
        }
        let num = self.dot(a, b)?;
        let na = self.norm2(a)?;
        let nb = self.norm2(b)?;
        let den = self.mul(na, nb)?;
        self.div(num, den)
    }

    /// Stabilized log-sum-exp over scalar inputs: m + ln(sum exp(x - m)),
    /// with m = max(x) treated as a constant shift (the derivative is exact
    /// regardless of the shift).
    pub fn log_sum_exp(&mut self, xs: &[Var]) -> Result<Var> {
        if xs.is_empty() {
            return Err(CoreError::Batch("log_sum_exp over an empty set".into()));
        }
        let mut m = f64::NEG_INFINITY;
        for &x in xs {
            m = m.max(self.scalar(x)?);
        }
        let mut acc = 0.0;
        for &x in xs {
            acc += (self.scalar(x)? - m).exp();
        }
        let value = Tensor::scalar(m + acc.ln());
        let rg = xs.iter().any(|&x| self.req(x));
        Ok(self.push(value, Op::LogSumExp(xs.iter().map(|v| v.0).collect()), rg))
    }

    // -- differentiation ----------------------------------------------------

    /// Reduce `g` back to the shape of the (possibly scalar-broadcast) operand.
    fn reduce_like(&mut self, g: Var, target: Var) -> Result<Var> {
        let gshape = self.value(g).shape().to_vec();
        let tshape = self.value(target).shape().to_vec();
        if gshape == tshape {
            Ok(g)
        } else if self.value(target).is_scalar() {
            let s = self.sum(g);
            self.reshape(s, tshape)
        } else {
            Err(CoreError::shape(
                "reduce_like",
                format!("{:?} vs {:?}", gshape, tshape),
            ))
        }
    }

    /// Vector-Jacobian products of node `n` given upstream adjoint `g`.
    /// Only parents that require gradients receive contributions.
    fn vjp(&mut self, n: usize, g: Var) -> Result<Vec<(usize, Var)>> {
        let op = self.nodes[n].op.clone();
        let mut out = Vec::new();
        macro_rules! want {
            ($p:expr) => {
                self.nodes[$p].requires_grad
            };
        }
        match op {
            Op::Input => {}
            Op::Add(a, b) => {
                if want!(a) {
                    let ga = self.reduce_like(g, Var(a))?;
                    out.push((a, ga));
                }
                if want!(b) {
                    let gb = self.reduce_like(g, Var(b))?;
                    out.push((b, gb));
                }
            }
            Op::Sub(a, b) => {
                if want!(a) {
                    let ga = self.reduce_like(g, Var(a))?;
                    out.push((a, ga));
                }
                if want!(b) {
                    let gn = self.neg(g);
                    let gb = self.reduce_like(gn, Var(b))?;
                    out.push((b, gb));
                }
            }
            Op::Mul(a, b) => {
                if want!(a) {
                    let t = self.mul(g, Var(b))?;
                    let ga = self.reduce_like(t, Var(a))?;
                    out.push((a, ga));
                }
                if want!(b) {
                    let t = self.mul(g, Var(a))?;
                    let gb = self.reduce_like(t, Var(b))?;
                    out.push((b, gb));
                }
            }
            Op::Div(a, b) => {
                if want!(a) {
                    let t = self.div(g, Var(b))?;
                    let ga = self.reduce_like(t, Var(a))?;
                    out.push((a, ga));
                }
                if want!(b) {
                    // d(a/b)/db = -a / b^2
                    let num = self.mul(g, Var(a))?;
                    let bb = self.mul(Var(b), Var(b))?;
                    let t = self.div(num, bb)?;
                    let t = self.neg(t);
                    let gb = self.reduce_like(t, Var(b))?;
                    out.push((b, gb));
                }
            }
            Op::Neg(a) => {
                if want!(a) {
                    let ga = self.neg(g);
                    out.push((a, ga));
                }
            }
            Op::Scale(a, c) => {
                if want!(a) {
                    let ga = self.scale(g, c);
                    out.push((a, ga));
                }
            }
            Op::Offset(a) | Op::Reshape(a) => {
                if want!(a) {
                    let shape = self.value(Var(a)).shape().to_vec();
                    let ga = self.reshape(g, shape)?;
                    out.push((a, ga));
                }
            }
            Op::Transpose(a) => {
                if want!(a) {
                    let ga = self.transpose(g)?;
                    out.push((a, ga));
                }
            }
            Op::MatMul(a, b) => {
                if want!(a) {
                    let bt = self.transpose(Var(b))?;
                    let ga = self.matmul(g, bt)?;
                    out.push((a, ga));
                }
                if want!(b) {
                    let at = self.transpose(Var(a))?;
                    let gb = self.matmul(at, g)?;
                    out.push((b, gb));
                }
            }
            Op::SpatialConv { x, adj, w } => {
                if want!(x) {
                    let at = self.transpose(Var(adj))?;
                    let wt = self.transpose(Var(w))?;
                    let gx = self.spatial_conv(g, at, wt)?;
                    out.push((x, gx));
                }
                if want!(w) {
                    let gw = self.spatial_conv_w_grad(Var(x), Var(adj), g)?;
                    out.push((w, gw));
                }
            }
            Op::SpatialConvWGrad { x, adj, g: gin } => {
                // Trilinear closure: d/dx = conv(gin, adj^T, upstream^T),
                // d/dgin = conv(x, adj, upstream).
                if want!(x) {
                    let at = self.transpose(Var(adj))?;
                    let ut = self.transpose(g)?;
                    let gx = self.spatial_conv(Var(gin), at, ut)?;
                    out.push((x, gx));
                }
                if want!(gin) {
                    let gg = self.spatial_conv(Var(x), Var(adj), g)?;
                    out.push((gin, gg));
                }
            }
            Op::TemporalConv { x, kernel } => {
                if want!(x) {
                    let kf = self.kernel_flip_swap(Var(kernel))?;
                    let gx = self.temporal_conv(g, kf)?;
                    out.push((x, gx));
                }
                if want!(kernel) {
                    let taps = self.value(Var(kernel)).shape()[0];
                    let gk = self.temporal_conv_k_grad(Var(x), g, taps)?;
                    out.push((kernel, gk));
                }
            }
            Op::TemporalConvKGrad { x, g: gin } => {
                if want!(x) {
                    let uf = self.kernel_flip_swap(g)?;
                    let gx = self.temporal_conv(Var(gin), uf)?;
                    out.push((x, gx));
                }
                if want!(gin) {
                    let gg = self.temporal_conv(Var(x), g)?;
                    out.push((gin, gg));
                }
            }
            Op::KernelFlipSwap(k) => {
                if want!(k) {
                    let gk = self.kernel_flip_swap(g)?;
                    out.push((k, gk));
                }
            }
            Op::Relu(a) => {
                if want!(a) {
                    let mask = self.value(Var(a)).map(|v| if v > 0.0 { 1.0 } else { 0.0 });
                    let m = self.constant(mask);
                    let ga = self.mul(g, m)?;
                    out.push((a, ga));
                }
            }
            Op::Sigmoid(a) => {
                if want!(a) {
                    let y = Var(n);
                    let ny = self.neg(y);
                    let om = self.offset(ny, 1.0);
                    let t = self.mul(g, y)?;
                    let ga = self.mul(t, om)?;
                    out.push((a, ga));
                }
            }
            Op::Softplus(a) => {
                if want!(a) {
                    let s = self.sigmoid(Var(a));
                    let ga = self.mul(g, s)?;
                    out.push((a, ga));
                }
            }
            Op::Exp(a) => {
                if want!(a) {
                    let ga = self.mul(g, Var(n))?;
                    out.push((a, ga));
                }
            }
            Op::Ln(a) => {
                if want!(a) {
                    let ga = self.div(g, Var(a))?;
                    out.push((a, ga));
                }
            }
            Op::Sqrt(a) => {
                if want!(a) {
                    let h = self.scale(g, 0.5);
                    let ga = self.div(h, Var(n))?;
                    out.push((a, ga));
                }
            }
            Op::Sum(a) => {
                if want!(a) {
                    let shape = self.value(Var(a)).shape().to_vec();
                    let axes: Vec<usize> = (0..shape.len()).collect();
                    let g0 = self.reshape(g, vec![])?;
                    let ga = self.broadcast_axes(g0, &shape, &axes)?;
                    out.push((a, ga));
                }
            }
            Op::SumAxes { x, axes } => {
                if want!(x) {
                    let shape = self.value(Var(x)).shape().to_vec();
                    let ga = self.broadcast_axes(g, &shape, &axes)?;
                    out.push((x, ga));
                }
            }
            Op::Broadcast { x, axes } => {
                if want!(x) {
                    let ga = self.sum_axes(g, &axes)?;
                    out.push((x, ga));
                }
            }
            Op::Dot(a, b) => {
                if want!(a) {
                    let ga = self.mul(g, Var(b))?;
                    out.push((a, ga));
                }
                if want!(b) {
                    let gb = self.mul(g, Var(a))?;
                    out.push((b, gb));
                }
            }
            Op::LogSumExp(xs) => {
                let y = Var(n);
                for x in xs {
                    if want!(x) {
                        // softmax weight exp(x - y)
                        let d = self.sub(Var(x), y)?;
                        let w = self.exp(d);
                        let gx = self.mul(g, w)?;
                        out.push((x, gx));
                    }
                }
            }
        }
        Ok(out)
    }

    /// Gradients of a scalar `loss` with respect to `wrt`, returned as graph
    /// variables (zero constants for unreachable leaves). The returned vars
    /// may themselves be differentiated again.
    pub fn grad_vars(&mut self, loss: Var, wrt: &[Var]) -> Result<Vec<Var>> {
        let lv = self.scalar(loss)?;
        if !lv.is_finite() {
            return Err(CoreError::NonFinite {
                path: "loss".into(),
                detail: format!("loss evaluated to {}", lv),
            });
        }
        let top = loss.0;
        let mut adjoint: Vec<Option<Var>> = vec![None; top + 1];
        let seed = self.constant_scalar(1.0);
        let seed = self.reshape(seed, self.value(loss).shape().to_vec())?;
        adjoint[top] = Some(seed);
        for i in (0..=top).rev() {
            let Some(g) = adjoint[i] else { continue };
            if !self.nodes[i].requires_grad {
                continue;
            }
            for (parent, contribution) in self.vjp(i, g)? {
                adjoint[parent] = Some(match adjoint[parent] {
                    None => contribution,
                    Some(prev) => self.add(prev, contribution)?,
                });
            }
        }
        let mut grads = Vec::with_capacity(wrt.len());
        for &v in wrt {
            match adjoint.get(v.0).copied().flatten() {
                Some(g) => grads.push(g),
                None => {
                    let z = Tensor::zeros(self.value(v).shape().to_vec());
                    let zv = self.constant(z);
                    grads.push(zv);
                }
            }
        }
        Ok(grads)
    }

    /// Gradients of a scalar `loss` as plain tensors, with finiteness checks.
    /// `names` labels each wrt entry in error messages.
    pub fn grad_tensors(&mut self, loss: Var, wrt: &[Var], names: &[&str]) -> Result<Vec<Tensor>> {
        let vars = self.grad_vars(loss, wrt)?;
        let mut out = Vec::with_capacity(vars.len());
        for (i, v) in vars.iter().enumerate() {
            let t = self.value(*v).clone();
            if !t.all_finite() {
                return Err(CoreError::NonFinite {
                    path: names.get(i).unwrap_or(&"<unnamed>").to_string(),
                    detail: "gradient contains NaN or Inf".into(),
                });
            }
            out.push(t);
        }
        Ok(out)
    }
}

fn stable_sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}
