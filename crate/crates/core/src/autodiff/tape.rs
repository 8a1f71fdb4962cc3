use std::cell::RefCell;

use super::conv::{self, ConvDims};
use super::tensor::{broadcast_shape, broadcast_strides, for_each_broadcast, reduce_to_shape, Tensor};
use crate::error::{Error, Result};

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Constant,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Div(usize, usize),
    Neg(usize),
    Scale(usize, f64),
    AddScalar(usize),
    Exp(usize),
    Log(usize),
    Sin(usize),
    Cos(usize),
    Tan(usize),
    Atan(usize),
    Tanh(usize),
    Wrap(usize),
    Sum(usize),
    Mean(usize),
    SumAxis(usize, usize),
    Reshape(usize),
    BroadcastTo(usize),
    Slice { input: usize, axis: usize, start: usize },
    Concat { inputs: Vec<usize>, axis: usize },
    Roll { input: usize, axis: usize, shift: isize },
    MatMul(usize, usize),
    Conv2d { input: usize, kernel: usize, bias: Option<usize> },
    NcpShift(usize, usize),
    NcpLogJac(usize, usize),
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Constant => "constant",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Div(..) => "div",
            Op::Neg(_) => "neg",
            Op::Scale(..) => "scale",
            Op::AddScalar(..) => "add_scalar",
            Op::Exp(_) => "exp",
            Op::Log(_) => "log",
            Op::Sin(_) => "sin",
            Op::Cos(_) => "cos",
            Op::Tan(_) => "tan",
            Op::Atan(_) => "arctan",
            Op::Tanh(_) => "tanh",
            Op::Wrap(_) => "wrap",
            Op::Sum(_) => "sum",
            Op::Mean(_) => "mean",
            Op::SumAxis(..) => "sum_axis",
            Op::Reshape(_) => "reshape",
            Op::BroadcastTo(_) => "broadcast_to",
            Op::Slice { .. } => "slice",
            Op::Concat { .. } => "concat",
            Op::Roll { .. } => "roll",
            Op::MatMul(..) => "matmul",
            Op::Conv2d { .. } => "conv2d_periodic",
            Op::NcpShift(..) => "ncp_shift",
            Op::NcpLogJac(..) => "ncp_log_jacobian",
        }
    }
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

#[derive(Default)]
struct Inner {
    nodes: Vec<Node>,
    /// Node count at the last backward pass.
    last_backward: Option<usize>,
}

/// Define-by-run record of tensor operations.
///
/// Build a fresh tape for every forward pass; [`Tape::backward`] may be
/// called once per recorded forward.
#[derive(Default)]
pub struct Tape {
    inner: RefCell<Inner>,
}

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Var").field("id", &self.id).field("shape", &self.shape()).finish()
    }
}

/// Gradients of one backward pass, indexed by node.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    pub fn get(&self, v: Var<'_>) -> Option<&Tensor> {
        self.grads.get(v.id).and_then(|g| g.as_ref())
    }

    /// Gradient with respect to `v`, zeros if `v` does not influence the loss.
    pub fn wrt(&self, v: Var<'_>) -> Tensor {
        self.get(v).cloned().unwrap_or_else(|| Tensor::zeros(&self.shapes[v.id]))
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.inner.borrow().nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: Tensor, op: Op, requires_grad: bool) -> Var<'_> {
        let mut inner = self.inner.borrow_mut();
        inner.nodes.push(Node { value, op, requires_grad });
        Var {
            tape: self,
            id: inner.nodes.len() - 1,
        }
    }

    /// Differentiable input.
    pub fn leaf(&self, value: Tensor) -> Var<'_> {
        self.push(value, Op::Leaf, true)
    }

    /// Input that receives no gradient.
    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.push(value, Op::Constant, false)
    }

    pub fn scalar(&self, value: f64) -> Var<'_> {
        self.constant(Tensor::scalar(value))
    }

    /// Concatenate along `axis`; all other dimensions must agree.
    pub fn concat<'t>(&'t self, parts: &[Var<'t>], axis: usize) -> Result<Var<'t>> {
        let inner = self.inner.borrow();
        let first = parts.first().ok_or_else(|| Error::Autodiff("concat of zero tensors".into()))?;
        let shape0 = inner.nodes[first.id].value.shape().to_vec();
        if axis >= shape0.len() {
            return Err(Error::Autodiff(format!("concat axis {axis} out of range for {shape0:?}")));
        }
        let mut total = 0;
        for p in parts {
            let s = inner.nodes[p.id].value.shape();
            let compatible = s.len() == shape0.len() && (0..s.len()).all(|d| d == axis || s[d] == shape0[d]);
            if !compatible {
                return Err(Error::Shape {
                    op: "concat",
                    lhs: shape0,
                    rhs: s.to_vec(),
                });
            }
            total += s[axis];
        }
        let outer: usize = shape0[..axis].iter().product();
        let inner_len: usize = shape0[axis + 1..].iter().product();
        let mut out_shape = shape0.clone();
        out_shape[axis] = total;
        let mut data = Vec::with_capacity(outer * total * inner_len);
        for o in 0..outer {
            for p in parts {
                let v = &inner.nodes[p.id].value;
                let n = v.shape()[axis] * inner_len;
                data.extend_from_slice(&v.data()[o * n..(o + 1) * n]);
            }
        }
        let rg = parts.iter().any(|p| inner.nodes[p.id].requires_grad);
        let ids = parts.iter().map(|p| p.id).collect();
        drop(inner);
        Ok(self.push(Tensor::from_parts(out_shape, data), Op::Concat { inputs: ids, axis }, rg))
    }

    /// Reverse sweep from the scalar `loss`.
    pub fn backward(&self, loss: Var<'_>) -> Result<Gradients> {
        let mut inner = self.inner.borrow_mut();
        let n = inner.nodes.len();
        if inner.last_backward == Some(n) {
            return Err(Error::Autodiff(
                "backward called twice without recording a new forward pass".into(),
            ));
        }
        if inner.nodes[loss.id].value.len() != 1 {
            return Err(Error::Autodiff(format!(
                "backward needs a scalar loss, got shape {:?}",
                inner.nodes[loss.id].value.shape()
            )));
        }
        inner.last_backward = Some(n);
        let nodes = &inner.nodes;
        let mut grads: Vec<Option<Tensor>> = vec![None; n];
        grads[loss.id] = Some(Tensor::full(nodes[loss.id].value.shape(), 1.0));
        for id in (0..=loss.id).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &nodes[id];
            if !g.is_finite() || !node.value.is_finite() {
                return Err(Error::NonFinite { op: node.op.name(), node: id });
            }
            if matches!(node.op, Op::Leaf) {
                grads[id] = Some(g);
                continue;
            }
            for (parent, contrib) in local_grads(nodes, id, &g) {
                if !nodes[parent].requires_grad {
                    continue;
                }
                match &mut grads[parent] {
                    Some(acc) => acc.add_assign(&contrib),
                    slot @ None => *slot = Some(contrib),
                }
            }
        }
        let shapes = nodes.iter().map(|nd| nd.value.shape().to_vec()).collect();
        Ok(Gradients { grads, shapes })
    }
}

fn val(nodes: &[Node], id: usize) -> &Tensor {
    &nodes[id].value
}

fn map_grad(g: &Tensor, x: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    Tensor::from_parts(g.shape().to_vec(), g.data().iter().zip(x.data()).map(|(&g, &x)| f(g, x)).collect())
}

/// Broadcast-aware product `g * other` reduced to `target` shape.
fn bcast_product(g: &Tensor, other: &Tensor, target: &[usize], f: impl Fn(f64, f64) -> f64) -> Tensor {
    let so = broadcast_strides(other.shape(), g.shape());
    let zero = vec![0; g.rank()];
    let mut full = vec![0.0; g.len()];
    let (gd, od) = (g.data(), other.data());
    for_each_broadcast(g.shape(), &so, &zero, |k, i, _| full[k] = f(gd[k], od[i]));
    reduce_to_shape(&Tensor::from_parts(g.shape().to_vec(), full), target)
}

fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    (shape[..axis].iter().product(), shape[axis], shape[axis + 1..].iter().product())
}

fn roll_data(x: &Tensor, axis: usize, shift: isize) -> Vec<f64> {
    let (outer, n, inner) = axis_split(x.shape(), axis);
    let d = x.data();
    let mut out = vec![0.0; d.len()];
    for o in 0..outer {
        for i in 0..n {
            let src = (i as isize - shift).rem_euclid(n as isize) as usize;
            out[(o * n + i) * inner..(o * n + i + 1) * inner]
                .copy_from_slice(&d[(o * n + src) * inner..(o * n + src + 1) * inner]);
        }
    }
    out
}

fn conv_dims(input: &Tensor, kernel: &Tensor) -> ConvDims {
    let s = input.shape();
    let (batch, c_in, h, w) = if s.len() == 3 { (1, s[0], s[1], s[2]) } else { (s[0], s[1], s[2], s[3]) };
    ConvDims {
        batch,
        c_in,
        c_out: kernel.shape()[0],
        h,
        w,
        k: kernel.shape()[2],
    }
}

struct Ncp {
    e: f64,
    em1: f64,
    e2m1: f64,
    sin_half: f64,
    cos_half: f64,
    /// cos^2 + e^{2s} sin^2 of the half angle
    denom: f64,
}

impl Ncp {
    #[inline]
    fn new(theta: f64, s: f64) -> Self {
        let (sin_half, cos_half) = (0.5 * theta).sin_cos();
        let e2m1 = (2.0 * s).exp_m1();
        Self {
            e: s.exp(),
            em1: s.exp_m1(),
            e2m1,
            sin_half,
            cos_half,
            denom: 1.0 + e2m1 * sin_half * sin_half,
        }
    }

    #[inline]
    fn shift(&self) -> f64 {
        let re = self.cos_half * self.cos_half + self.e * self.sin_half * self.sin_half;
        2.0 * (self.em1 * self.sin_half * self.cos_half / re).atan()
    }

    #[inline]
    fn log_jac(&self, s: f64) -> f64 {
        s - (self.e2m1 * self.sin_half * self.sin_half).ln_1p()
    }

    #[inline]
    fn d_shift(&self) -> (f64, f64) {
        let sh2 = self.sin_half * self.sin_half;
        let ch2 = self.cos_half * self.cos_half;
        let d_theta = self.em1 * (ch2 - self.e * sh2) / self.denom;
        let d_s = 2.0 * self.e * self.sin_half * self.cos_half / self.denom;
        (d_theta, d_s)
    }

    #[inline]
    fn d_log_jac(&self) -> (f64, f64) {
        let sin_theta = 2.0 * self.sin_half * self.cos_half;
        let d_theta = -self.e2m1 * sin_theta / (2.0 * self.denom);
        let d_s = 1.0 - 2.0 * self.e * self.e * self.sin_half * self.sin_half / self.denom;
        (d_theta, d_s)
    }
}

/// Shift `delta(theta; s)` such that `theta + delta` is the non-compact
/// projection map `2 atan(e^s tan(theta / 2))`, continued smoothly and
/// 2pi-periodically to all of R.
pub fn ncp_shift(theta: f64, s: f64) -> f64 {
    Ncp::new(theta, s).shift()
}

/// `log d(theta + delta)/d theta = s - log(cos^2(theta/2) + e^{2s} sin^2(theta/2))`.
pub fn ncp_log_jacobian(theta: f64, s: f64) -> f64 {
    Ncp::new(theta, s).log_jac(s)
}

fn local_grads(nodes: &[Node], id: usize, g: &Tensor) -> Vec<(usize, Tensor)> {
    let out = &nodes[id].value;
    match &nodes[id].op {
        Op::Leaf | Op::Constant => vec![],
        Op::Add(a, b) => vec![
            (*a, reduce_to_shape(g, val(nodes, *a).shape())),
            (*b, reduce_to_shape(g, val(nodes, *b).shape())),
        ],
        Op::Sub(a, b) => vec![
            (*a, reduce_to_shape(g, val(nodes, *a).shape())),
            (*b, reduce_to_shape(&g.map(|x| -x), val(nodes, *b).shape())),
        ],
        Op::Mul(a, b) => {
            let (va, vb) = (val(nodes, *a), val(nodes, *b));
            vec![
                (*a, bcast_product(g, vb, va.shape(), |g, y| g * y)),
                (*b, bcast_product(g, va, vb.shape(), |g, x| g * x)),
            ]
        }
        Op::Div(a, b) => {
            let (va, vb) = (val(nodes, *a), val(nodes, *b));
            // d(a/b)/db = -out / b
            let so = broadcast_strides(vb.shape(), g.shape());
            let zero = vec![0; g.rank()];
            let mut gb_full = vec![0.0; g.len()];
            let (gd, od, bd) = (g.data(), out.data(), vb.data());
            for_each_broadcast(g.shape(), &so, &zero, |k, i, _| gb_full[k] = -gd[k] * od[k] / bd[i]);
            vec![
                (*a, bcast_product(g, vb, va.shape(), |g, y| g / y)),
                (*b, reduce_to_shape(&Tensor::from_parts(g.shape().to_vec(), gb_full), vb.shape())),
            ]
        }
        Op::Neg(a) => vec![(*a, g.map(|x| -x))],
        Op::Scale(a, c) => vec![(*a, g.map(|x| c * x))],
        Op::AddScalar(a) | Op::Wrap(a) => vec![(*a, g.clone())],
        Op::Exp(a) => vec![(*a, map_grad(g, out, |g, y| g * y))],
        Op::Log(a) => vec![(*a, map_grad(g, val(nodes, *a), |g, x| g / x))],
        Op::Sin(a) => vec![(*a, map_grad(g, val(nodes, *a), |g, x| g * x.cos()))],
        Op::Cos(a) => vec![(*a, map_grad(g, val(nodes, *a), |g, x| -g * x.sin()))],
        Op::Tan(a) => vec![(*a, map_grad(g, out, |g, y| g * (1.0 + y * y)))],
        Op::Atan(a) => vec![(*a, map_grad(g, val(nodes, *a), |g, x| g / (1.0 + x * x)))],
        Op::Tanh(a) => vec![(*a, map_grad(g, out, |g, y| g * (1.0 - y * y)))],
        Op::Sum(a) => vec![(*a, Tensor::full(val(nodes, *a).shape(), g.data()[0]))],
        Op::Mean(a) => {
            let va = val(nodes, *a);
            vec![(*a, Tensor::full(va.shape(), g.data()[0] / va.len() as f64))]
        }
        Op::SumAxis(a, axis) => {
            let va = val(nodes, *a);
            let (outer, n, inner) = axis_split(va.shape(), *axis);
            let mut d = vec![0.0; va.len()];
            for o in 0..outer {
                let src = &g.data()[o * inner..(o + 1) * inner];
                for i in 0..n {
                    d[(o * n + i) * inner..(o * n + i + 1) * inner].copy_from_slice(src);
                }
            }
            vec![(*a, Tensor::from_parts(va.shape().to_vec(), d))]
        }
        Op::Reshape(a) => vec![(*a, Tensor::from_parts(val(nodes, *a).shape().to_vec(), g.data().to_vec()))],
        Op::BroadcastTo(a) => vec![(*a, reduce_to_shape(g, val(nodes, *a).shape()))],
        Op::Slice { input, axis, start } => {
            let vi = val(nodes, *input);
            let (outer, n, inner) = axis_split(vi.shape(), *axis);
            let len = g.shape()[*axis];
            let mut d = vec![0.0; vi.len()];
            for o in 0..outer {
                d[(o * n + start) * inner..(o * n + start + len) * inner]
                    .copy_from_slice(&g.data()[o * len * inner..(o + 1) * len * inner]);
            }
            vec![(*input, Tensor::from_parts(vi.shape().to_vec(), d))]
        }
        Op::Concat { inputs, axis } => {
            let (outer, total, inner) = axis_split(g.shape(), *axis);
            let mut offset = 0;
            inputs
                .iter()
                .map(|&p| {
                    let vp = val(nodes, p);
                    let len = vp.shape()[*axis];
                    let mut d = Vec::with_capacity(vp.len());
                    for o in 0..outer {
                        d.extend_from_slice(&g.data()[(o * total + offset) * inner..(o * total + offset + len) * inner]);
                    }
                    offset += len;
                    (p, Tensor::from_parts(vp.shape().to_vec(), d))
                })
                .collect()
        }
        Op::Roll { input, axis, shift } => vec![(*input, Tensor::from_parts(g.shape().to_vec(), roll_data(g, *axis, -shift)))],
        Op::MatMul(a, b) => {
            let (va, vb) = (val(nodes, *a), val(nodes, *b));
            let (m, k, n) = (va.shape()[0], va.shape()[1], vb.shape()[1]);
            let (ad, bd, gd) = (va.data(), vb.data(), g.data());
            let mut ga = vec![0.0; m * k];
            let mut gb = vec![0.0; k * n];
            for i in 0..m {
                for p in 0..k {
                    let mut acc = 0.0;
                    for j in 0..n {
                        acc += gd[i * n + j] * bd[p * n + j];
                        gb[p * n + j] += ad[i * k + p] * gd[i * n + j];
                    }
                    ga[i * k + p] = acc;
                }
            }
            vec![
                (*a, Tensor::from_parts(vec![m, k], ga)),
                (*b, Tensor::from_parts(vec![k, n], gb)),
            ]
        }
        Op::Conv2d { input, kernel, bias } => {
            let (vi, vk) = (val(nodes, *input), val(nodes, *kernel));
            let d = conv_dims(vi, vk);
            let want = (
                nodes[*input].requires_grad,
                nodes[*kernel].requires_grad,
                bias.is_some_and(|b| nodes[b].requires_grad),
            );
            let grads = conv::backward(vi.data(), vk.data(), g.data(), &d, want);
            let mut v = Vec::new();
            if let Some(gi) = grads.input {
                v.push((*input, Tensor::from_parts(vi.shape().to_vec(), gi)));
            }
            if let Some(gk) = grads.kernel {
                v.push((*kernel, Tensor::from_parts(vk.shape().to_vec(), gk)));
            }
            if let (Some(b), Some(gb)) = (bias, grads.bias) {
                v.push((*b, Tensor::from_parts(vec![d.c_out], gb)));
            }
            v
        }
        Op::NcpShift(t, s) | Op::NcpLogJac(t, s) => {
            let is_shift = matches!(nodes[id].op, Op::NcpShift(..));
            let (vt, vs) = (val(nodes, *t), val(nodes, *s));
            let mut gt = vec![0.0; g.len()];
            let mut gs = vec![0.0; g.len()];
            for i in 0..g.len() {
                let ncp = Ncp::new(vt.data()[i], vs.data()[i]);
                let (dt, ds) = if is_shift { ncp.d_shift() } else { ncp.d_log_jac() };
                gt[i] = g.data()[i] * dt;
                gs[i] = g.data()[i] * ds;
            }
            vec![
                (*t, Tensor::from_parts(vt.shape().to_vec(), gt)),
                (*s, Tensor::from_parts(vs.shape().to_vec(), gs)),
            ]
        }
    }
}

impl<'t> Var<'t> {
    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn value(&self) -> Tensor {
        self.tape.inner.borrow().nodes[self.id].value.clone()
    }

    /// Run `f` on the value without cloning it.
    pub fn with_value<R>(&self, f: impl FnOnce(&Tensor) -> R) -> R {
        f(&self.tape.inner.borrow().nodes[self.id].value)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.with_value(|v| v.shape().to_vec())
    }

    /// Value of a one-element node.
    pub fn item(&self) -> Result<f64> {
        self.with_value(|v| v.item())
            .ok_or_else(|| Error::Autodiff(format!("item() on a tensor of shape {:?}", self.shape())))
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.inner.borrow().nodes[self.id].requires_grad
    }

    fn unary(self, op: Op, f: impl Fn(f64) -> f64) -> Var<'t> {
        let (value, rg) = {
            let inner = self.tape.inner.borrow();
            let node = &inner.nodes[self.id];
            (node.value.map(f), node.requires_grad)
        };
        self.tape.push(value, op, rg)
    }

    fn binary(self, other: Var<'t>, name: &'static str, op: Op, f: impl Fn(f64, f64) -> f64) -> Result<Var<'t>> {
        let (value, rg) = {
            let inner = self.tape.inner.borrow();
            let (a, b) = (&inner.nodes[self.id], &inner.nodes[other.id]);
            let (va, vb) = (&a.value, &b.value);
            let value = if va.shape() == vb.shape() {
                Tensor::from_parts(va.shape().to_vec(), va.data().iter().zip(vb.data()).map(|(&x, &y)| f(x, y)).collect())
            } else {
                let shape = broadcast_shape(name, va.shape(), vb.shape())?;
                let sa = broadcast_strides(va.shape(), &shape);
                let sb = broadcast_strides(vb.shape(), &shape);
                let mut data = vec![0.0; shape.iter().product()];
                let (ad, bd) = (va.data(), vb.data());
                for_each_broadcast(&shape, &sa, &sb, |k, i, j| data[k] = f(ad[i], bd[j]));
                Tensor::from_parts(shape, data)
            };
            (value, a.requires_grad || b.requires_grad)
        };
        Ok(self.tape.push(value, op, rg))
    }

    pub fn add(self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, "add", Op::Add(self.id, other.id), |a, b| a + b)
    }

    pub fn sub(self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, "sub", Op::Sub(self.id, other.id), |a, b| a - b)
    }

    pub fn mul(self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, "mul", Op::Mul(self.id, other.id), |a, b| a * b)
    }

    pub fn div(self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, "div", Op::Div(self.id, other.id), |a, b| a / b)
    }

    pub fn neg(self) -> Var<'t> {
        self.unary(Op::Neg(self.id), |x| -x)
    }

    pub fn scale(self, c: f64) -> Var<'t> {
        self.unary(Op::Scale(self.id, c), |x| c * x)
    }

    pub fn add_scalar(self, c: f64) -> Var<'t> {
        self.unary(Op::AddScalar(self.id), |x| x + c)
    }

    pub fn exp(self) -> Var<'t> {
        self.unary(Op::Exp(self.id), f64::exp)
    }

    pub fn log(self) -> Var<'t> {
        self.unary(Op::Log(self.id), f64::ln)
    }

    pub fn sin(self) -> Var<'t> {
        self.unary(Op::Sin(self.id), f64::sin)
    }

    pub fn cos(self) -> Var<'t> {
        self.unary(Op::Cos(self.id), f64::cos)
    }

    pub fn tan(self) -> Var<'t> {
        self.unary(Op::Tan(self.id), f64::tan)
    }

    pub fn atan(self) -> Var<'t> {
        self.unary(Op::Atan(self.id), f64::atan)
    }

    pub fn tanh(self) -> Var<'t> {
        self.unary(Op::Tanh(self.id), f64::tanh)
    }

    /// Principal value in `(-pi, pi]`; the derivative is 1 almost everywhere.
    pub fn wrap(self) -> Var<'t> {
        self.unary(Op::Wrap(self.id), crate::lattice::wrap)
    }

    pub fn sum(self) -> Var<'t> {
        let (value, rg) = {
            let inner = self.tape.inner.borrow();
            let node = &inner.nodes[self.id];
            (Tensor::scalar(node.value.sum()), node.requires_grad)
        };
        self.tape.push(value, Op::Sum(self.id), rg)
    }

    pub fn mean(self) -> Var<'t> {
        let (value, rg) = {
            let inner = self.tape.inner.borrow();
            let node = &inner.nodes[self.id];
            (Tensor::scalar(node.value.sum() / node.value.len() as f64), node.requires_grad)
        };
        self.tape.push(value, Op::Mean(self.id), rg)
    }

    /// Sum over `axis`, removing it.
    pub fn sum_axis(self, axis: usize) -> Result<Var<'t>> {
        let (value, rg) = {
            let inner = self.tape.inner.borrow();
            let node = &inner.nodes[self.id];
            let shape = node.value.shape();
            if axis >= shape.len() {
                return Err(Error::Autodiff(format!("sum_axis {axis} out of range for {shape:?}")));
            }
            let (outer, n, inner_len) = axis_split(shape, axis);
            let d = node.value.data();
            let mut out = vec![0.0; outer * inner_len];
            for o in 0..outer {
                let dst = &mut out[o * inner_len..(o + 1) * inner_len];
                for i in 0..n {
                    for (acc, x) in dst.iter_mut().zip(&d[(o * n + i) * inner_len..(o * n + i + 1) * inner_len]) {
                        *acc += x;
                    }
                }
            }
            let mut out_shape = shape.to_vec();
            out_shape.remove(axis);
            (Tensor::from_parts(out_shape, out), node.requires_grad)
        };
        Ok(self.tape.push(value, Op::SumAxis(self.id, axis), rg))
    }

    pub fn reshape(self, shape: &[usize]) -> Result<Var<'t>> {
        let (value, rg) = {
            let inner = self.tape.inner.borrow();
            let node = &inner.nodes[self.id];
            (node.value.clone().reshaped(shape.to_vec())?, node.requires_grad)
        };
        Ok(self.tape.push(value, Op::Reshape(self.id), rg))
    }

    /// Explicit broadcast to `shape` under trailing alignment.
    pub fn broadcast_to(self, shape: &[usize]) -> Result<Var<'t>> {
        let (value, rg) = {
            let inner = self.tape.inner.borrow();
            let node = &inner.nodes[self.id];
            let full = broadcast_shape("broadcast_to", node.value.shape(), shape)?;
            if full != shape {
                return Err(Error::Shape {
                    op: "broadcast_to",
                    lhs: node.value.shape().to_vec(),
                    rhs: shape.to_vec(),
                });
            }
            let s = broadcast_strides(node.value.shape(), shape);
            let zero = vec![0; shape.len()];
            let mut data = vec![0.0; shape.iter().product()];
            let src = node.value.data();
            for_each_broadcast(shape, &s, &zero, |k, i, _| data[k] = src[i]);
            (Tensor::from_parts(shape.to_vec(), data), node.requires_grad)
        };
        Ok(self.tape.push(value, Op::BroadcastTo(self.id), rg))
    }

    /// Entries `start..start + len` along `axis`.
    pub fn slice(self, axis: usize, start: usize, len: usize) -> Result<Var<'t>> {
        let (value, rg) = {
            let inner = self.tape.inner.borrow();
            let node = &inner.nodes[self.id];
            let shape = node.value.shape();
            if axis >= shape.len() || start + len > shape[axis] {
                return Err(Error::Autodiff(format!(
                    "slice {start}..{} on axis {axis} out of range for {shape:?}",
                    start + len
                )));
            }
            let (outer, n, inner_len) = axis_split(shape, axis);
            let d = node.value.data();
            let mut out = Vec::with_capacity(outer * len * inner_len);
            for o in 0..outer {
                out.extend_from_slice(&d[(o * n + start) * inner_len..(o * n + start + len) * inner_len]);
            }
            let mut out_shape = shape.to_vec();
            out_shape[axis] = len;
            (Tensor::from_parts(out_shape, out), node.requires_grad)
        };
        Ok(self.tape.push(value, Op::Slice { input: self.id, axis, start }, rg))
    }

    /// Cyclic shift: `out[i] = in[(i - shift) mod n]` along `axis`.
    pub fn roll(self, axis: usize, shift: isize) -> Result<Var<'t>> {
        let (value, rg) = {
            let inner = self.tape.inner.borrow();
            let node = &inner.nodes[self.id];
            if axis >= node.value.rank() {
                return Err(Error::Autodiff(format!("roll axis {axis} out of range for {:?}", node.value.shape())));
            }
            (
                Tensor::from_parts(node.value.shape().to_vec(), roll_data(&node.value, axis, shift)),
                node.requires_grad,
            )
        };
        Ok(self.tape.push(value, Op::Roll { input: self.id, axis, shift }, rg))
    }

    /// Matrix product of `[m, k]` and `[k, n]`.
    pub fn matmul(self, other: Var<'t>) -> Result<Var<'t>> {
        let (value, rg) = {
            let inner = self.tape.inner.borrow();
            let (a, b) = (&inner.nodes[self.id], &inner.nodes[other.id]);
            let (sa, sb) = (a.value.shape(), b.value.shape());
            if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
                return Err(Error::Shape {
                    op: "matmul",
                    lhs: sa.to_vec(),
                    rhs: sb.to_vec(),
                });
            }
            let (m, k, n) = (sa[0], sa[1], sb[1]);
            let (ad, bd) = (a.value.data(), b.value.data());
            let mut out = vec![0.0; m * n];
            for i in 0..m {
                for p in 0..k {
                    let aip = ad[i * k + p];
                    for j in 0..n {
                        out[i * n + j] += aip * bd[p * n + j];
                    }
                }
            }
            (Tensor::from_parts(vec![m, n], out), a.requires_grad || b.requires_grad)
        };
        Ok(self.tape.push(value, Op::MatMul(self.id, other.id), rg))
    }

    /// Periodic 2D cross-correlation, see [`super::conv2d_periodic`].
    pub fn conv2d_periodic(self, kernel: Var<'t>, bias: Option<Var<'t>>) -> Result<Var<'t>> {
        let (value, rg) = {
            let inner = self.tape.inner.borrow();
            let (x, k) = (&inner.nodes[self.id], &inner.nodes[kernel.id]);
            let (sx, sk) = (x.value.shape(), k.value.shape());
            if sk.len() != 4 || sk[2] != sk[3] {
                return Err(Error::Shape {
                    op: "conv2d_periodic",
                    lhs: sx.to_vec(),
                    rhs: sk.to_vec(),
                });
            }
            if sk[2] % 2 == 0 {
                return Err(Error::domain(format!("conv2d_periodic needs an odd kernel size, got {}", sk[2])));
            }
            let c_in = match sx.len() {
                3 => sx[0],
                4 => sx[1],
                _ => 0,
            };
            if c_in != sk[1] {
                return Err(Error::Shape {
                    op: "conv2d_periodic",
                    lhs: sx.to_vec(),
                    rhs: sk.to_vec(),
                });
            }
            let bias_node = bias.map(|b| &inner.nodes[b.id]);
            if let Some(b) = bias_node {
                if b.value.shape() != [sk[0]] {
                    return Err(Error::Shape {
                        op: "conv2d_periodic bias",
                        lhs: vec![sk[0]],
                        rhs: b.value.shape().to_vec(),
                    });
                }
            }
            let d = conv_dims(&x.value, &k.value);
            let out = conv::forward(x.value.data(), k.value.data(), bias_node.map(|b| b.value.data()), &d);
            let mut shape = sx.to_vec();
            let ch = shape.len() - 3;
            shape[ch] = d.c_out;
            let rg = x.requires_grad || k.requires_grad || bias_node.is_some_and(|b| b.requires_grad);
            (Tensor::from_parts(shape, out), rg)
        };
        Ok(self.tape.push(
            value,
            Op::Conv2d {
                input: self.id,
                kernel: kernel.id,
                bias: bias.map(|b| b.id),
            },
            rg,
        ))
    }

    fn ncp_binary(self, s: Var<'t>, shift: bool) -> Result<Var<'t>> {
        let (value, rg) = {
            let inner = self.tape.inner.borrow();
            let (t, sv) = (&inner.nodes[self.id], &inner.nodes[s.id]);
            if t.value.shape() != sv.value.shape() {
                return Err(Error::Shape {
                    op: if shift { "ncp_shift" } else { "ncp_log_jacobian" },
                    lhs: t.value.shape().to_vec(),
                    rhs: sv.value.shape().to_vec(),
                });
            }
            let data = t
                .value
                .data()
                .iter()
                .zip(sv.value.data())
                .map(|(&th, &s)| if shift { ncp_shift(th, s) } else { ncp_log_jacobian(th, s) })
                .collect();
            (Tensor::from_parts(t.value.shape().to_vec(), data), t.requires_grad || sv.requires_grad)
        };
        let op = if shift { Op::NcpShift(self.id, s.id) } else { Op::NcpLogJac(self.id, s.id) };
        Ok(self.tape.push(value, op, rg))
    }

    /// Elementwise [`ncp_shift`] of the angles in `self` with log-scales `s`.
    pub fn ncp_shift(self, s: Var<'t>) -> Result<Var<'t>> {
        self.ncp_binary(s, true)
    }

    /// Elementwise [`ncp_log_jacobian`].
    pub fn ncp_log_jacobian(self, s: Var<'t>) -> Result<Var<'t>> {
        self.ncp_binary(s, false)
    }
}
