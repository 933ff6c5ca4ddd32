use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::kernels::{self, channel_groups};
use crate::scalar::Scalar;
use crate::tensor::{Shape, Tensor4};

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Slope of the leaky rectifier on its negative side.
pub const LEAKY_SLOPE: f64 = 0.2;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case"))]
pub enum Activation {
    LeakyRelu,
    Relu,
    Tanh,
    Sigmoid,
    Hardtanh,
}

impl Activation {
    pub fn apply<T: Scalar>(self, x: T) -> T {
        match self {
            Activation::LeakyRelu => {
                if x > T::zero() {
                    x
                } else {
                    x * T::of(LEAKY_SLOPE)
                }
            }
            Activation::Relu => {
                if x > T::zero() {
                    x
                } else {
                    T::zero()
                }
            }
            Activation::Tanh => x.tanh(),
            Activation::Sigmoid => sigmoid(x),
            Activation::Hardtanh => x.max(-T::one()).min(T::one()),
        }
    }

    /// Derivative given input `x` and output `y`. At a kink the value from
    /// the lower side is used: 0 for relu, the leak slope for leaky relu,
    /// 0 at the hardtanh clamp points.
    fn derivative<T: Scalar>(self, x: T, y: T) -> T {
        match self {
            Activation::LeakyRelu => {
                if x > T::zero() {
                    T::one()
                } else {
                    T::of(LEAKY_SLOPE)
                }
            }
            Activation::Relu => {
                if x > T::zero() {
                    T::one()
                } else {
                    T::zero()
                }
            }
            Activation::Tanh => T::one() - y * y,
            Activation::Sigmoid => y * (T::one() - y),
            Activation::Hardtanh => {
                if x > -T::one() && x < T::one() {
                    T::one()
                } else {
                    T::zero()
                }
            }
        }
    }
}

fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
enum UnaryFn {
    Act(Activation),
    Sqrt,
    Abs,
    Square,
    Scale(f64),
    AddScalar(f64),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum BinaryFn {
    Add,
    Sub,
    Mul,
    Div,
}

#[derive(Clone, Debug)]
enum Op<T> {
    Leaf,
    Conv { x: Var, k: Var, b: Option<Var>, stride: usize, pad: usize },
    Unary { x: Var, f: UnaryFn },
    Binary { a: Var, b: Var, f: BinaryFn },
    Sum(Var),
    Mean(Var),
    ChannelMean(Var),
    ChannelSum(Var),
    ResizeBilinear(Var),
    ResizeNearest(Var),
    Concat { parts: Vec<Var>, axis: usize },
    GateMix { stacked: Var, gate: Var },
    Softmax { x: Var, tau: f64 },
    ChannelPool { x: Var, n: usize },
    Spectral { w: Var, u: Vec<T>, v: Vec<T>, sigma: T, clamped: bool },
    Reshape(Var),
}

#[derive(Clone, Debug)]
struct Node<T> {
    value: Tensor4<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Append-only record of tensor operations. Operands always precede their
/// consumers, so append order is a topological order and [`Graph::backward`]
/// visits every node once in reverse.
#[derive(Clone, Debug, Default)]
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
    grads: Vec<Option<Vec<T>>>,
}

/// Division guard for the spectral normalization denominator.
pub const SPECTRAL_EPS: f64 = 1e-12;

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new(), grads: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor4<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    fn node(&self, v: Var) -> &Node<T> {
        &self.nodes[v.0]
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// A tensor that does not receive gradients.
    pub fn constant(&mut self, value: Tensor4<T>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// A leaf whose gradient is populated by [`Graph::backward`].
    pub fn variable(&mut self, value: Tensor4<T>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Copies the current value of `v` into a new constant.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.value(v).clone();
        self.constant(value)
    }

    pub fn value(&self, v: Var) -> &Tensor4<T> {
        &self.node(v).value
    }

    pub fn shape(&self, v: Var) -> Shape {
        self.node(v).value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    /// Gradient of the last backward root w.r.t. `v`, if it was reached.
    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Gradient as a tensor; zeros when `v` was not reached.
    pub fn grad_tensor(&self, v: Var) -> Tensor4<T> {
        let shape = self.shape(v);
        match self.grad(v) {
            Some(g) => Tensor4::from_vec(shape, g.to_vec()).expect("gradient shape"),
            None => Tensor4::zeros(shape),
        }
    }

    pub fn item(&self, v: Var) -> Result<T> {
        self.value(v).item()
    }

    // ---------------------------------------------------------------- ops

    pub fn conv2d(&mut self, x: Var, kernel: Var, bias: Option<Var>, stride: usize, pad: usize) -> Result<Var> {
        let bias_vals = match bias {
            Some(b) => {
                let bs = self.shape(b);
                if bs.numel() != self.shape(kernel).b {
                    return Err(Error::shape(
                        "conv2d",
                        format!("bias {bs} does not match kernel {}", self.shape(kernel)),
                    ));
                }
                Some(self.value(b).data())
            }
            None => None,
        };
        let out = kernels::conv2d_forward(self.value(x), self.value(kernel), bias_vals, stride, pad)?;
        let rg = self.rg(x) || self.rg(kernel) || bias.is_some_and(|b| self.rg(b));
        Ok(self.push(out, Op::Conv { x, k: kernel, b: bias, stride, pad }, rg))
    }

    fn unary(&mut self, x: Var, f: UnaryFn) -> Var {
        let out = {
            let t = self.value(x);
            match f {
                UnaryFn::Act(a) => t.map(|v| a.apply(v)),
                UnaryFn::Sqrt => t.map(|v| v.sqrt()),
                UnaryFn::Abs => t.map(|v| v.abs()),
                UnaryFn::Square => t.map(|v| v * v),
                UnaryFn::Scale(s) => {
                    let s = T::of(s);
                    t.map(|v| v * s)
                }
                UnaryFn::AddScalar(s) => {
                    let s = T::of(s);
                    t.map(|v| v + s)
                }
            }
        };
        let rg = self.rg(x);
        self.push(out, Op::Unary { x, f }, rg)
    }

    pub fn activation(&mut self, x: Var, a: Activation) -> Var {
        self.unary(x, UnaryFn::Act(a))
    }

    pub fn leaky_relu(&mut self, x: Var) -> Var {
        self.activation(x, Activation::LeakyRelu)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.activation(x, Activation::Relu)
    }

    pub fn hardtanh(&mut self, x: Var) -> Var {
        self.activation(x, Activation::Hardtanh)
    }

    pub fn sqrt(&mut self, x: Var) -> Var {
        self.unary(x, UnaryFn::Sqrt)
    }

    pub fn abs(&mut self, x: Var) -> Var {
        self.unary(x, UnaryFn::Abs)
    }

    pub fn square(&mut self, x: Var) -> Var {
        self.unary(x, UnaryFn::Square)
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        self.unary(x, UnaryFn::Scale(s))
    }

    pub fn neg(&mut self, x: Var) -> Var {
        self.scale(x, -1.0)
    }

    pub fn add_scalar(&mut self, x: Var, s: f64) -> Var {
        self.unary(x, UnaryFn::AddScalar(s))
    }

    fn binary(&mut self, a: Var, b: Var, f: BinaryFn) -> Result<Var> {
        let sa = self.shape(a);
        let sb = self.shape(b);
        let out_shape = broadcast_shape(sa, sb)?;
        let out = {
            let (va, vb) = (self.value(a).data(), self.value(b).data());
            let op = |x: T, y: T| match f {
                BinaryFn::Add => x + y,
                BinaryFn::Sub => x - y,
                BinaryFn::Mul => x * y,
                BinaryFn::Div => x / y,
            };
            if sa == sb {
                va.iter().zip(vb).map(|(&x, &y)| op(x, y)).collect()
            } else {
                let mut out = Vec::with_capacity(out_shape.numel());
                for_each_broadcast(out_shape, sa, sb, |_, ia, ib| out.push(op(va[ia], vb[ib])));
                out
            }
        };
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor4::from_vec(out_shape, out)?, Op::Binary { a, b, f }, rg))
    }

    /// Elementwise sum with per-axis broadcasting of size-1 dimensions.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, BinaryFn::Add)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, BinaryFn::Sub)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, BinaryFn::Mul)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, BinaryFn::Div)
    }

    /// Sum of all entries, as a 1x1x1x1 tensor.
    pub fn sum(&mut self, x: Var) -> Var {
        let s: T = self.value(x).data().iter().copied().sum();
        let rg = self.rg(x);
        self.push(Tensor4::scalar(s), Op::Sum(x), rg)
    }

    /// Mean of all entries, as a 1x1x1x1 tensor.
    pub fn mean(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let s: T = t.data().iter().copied().sum();
        let m = s / T::of(t.len() as f64);
        let rg = self.rg(x);
        self.push(Tensor4::scalar(m), Op::Mean(x), rg)
    }

    /// Per-channel mean over batch and spatial axes, shape `1 x c x 1 x 1`.
    pub fn channel_mean(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let s = t.shape();
        let count = T::of((s.b * s.plane()) as f64);
        let mut acc = vec![T::zero(); s.c];
        for (i, plane) in t.data().chunks(s.plane()).enumerate() {
            let part: T = plane.iter().copied().sum();
            acc[i % s.c] += part;
        }
        let out: Vec<T> = acc.into_iter().map(|v| v / count).collect();
        let rg = self.rg(x);
        self.push(Tensor4::from_vec(Shape::vector(s.c), out).expect("shape"), Op::ChannelMean(x), rg)
    }

    /// Sum over the channel axis, shape `b x 1 x h x w`.
    pub fn channel_sum(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let s = t.shape();
        let plane = s.plane();
        let mut out = vec![T::zero(); s.b * plane];
        for b in 0..s.b {
            let dst = &mut out[b * plane..(b + 1) * plane];
            for c in 0..s.c {
                let off = (b * s.c + c) * plane;
                for (d, &v) in dst.iter_mut().zip(&t.data()[off..off + plane]) {
                    *d += v;
                }
            }
        }
        let rg = self.rg(x);
        self.push(
            Tensor4::from_vec(Shape::new(s.b, 1, s.h, s.w), out).expect("shape"),
            Op::ChannelSum(x),
            rg,
        )
    }

    pub fn resize_bilinear(&mut self, x: Var, oh: usize, ow: usize) -> Result<Var> {
        let s = self.shape(x);
        if s.h == oh && s.w == ow {
            return Ok(x);
        }
        let out = kernels::resize_bilinear_forward(self.value(x), oh, ow)?;
        let rg = self.rg(x);
        Ok(self.push(out, Op::ResizeBilinear(x), rg))
    }

    pub fn resize_nearest(&mut self, x: Var, oh: usize, ow: usize) -> Result<Var> {
        let s = self.shape(x);
        if s.h == oh && s.w == ow {
            return Ok(x);
        }
        let out = kernels::resize_nearest_forward(self.value(x), oh, ow)?;
        let rg = self.rg(x);
        Ok(self.push(out, Op::ResizeNearest(x), rg))
    }

    /// Concatenates along the batch (`axis = 0`) or channel (`axis = 1`) axis.
    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::param("concat", "no inputs"));
        }
        if axis > 1 {
            return Err(Error::param("concat", format!("axis {axis} unsupported (0 or 1)")));
        }
        let first = self.shape(parts[0]);
        let mut total = 0;
        for &p in parts {
            let s = self.shape(p);
            let same = if axis == 0 {
                (s.c, s.h, s.w) == (first.c, first.h, first.w)
            } else {
                (s.b, s.h, s.w) == (first.b, first.h, first.w)
            };
            if !same {
                return Err(Error::shape("concat", format!("{s} incompatible with {first} on axis {axis}")));
            }
            total += if axis == 0 { s.b } else { s.c };
        }
        let out_shape = if axis == 0 {
            Shape::new(total, first.c, first.h, first.w)
        } else {
            Shape::new(first.b, total, first.h, first.w)
        };
        let mut out = Vec::with_capacity(out_shape.numel());
        if axis == 0 {
            for &p in parts {
                out.extend_from_slice(self.value(p).data());
            }
        } else {
            for b in 0..first.b {
                for &p in parts {
                    let t = self.value(p);
                    let per = t.shape().c * first.plane();
                    out.extend_from_slice(&t.data()[b * per..(b + 1) * per]);
                }
            }
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(Tensor4::from_vec(out_shape, out)?, Op::Concat { parts: parts.to_vec(), axis }, rg))
    }

    /// `out[b,c,y,x] = sum_i gate[b,i,y,x] * stacked[b, i*C + c, y, x]` where
    /// `stacked` holds `n` blocks of `C` channels.
    pub fn gate_mix(&mut self, stacked: Var, gate: Var) -> Result<Var> {
        let ss = self.shape(stacked);
        let gs = self.shape(gate);
        if (ss.b, ss.h, ss.w) != (gs.b, gs.h, gs.w) {
            return Err(Error::shape("gate_mix", format!("stacked {ss} vs gate {gs}")));
        }
        if gs.c == 0 || ss.c % gs.c != 0 {
            return Err(Error::param(
                "gate_mix",
                format!("{} stacked channels are not a multiple of {} gate channels", ss.c, gs.c),
            ));
        }
        let n = gs.c;
        let c = ss.c / n;
        let plane = ss.plane();
        let out_shape = Shape::new(ss.b, c, ss.h, ss.w);
        let mut out = vec![T::zero(); out_shape.numel()];
        let sv = self.value(stacked).data();
        let gv = self.value(gate).data();
        for b in 0..ss.b {
            for i in 0..n {
                let gp = &gv[(b * n + i) * plane..(b * n + i + 1) * plane];
                for co in 0..c {
                    let src = &sv[(b * ss.c + i * c + co) * plane..][..plane];
                    let dst = &mut out[(b * c + co) * plane..][..plane];
                    for ((d, &s), &g) in dst.iter_mut().zip(src).zip(gp) {
                        *d += s * g;
                    }
                }
            }
        }
        let rg = self.rg(stacked) || self.rg(gate);
        Ok(self.push(Tensor4::from_vec(out_shape, out)?, Op::GateMix { stacked, gate }, rg))
    }

    /// Softmax of `tau * x` across channels at every position.
    pub fn channel_softmax(&mut self, x: Var, tau: f64) -> Var {
        let t = self.value(x);
        let s = t.shape();
        let plane = s.plane();
        let tau_t = T::of(tau);
        let mut out = vec![T::zero(); s.numel()];
        let mut buf = vec![T::zero(); s.c];
        for b in 0..s.b {
            for p in 0..plane {
                let mut mx = T::neg_infinity();
                for c in 0..s.c {
                    let z = tau_t * t.data()[(b * s.c + c) * plane + p];
                    buf[c] = z;
                    if z > mx {
                        mx = z;
                    }
                }
                let mut total = T::zero();
                for v in buf.iter_mut() {
                    *v = (*v - mx).exp();
                    total += *v;
                }
                for c in 0..s.c {
                    out[(b * s.c + c) * plane + p] = buf[c] / total;
                }
            }
        }
        let rg = self.rg(x);
        self.push(Tensor4::from_vec(s, out).expect("shape"), Op::Softmax { x, tau }, rg)
    }

    /// Averages `n` contiguous channel groups (see [`channel_groups`]).
    pub fn channel_pool(&mut self, x: Var, n: usize) -> Result<Var> {
        let s = self.shape(x);
        if n == 0 || s.c < n {
            return Err(Error::param("channel_pool", format!("cannot pool {} channels into {n}", s.c)));
        }
        let groups = channel_groups(s.c, n);
        let plane = s.plane();
        let out_shape = Shape::new(s.b, n, s.h, s.w);
        let mut out = vec![T::zero(); out_shape.numel()];
        let xv = self.value(x).data();
        for b in 0..s.b {
            for (i, &(start, len)) in groups.iter().enumerate() {
                let dst = &mut out[(b * n + i) * plane..][..plane];
                for c in start..start + len {
                    let src = &xv[(b * s.c + c) * plane..][..plane];
                    for (d, &v) in dst.iter_mut().zip(src) {
                        *d += v;
                    }
                }
                let inv = T::one() / T::of(len as f64);
                for d in dst.iter_mut() {
                    *d *= inv;
                }
            }
        }
        let rg = self.rg(x);
        Ok(self.push(Tensor4::from_vec(out_shape, out)?, Op::ChannelPool { x, n }, rg))
    }

    /// `w / sigma` with `sigma = u^T W v` for fixed unit vectors `u`, `v`,
    /// where `W` is `w` viewed as `c_out x (c_in*kh*kw)`.
    pub fn spectral_scale(&mut self, w: Var, u: Vec<T>, v: Vec<T>) -> Result<Var> {
        let s = self.shape(w);
        let rows = s.b;
        let cols = s.c * s.plane();
        if u.len() != rows || v.len() != cols {
            return Err(Error::shape(
                "spectral_normalize",
                format!("vectors {}x{} do not fit weight {s}", u.len(), v.len()),
            ));
        }
        let sigma = bilinear_form(self.value(w).data(), &u, &v);
        let eps = T::of(SPECTRAL_EPS);
        let clamped = !(sigma > eps);
        let denom = if clamped { eps } else { sigma };
        let out = self.value(w).map(|x| x / denom);
        let rg = self.rg(w);
        Ok(self.push(out, Op::Spectral { w, u, v, sigma, clamped }, rg))
    }

    pub fn reshape(&mut self, x: Var, shape: Shape) -> Result<Var> {
        let out = self.value(x).clone().reshape(shape)?;
        let rg = self.rg(x);
        Ok(self.push(out, Op::Reshape(x), rg))
    }

    /// Hash of which side of every kink (relu-family zero, hardtanh clamp
    /// points, abs origin) each recorded input lies on. Two evaluations with
    /// equal signatures took the same piecewise-smooth branch everywhere.
    pub fn kink_signature(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        let mut mix = |bit: bool| {
            h ^= u64::from(bit);
            h = h.wrapping_mul(0x0100_0000_01b3);
        };
        for node in &self.nodes {
            if let Op::Unary { x, f } = node.op {
                let xs = self.nodes[x.0].value.data();
                match f {
                    UnaryFn::Act(Activation::Relu | Activation::LeakyRelu) | UnaryFn::Abs => {
                        xs.iter().for_each(|&v| mix(v > T::zero()));
                    }
                    UnaryFn::Act(Activation::Hardtanh) => xs.iter().for_each(|&v| {
                        mix(v > -T::one());
                        mix(v < T::one());
                    }),
                    _ => {}
                }
            }
        }
        h
    }

    // ----------------------------------------------------------- backward

    /// Reverse-mode differentiation from a scalar root. Gradients of earlier
    /// runs are discarded; fan-out contributions accumulate additively.
    pub fn backward(&mut self, root: Var) -> Result<()> {
        if root.0 >= self.nodes.len() {
            return Err(Error::Internal(format!("root {} is not in this graph", root.0)));
        }
        let rs = self.shape(root);
        if !rs.is_scalar() {
            return Err(Error::shape("backward", format!("root must be 1x1x1x1, got {rs}")));
        }
        self.grads = vec![None; self.nodes.len()];
        self.grads[root.0] = Some(vec![T::one()]);
        for i in (0..=root.0).rev() {
            let Some(g) = self.grads[i].take() else { continue };
            if self.nodes[i].requires_grad {
                for operand in operands(&self.nodes[i].op) {
                    if operand.0 >= i {
                        return Err(Error::Internal(format!(
                            "node {i} consumes node {} which does not precede it",
                            operand.0
                        )));
                    }
                }
                self.backward_node(i, &g)?;
            }
            self.grads[i] = Some(g);
        }
        Ok(())
    }

    fn backward_node(&mut self, i: usize, g: &[T]) -> Result<()> {
        let Graph { nodes, grads } = self;
        let node = &nodes[i];
        match &node.op {
            Op::Leaf => {}
            Op::Conv { x, k, b, stride, pad } => {
                let (x, k) = (*x, *k);
                if x == k {
                    return Err(Error::Internal("conv2d input aliases its kernel".into()));
                }
                let mut dx = nodes[x.0].requires_grad.then(|| take(grads, x, nodes[x.0].value.len()));
                let mut dk = nodes[k.0].requires_grad.then(|| take(grads, k, nodes[k.0].value.len()));
                let mut db = b.filter(|b| nodes[b.0].requires_grad).map(|b| take(grads, b, nodes[b.0].value.len()));
                kernels::conv2d_backward(
                    &nodes[x.0].value,
                    &nodes[k.0].value,
                    *stride,
                    *pad,
                    g,
                    dx.as_deref_mut(),
                    dk.as_deref_mut(),
                    db.as_deref_mut(),
                )?;
                if let Some(d) = dx {
                    grads[x.0] = Some(d);
                }
                if let Some(d) = dk {
                    grads[k.0] = Some(d);
                }
                if let (Some(d), Some(b)) = (db, b) {
                    grads[b.0] = Some(d);
                }
            }
            Op::Unary { x, f } => {
                let xv = nodes[x.0].value.data();
                let yv = node.value.data();
                let d = acc(grads, *x, xv.len());
                match *f {
                    UnaryFn::Act(a) => {
                        for j in 0..g.len() {
                            d[j] += g[j] * a.derivative(xv[j], yv[j]);
                        }
                    }
                    UnaryFn::Sqrt => {
                        let half = T::of(0.5);
                        for j in 0..g.len() {
                            d[j] += g[j] * half / yv[j];
                        }
                    }
                    UnaryFn::Abs => {
                        for j in 0..g.len() {
                            let s = if xv[j] > T::zero() {
                                T::one()
                            } else if xv[j] < T::zero() {
                                -T::one()
                            } else {
                                T::zero()
                            };
                            d[j] += g[j] * s;
                        }
                    }
                    UnaryFn::Square => {
                        let two = T::of(2.0);
                        for j in 0..g.len() {
                            d[j] += g[j] * two * xv[j];
                        }
                    }
                    UnaryFn::Scale(s) => {
                        let s = T::of(s);
                        for j in 0..g.len() {
                            d[j] += g[j] * s;
                        }
                    }
                    UnaryFn::AddScalar(_) => {
                        for j in 0..g.len() {
                            d[j] += g[j];
                        }
                    }
                }
            }
            Op::Binary { a, b, f } => {
                let (a, b, f) = (*a, *b, *f);
                let out_shape = node.value.shape();
                let sa = nodes[a.0].value.shape();
                let sb = nodes[b.0].value.shape();
                let av = nodes[a.0].value.data();
                let bv = nodes[b.0].value.data();
                if nodes[a.0].requires_grad {
                    let d = acc(grads, a, av.len());
                    for_each_broadcast(out_shape, sa, sb, |o, ia, ib| {
                        d[ia] += match f {
                            BinaryFn::Add | BinaryFn::Sub => g[o],
                            BinaryFn::Mul => g[o] * bv[ib],
                            BinaryFn::Div => g[o] / bv[ib],
                        };
                    });
                }
                if nodes[b.0].requires_grad {
                    let d = acc(grads, b, bv.len());
                    for_each_broadcast(out_shape, sa, sb, |o, ia, ib| {
                        d[ib] += match f {
                            BinaryFn::Add => g[o],
                            BinaryFn::Sub => -g[o],
                            BinaryFn::Mul => g[o] * av[ia],
                            BinaryFn::Div => -g[o] * av[ia] / (bv[ib] * bv[ib]),
                        };
                    });
                }
            }
            Op::Sum(x) => {
                let n = nodes[x.0].value.len();
                let d = acc(grads, *x, n);
                d.iter_mut().for_each(|v| *v += g[0]);
            }
            Op::Mean(x) => {
                let n = nodes[x.0].value.len();
                let gv = g[0] / T::of(n as f64);
                let d = acc(grads, *x, n);
                d.iter_mut().for_each(|v| *v += gv);
            }
            Op::ChannelMean(x) => {
                let s = nodes[x.0].value.shape();
                let count = T::of((s.b * s.plane()) as f64);
                let d = acc(grads, *x, s.numel());
                for (pi, plane) in d.chunks_mut(s.plane()).enumerate() {
                    let gv = g[pi % s.c] / count;
                    plane.iter_mut().for_each(|v| *v += gv);
                }
            }
            Op::ChannelSum(x) => {
                let s = nodes[x.0].value.shape();
                let plane = s.plane();
                let d = acc(grads, *x, s.numel());
                for b in 0..s.b {
                    let src = &g[b * plane..(b + 1) * plane];
                    for c in 0..s.c {
                        let dst = &mut d[(b * s.c + c) * plane..][..plane];
                        for (o, &v) in dst.iter_mut().zip(src) {
                            *o += v;
                        }
                    }
                }
            }
            Op::ResizeBilinear(x) => {
                let s = nodes[x.0].value.shape();
                let o = node.value.shape();
                let d = acc(grads, *x, s.numel());
                kernels::resize_bilinear_backward(s, o.h, o.w, g, d);
            }
            Op::ResizeNearest(x) => {
                let s = nodes[x.0].value.shape();
                let o = node.value.shape();
                let d = acc(grads, *x, s.numel());
                kernels::resize_nearest_backward(s, o.h, o.w, g, d);
            }
            Op::Concat { parts, axis } => {
                let out = node.value.shape();
                let mut offset = 0;
                if *axis == 0 {
                    for &p in parts {
                        let n = nodes[p.0].value.len();
                        if nodes[p.0].requires_grad {
                            let d = acc(grads, p, n);
                            for (o, &v) in d.iter_mut().zip(&g[offset..offset + n]) {
                                *o += v;
                            }
                        }
                        offset += n;
                    }
                } else {
                    let per_batch = out.c * out.plane();
                    for &p in parts {
                        let s = nodes[p.0].value.shape();
                        let per = s.c * s.plane();
                        if nodes[p.0].requires_grad {
                            let d = acc(grads, p, s.numel());
                            for b in 0..out.b {
                                let src = &g[b * per_batch + offset..][..per];
                                for (o, &v) in d[b * per..(b + 1) * per].iter_mut().zip(src) {
                                    *o += v;
                                }
                            }
                        }
                        offset += per;
                    }
                }
            }
            Op::GateMix { stacked, gate } => {
                let ss = nodes[stacked.0].value.shape();
                let gs = nodes[gate.0].value.shape();
                let n = gs.c;
                let c = ss.c / n;
                let plane = ss.plane();
                let sv = nodes[stacked.0].value.data();
                let gv = nodes[gate.0].value.data();
                if nodes[stacked.0].requires_grad {
                    let d = acc(grads, *stacked, ss.numel());
                    for b in 0..ss.b {
                        for i in 0..n {
                            let gp = &gv[(b * n + i) * plane..][..plane];
                            for co in 0..c {
                                let up = &g[(b * c + co) * plane..][..plane];
                                let dst = &mut d[(b * ss.c + i * c + co) * plane..][..plane];
                                for ((o, &u), &w) in dst.iter_mut().zip(up).zip(gp) {
                                    *o += u * w;
                                }
                            }
                        }
                    }
                }
                if nodes[gate.0].requires_grad {
                    let d = acc(grads, *gate, gs.numel());
                    for b in 0..ss.b {
                        for i in 0..n {
                            let dst = &mut d[(b * n + i) * plane..][..plane];
                            for co in 0..c {
                                let up = &g[(b * c + co) * plane..][..plane];
                                let src = &sv[(b * ss.c + i * c + co) * plane..][..plane];
                                for ((o, &u), &s) in dst.iter_mut().zip(up).zip(src) {
                                    *o += u * s;
                                }
                            }
                        }
                    }
                }
            }
            Op::Softmax { x, tau } => {
                let s = node.value.shape();
                let y = node.value.data();
                let plane = s.plane();
                let tau = T::of(*tau);
                let d = acc(grads, *x, s.numel());
                for b in 0..s.b {
                    for p in 0..plane {
                        let idx = |c: usize| (b * s.c + c) * plane + p;
                        let dot: T = (0..s.c).map(|c| g[idx(c)] * y[idx(c)]).sum();
                        for c in 0..s.c {
                            d[idx(c)] += tau * y[idx(c)] * (g[idx(c)] - dot);
                        }
                    }
                }
            }
            Op::ChannelPool { x, n } => {
                let s = nodes[x.0].value.shape();
                let plane = s.plane();
                let groups = channel_groups(s.c, *n);
                let d = acc(grads, *x, s.numel());
                for b in 0..s.b {
                    for (i, &(start, len)) in groups.iter().enumerate() {
                        let inv = T::one() / T::of(len as f64);
                        let src = &g[(b * n + i) * plane..][..plane];
                        for c in start..start + len {
                            let dst = &mut d[(b * s.c + c) * plane..][..plane];
                            for (o, &v) in dst.iter_mut().zip(src) {
                                *o += v * inv;
                            }
                        }
                    }
                }
            }
            Op::Spectral { w, u, v, sigma, clamped } => {
                let wv = nodes[w.0].value.data();
                let d = acc(grads, *w, wv.len());
                if *clamped {
                    let inv = T::one() / T::of(SPECTRAL_EPS);
                    for j in 0..g.len() {
                        d[j] += g[j] * inv;
                    }
                } else {
                    // d/dW (W / (u^T W v)) = G/sigma - <G, W>/sigma^2 * u v^T
                    let sigma = *sigma;
                    let inner: T = g.iter().zip(wv).map(|(&a, &b)| a * b).sum();
                    let coef = inner / (sigma * sigma);
                    let cols = v.len();
                    for (r, &ur) in u.iter().enumerate() {
                        for (cidx, &vc) in v.iter().enumerate() {
                            let j = r * cols + cidx;
                            d[j] += g[j] / sigma - coef * ur * vc;
                        }
                    }
                }
            }
            Op::Reshape(x) => {
                let d = acc(grads, *x, g.len());
                for (o, &v) in d.iter_mut().zip(g) {
                    *o += v;
                }
            }
        }
        Ok(())
    }
}

fn operands<T>(op: &Op<T>) -> Vec<Var> {
    match op {
        Op::Leaf => Vec::new(),
        Op::Conv { x, k, b, .. } => {
            let mut v = vec![*x, *k];
            v.extend(b);
            v
        }
        Op::Binary { a, b, .. } => vec![*a, *b],
        Op::GateMix { stacked, gate } => vec![*stacked, *gate],
        Op::Concat { parts, .. } => parts.clone(),
        Op::Unary { x, .. }
        | Op::Sum(x)
        | Op::Mean(x)
        | Op::ChannelMean(x)
        | Op::ChannelSum(x)
        | Op::ResizeBilinear(x)
        | Op::ResizeNearest(x)
        | Op::Softmax { x, .. }
        | Op::ChannelPool { x, .. }
        | Op::Spectral { w: x, .. }
        | Op::Reshape(x) => vec![*x],
    }
}

fn acc<T: Scalar>(grads: &mut [Option<Vec<T>>], v: Var, len: usize) -> &mut [T] {
    grads[v.0].get_or_insert_with(|| vec![T::zero(); len])
}

fn take<T: Scalar>(grads: &mut [Option<Vec<T>>], v: Var, len: usize) -> Vec<T> {
    grads[v.0].take().unwrap_or_else(|| vec![T::zero(); len])
}

pub(crate) fn bilinear_form<T: Scalar>(w: &[T], u: &[T], v: &[T]) -> T {
    let cols = v.len();
    u.iter()
        .enumerate()
        .map(|(r, &ur)| {
            let row = &w[r * cols..(r + 1) * cols];
            ur * row.iter().zip(v).map(|(&a, &b)| a * b).sum::<T>()
        })
        .sum()
}

fn broadcast_shape(a: Shape, b: Shape) -> Result<Shape> {
    let mut out = [0; 4];
    for (i, (x, y)) in a.dims().into_iter().zip(b.dims()).enumerate() {
        out[i] = if x == y {
            x
        } else if x == 1 {
            y
        } else if y == 1 {
            x
        } else {
            return Err(Error::shape("broadcast", format!("{a} and {b} are not broadcast-compatible")));
        };
    }
    Ok(Shape::from_dims(out))
}

fn broadcast_strides(s: Shape, out: Shape) -> [usize; 4] {
    let full = [s.c * s.h * s.w, s.h * s.w, s.w, 1];
    let d = s.dims();
    let o = out.dims();
    let mut st = [0; 4];
    for i in 0..4 {
        st[i] = if d[i] == 1 && o[i] != 1 { 0 } else { full[i] };
    }
    st
}

/// Visits every output index with the matching (broadcast) operand indices.
fn for_each_broadcast(out: Shape, a: Shape, b: Shape, mut f: impl FnMut(usize, usize, usize)) {
    let sa = broadcast_strides(a, out);
    let sb = broadcast_strides(b, out);
    let mut o = 0;
    for i0 in 0..out.b {
        for i1 in 0..out.c {
            for i2 in 0..out.h {
                let ba = i0 * sa[0] + i1 * sa[1] + i2 * sa[2];
                let bb = i0 * sb[0] + i1 * sb[1] + i2 * sb[2];
                for i3 in 0..out.w {
                    f(o, ba + i3 * sa[3], bb + i3 * sb[3]);
                    o += 1;
                }
            }
        }
    }
}
