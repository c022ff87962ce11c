use super::kernels::{self, ConvGeom};
use super::{Element, Tensor};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Local backward rule of a custom op: `(inputs, output, d_output) -> d_inputs`.
pub type BackwardFn<T> = Box<dyn Fn(&[&Tensor<T>], &Tensor<T>, &[T]) -> Vec<Vec<T>>>;

enum Op<T: Element> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    MatMul(Var, Var),
    Concat(Vec<Var>, usize),
    Reshape(Var),
    Permute(Var, Vec<usize>),
    Softmax(Var),
    Gelu(Var),
    Relu(Var),
    Exp(Var),
    Abs(Var),
    Sum(Var),
    Mean(Var),
    LayerNorm(Var, Vec<T>),
    Conv2d { x: Var, w: Var, geom: ConvGeom, cols: Vec<T> },
    ConvTranspose2d { x: Var, w: Var, k: usize, stride: usize },
    Resize(Var),
    SpatialGrad(Var, usize),
    Custom(Vec<Var>, BackwardFn<T>),
}

struct Node<T: Element> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Ordered record of forward operations.
///
/// Every op's inputs precede it, so a single reverse sweep is a valid
/// topological order for [`Tape::backward`].
pub struct Tape<T: Element = f32> {
    nodes: Vec<Node<T>>,
    check_finite: bool,
}

impl<T: Element> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Result of [`Tape::backward`]: gradients of every `requires_grad` leaf.
pub struct Gradients<T: Element> {
    grads: Vec<Option<Tensor<T>>>,
    disconnected: Vec<Var>,
}

impl<T: Element> Gradients<T> {
    /// Gradient of a leaf; zero-filled for leaves the loss does not reach.
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Leaves that require grad but do not influence the loss.
    pub fn disconnected(&self) -> &[Var] {
        &self.disconnected
    }
}

/// How `rhs` broadcasts over `lhs` in element-wise binary ops.
fn broadcast_len(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Result<usize> {
    let n: usize = rhs.iter().product();
    if n == 1 || (rhs.len() <= lhs.len() && lhs.ends_with(rhs)) {
        Ok(n)
    } else {
        Err(Error::shape(op, lhs, rhs))
    }
}

fn reduce_broadcast<T: Element>(g: &[T], n: usize) -> Vec<T> {
    if g.len() == n {
        return g.to_vec();
    }
    let mut out = vec![T::zero(); n];
    for chunk in g.chunks(n) {
        for (o, &v) in out.iter_mut().zip(chunk) {
            *o += v;
        }
    }
    out
}

fn accumulate<T: Element>(slot: &mut Option<Vec<T>>, g: Vec<T>) {
    match slot {
        Some(a) => a.iter_mut().zip(&g).for_each(|(x, &y)| *x += y),
        None => *slot = Some(g),
    }
}

impl<T: Element> Tape<T> {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            check_finite: cfg!(debug_assertions),
        }
    }

    /// Enables or disables the non-finite check after each forward op.
    pub fn set_check_finite(&mut self, on: bool) {
        self.check_finite = on;
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Signs (−1, 0, 1) of every relu and abs input recorded so far. Two
    /// evaluations with equal patterns sit on the same smooth piece.
    pub fn kink_pattern(&self) -> Vec<i8> {
        let mut out = Vec::new();
        for n in &self.nodes {
            if let Op::Relu(a) | Op::Abs(a) = n.op {
                out.extend(self.nodes[a.0].value.data().iter().map(|&v| {
                    if v > T::zero() {
                        1
                    } else if v < T::zero() {
                        -1
                    } else {
                        0
                    }
                }));
            }
        }
        out
    }

    /// Records a leaf; it participates in backward iff `t.requires_grad()`.
    pub fn leaf(&mut self, t: &Tensor<T>) -> Var {
        let rg = t.requires_grad();
        self.nodes.push(Node {
            value: t.detached(),
            op: Op::Leaf,
            requires_grad: rg,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn leaf_owned(&mut self, t: Tensor<T>) -> Var {
        let rg = t.requires_grad();
        self.nodes.push(Node {
            value: t,
            op: Op::Leaf,
            requires_grad: rg,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.leaf_owned(t.with_requires_grad(false))
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, op_name: &'static str, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Result<Var> {
        if self.check_finite && !value.all_finite() {
            return Err(Error::NonFinite { op: op_name });
        }
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value: value.with_requires_grad(false),
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn unary(&mut self, name: &'static str, a: Var, f: impl Fn(T) -> T, op: Op<T>) -> Result<Var> {
        let x = &self.nodes[a.0].value;
        let out = Tensor::new(x.shape(), x.data().iter().map(|&v| f(v)).collect())?;
        self.push(name, out, op, &[a])
    }

    fn binary(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(T, T) -> T,
        op: Op<T>,
    ) -> Result<Var> {
        let (x, y) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        let n = broadcast_len(name, x.shape(), y.shape())?;
        let yd = y.data();
        let data = x
            .data()
            .chunks(n)
            .flat_map(|c| c.iter().zip(yd).map(|(&p, &q)| f(p, q)))
            .collect();
        let out = Tensor::new(x.shape(), data)?;
        self.push(name, out, op, &[a, b])
    }

    /// Element-wise sum; `b` may broadcast as a trailing-shape suffix or scalar.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, |p, q| p + q, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, |p, q| p - q, Op::Sub(a, b))
    }

    /// Element-wise product with the same broadcasting as [`Tape::add`].
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, |p, q| p * q, Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        let c = T::of(c);
        self.unary("scale", a, |v| v * c, Op::Scale(a, c))
    }

    /// `[m,k]·[k,n]`, `[b,m,k]·[b,k,n]`, or `[b,m,k]·[k,n]` (shared rhs).
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (x, y) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        let (xs, ys) = (x.shape(), y.shape());
        let out = match (xs.len(), ys.len()) {
            (2, 2) if xs[1] == ys[0] => {
                Tensor::new(&[xs[0], ys[1]], kernels::matmul(x.data(), y.data(), xs[0], xs[1], ys[1]))?
            }
            (3, 2) if xs[2] == ys[0] => Tensor::new(
                &[xs[0], xs[1], ys[1]],
                kernels::matmul(x.data(), y.data(), xs[0] * xs[1], xs[2], ys[1]),
            )?,
            (3, 3) if xs[0] == ys[0] && xs[2] == ys[1] => {
                let (bt, m, k, n) = (xs[0], xs[1], xs[2], ys[2]);
                let mut data = vec![T::zero(); bt * m * n];
                for i in 0..bt {
                    kernels::matmul_acc(
                        &x.data()[i * m * k..(i + 1) * m * k],
                        &y.data()[i * k * n..(i + 1) * k * n],
                        &mut data[i * m * n..(i + 1) * m * n],
                        m,
                        k,
                        n,
                    );
                }
                Tensor::new(&[bt, m, n], data)?
            }
            _ => return Err(Error::shape("matmul", xs, ys)),
        };
        self.push("matmul", out, Op::MatMul(a, b), &[a, b])
    }

    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let first = self
            .nodes
            .get(inputs.first().ok_or_else(|| Error::arg("concat", "no inputs"))?.0)
            .unwrap()
            .value
            .shape()
            .to_vec();
        if axis >= first.len() {
            return Err(Error::arg("concat", format!("axis {axis} out of range for {first:?}")));
        }
        let mut total = 0;
        for v in inputs {
            let s = self.shape(*v);
            if s.len() != first.len()
                || s.iter().zip(&first).enumerate().any(|(i, (a, b))| i != axis && a != b)
            {
                return Err(Error::shape("concat", &first, s));
            }
            total += s[axis];
        }
        let outer: usize = first[..axis].iter().product();
        let mut shape = first.clone();
        shape[axis] = total;
        let mut data = Vec::with_capacity(shape.iter().product());
        for o in 0..outer {
            for v in inputs {
                let t = &self.nodes[v.0].value;
                let inner = t.numel() / outer;
                data.extend_from_slice(&t.data()[o * inner..(o + 1) * inner]);
            }
        }
        let out = Tensor::new(&shape, data)?;
        self.push("concat", out, Op::Concat(inputs.to_vec(), axis), inputs)
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let out = self.nodes[a.0].value.reshaped(shape)?;
        self.push("reshape", out, Op::Reshape(a), &[a])
    }

    /// General axis permutation; output axis `i` is input axis `perm[i]`.
    pub fn permute(&mut self, a: Var, perm: &[usize]) -> Result<Var> {
        let x = &self.nodes[a.0].value;
        let mut seen = vec![false; x.rank()];
        if perm.len() != x.rank() || perm.iter().any(|&p| p >= x.rank() || std::mem::replace(&mut seen[p], true)) {
            return Err(Error::arg("permute", format!("invalid permutation {perm:?} for {:?}", x.shape())));
        }
        let (shape, data) = kernels::permute(x.data(), x.shape(), perm);
        let out = Tensor::new(&shape, data)?;
        self.push("permute", out, Op::Permute(a, perm.to_vec()), &[a])
    }

    /// Swaps the last two axes.
    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let r = self.shape(a).len();
        if r < 2 {
            return Err(Error::arg("transpose", "rank must be at least 2"));
        }
        let mut perm: Vec<usize> = (0..r).collect();
        perm.swap(r - 2, r - 1);
        self.permute(a, &perm)
    }

    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let x = &self.nodes[a.0].value;
        let n = *x.shape().last().unwrap();
        if n == 0 {
            return Err(Error::arg("softmax", "empty axis"));
        }
        let out = Tensor::new(x.shape(), kernels::softmax_rows(x.data(), n))?;
        self.push("softmax", out, Op::Softmax(a), &[a])
    }

    pub fn gelu(&mut self, a: Var) -> Result<Var> {
        self.unary("gelu", a, kernels::gelu, Op::Gelu(a))
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.unary("relu", a, |v| v.max(T::zero()), Op::Relu(a))
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        self.unary("exp", a, |v| v.exp(), Op::Exp(a))
    }

    pub fn abs(&mut self, a: Var) -> Result<Var> {
        self.unary("abs", a, |v| v.abs(), Op::Abs(a))
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s: T = self.nodes[a.0].value.data().iter().copied().sum();
        self.push("sum", Tensor::scalar(s), Op::Sum(a), &[a])
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let x = &self.nodes[a.0].value;
        let s: T = x.data().iter().copied().sum::<T>() / T::of(x.numel() as f64);
        self.push("mean", Tensor::scalar(s), Op::Mean(a), &[a])
    }

    /// Normalises over the last axis (no affine part).
    pub fn layernorm(&mut self, a: Var, eps: f64) -> Result<Var> {
        let x = &self.nodes[a.0].value;
        let n = *x.shape().last().unwrap();
        let (data, rstd) = kernels::layernorm_rows(x.data(), n, eps);
        let out = Tensor::new(x.shape(), data)?;
        self.push("layernorm", out, Op::LayerNorm(a, rstd), &[a])
    }

    /// Zero-padded 2-D convolution; `x` is `[H,W,Cin]`, `w` is `[kh,kw,Cin,Cout]`.
    pub fn conv2d(&mut self, x: Var, w: Var, stride: usize, padding: usize) -> Result<Var> {
        let (xs, ws) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        if xs.len() != 3 || ws.len() != 4 || ws[2] != xs[2] {
            return Err(Error::shape("conv2d", &xs, &ws));
        }
        let geom = ConvGeom::new(xs[0], xs[1], xs[2], ws[0], ws[1], stride, padding).ok_or_else(|| {
            Error::arg(
                "conv2d",
                format!("invalid stride {stride} / padding {padding} for input {xs:?} and kernel {ws:?}"),
            )
        })?;
        let cout = ws[3];
        let cols = kernels::im2col(self.nodes[x.0].value.data(), &geom);
        let data = kernels::matmul(&cols, self.nodes[w.0].value.data(), geom.ho * geom.wo, geom.patch_len(), cout);
        let out = Tensor::new(&[geom.ho, geom.wo, cout], data)?;
        let keep = if self.nodes[w.0].requires_grad { cols } else { Vec::new() };
        self.push("conv2d", out, Op::Conv2d { x, w, geom, cols: keep }, &[x, w])
    }

    /// Transposed convolution without padding; `x` is `[H,W,Cin]`, `w` is
    /// `[Cin,k,k,Cout]`. Output is `[(H−1)s+k, (W−1)s+k, Cout]`.
    pub fn conv_transpose2d(&mut self, x: Var, w: Var, stride: usize) -> Result<Var> {
        let (xs, ws) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        if xs.len() != 3 || ws.len() != 4 || ws[0] != xs[2] || ws[1] != ws[2] {
            return Err(Error::shape("conv_transpose2d", &xs, &ws));
        }
        let k = ws[1];
        if stride == 0 || stride > k {
            return Err(Error::arg(
                "conv_transpose2d",
                format!("stride {stride} must be in 1..={k} for kernel {k}"),
            ));
        }
        let (h, wd, cin, cout) = (xs[0], xs[1], xs[2], ws[3]);
        let z = kernels::matmul(self.nodes[x.0].value.data(), self.nodes[w.0].value.data(), h * wd, cin, k * k * cout);
        let data = kernels::deconv_scatter(&z, h, wd, k, stride, cout);
        let out = Tensor::new(&[(h - 1) * stride + k, (wd - 1) * stride + k, cout], data)?;
        self.push("conv_transpose2d", out, Op::ConvTranspose2d { x, w, k, stride }, &[x, w])
    }

    /// Align-corners bilinear resize of an `[H,W,C]` map.
    pub fn resize_bilinear(&mut self, a: Var, ho: usize, wo: usize) -> Result<Var> {
        let x = &self.nodes[a.0].value;
        let s = x.shape();
        if s.len() != 3 || ho == 0 || wo == 0 {
            return Err(Error::arg("resize_bilinear", format!("bad input {s:?} -> {ho}x{wo}")));
        }
        let data = kernels::resize_bilinear(x.data(), s[0], s[1], s[2], ho, wo);
        let out = Tensor::new(&[ho, wo, s[2]], data)?;
        self.push("resize_bilinear", out, Op::Resize(a), &[a])
    }

    pub fn upsample_bilinear(&mut self, a: Var, factor: usize) -> Result<Var> {
        if factor == 0 {
            return Err(Error::arg("upsample_bilinear", "factor must be positive"));
        }
        let s = self.shape(a).to_vec();
        if s.len() != 3 {
            return Err(Error::arg("upsample_bilinear", format!("expected [H,W,C], got {s:?}")));
        }
        self.resize_bilinear(a, s[0] * factor, s[1] * factor)
    }

    /// Forward difference along `axis` (0 = v/rows, 1 = u/columns) of an
    /// `[H,W]` or `[H,W,C]` map; the last row/column is zero.
    pub fn spatial_gradient(&mut self, a: Var, axis: usize) -> Result<Var> {
        let x = &self.nodes[a.0].value;
        let s = x.shape();
        let (h, w, c) = match s.len() {
            2 => (s[0], s[1], 1),
            3 => (s[0], s[1], s[2]),
            _ => return Err(Error::arg("spatial_gradient", format!("expected [H,W(,C)], got {s:?}"))),
        };
        if axis > 1 {
            return Err(Error::arg("spatial_gradient", format!("axis {axis} not in {{0,1}}")));
        }
        let out = Tensor::new(s, kernels::spatial_diff(x.data(), h, w, c, axis))?;
        self.push("spatial_gradient", out, Op::SpatialGrad(a, axis), &[a])
    }

    /// Records an op with a caller-provided value and backward rule.
    pub fn custom(&mut self, inputs: &[Var], value: Tensor<T>, backward: BackwardFn<T>) -> Result<Var> {
        self.push("custom", value, Op::Custom(inputs.to_vec(), backward), inputs)
    }

    /// Reverse sweep from a scalar `loss`, consuming the tape.
    pub fn backward(self, loss: Var) -> Result<Gradients<T>> {
        let loss_shape = self.shape(loss).to_vec();
        if loss_shape.iter().product::<usize>() != 1 {
            return Err(Error::NonScalar(loss_shape));
        }
        let n = self.nodes.len();
        let mut grads: Vec<Option<Vec<T>>> = (0..n).map(|_| None).collect();
        if self.nodes[loss.0].requires_grad {
            grads[loss.0] = Some(vec![T::one()]);
        }
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backward_node(node, &g, &mut grads)?;
        }
        let mut out: Vec<Option<Tensor<T>>> = (0..n).map(|_| None).collect();
        let mut disconnected = Vec::new();
        for (i, node) in self.nodes.iter().enumerate() {
            if matches!(node.op, Op::Leaf) && node.requires_grad {
                let g = match grads[i].take() {
                    Some(g) => g,
                    None => {
                        disconnected.push(Var(i));
                        vec![T::zero(); node.value.numel()]
                    }
                };
                out[i] = Some(Tensor::new(node.value.shape(), g)?);
            }
        }
        Ok(Gradients {
            grads: out,
            disconnected,
        })
    }

    fn backward_node(&self, node: &Node<T>, g: &[T], grads: &mut [Option<Vec<T>>]) -> Result<()> {
        let val = |v: Var| &self.nodes[v.0].value;
        let rg = |v: Var| self.nodes[v.0].requires_grad;
        let put = |v: Var, d: Vec<T>, grads: &mut [Option<Vec<T>>]| {
            if self.nodes[v.0].requires_grad {
                accumulate(&mut grads[v.0], d);
            }
        };
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                put(*a, g.to_vec(), grads);
                if rg(*b) {
                    put(*b, reduce_broadcast(g, val(*b).numel()), grads);
                }
            }
            Op::Sub(a, b) => {
                put(*a, g.to_vec(), grads);
                if rg(*b) {
                    let neg: Vec<T> = g.iter().map(|&v| -v).collect();
                    put(*b, reduce_broadcast(&neg, val(*b).numel()), grads);
                }
            }
            Op::Mul(a, b) => {
                let (x, y) = (val(*a).data(), val(*b).data());
                let n = y.len();
                if rg(*a) {
                    let d = g.chunks(n).flat_map(|c| c.iter().zip(y).map(|(&p, &q)| p * q)).collect();
                    put(*a, d, grads);
                }
                if rg(*b) {
                    let prod: Vec<T> = g.iter().zip(x).map(|(&p, &q)| p * q).collect();
                    put(*b, reduce_broadcast(&prod, n), grads);
                }
            }
            Op::Scale(a, c) => put(*a, g.iter().map(|&v| v * *c).collect(), grads),
            Op::MatMul(a, b) => {
                let (x, y) = (val(*a), val(*b));
                let (xs, ys) = (x.shape(), y.shape());
                match (xs.len(), ys.len()) {
                    (2, 2) | (3, 2) => {
                        let k = *xs.last().unwrap();
                        let m = x.numel() / k;
                        let n = ys[1];
                        if rg(*a) {
                            let mut da = vec![T::zero(); m * k];
                            kernels::matmul_nt_acc(g, y.data(), &mut da, m, n, k);
                            put(*a, da, grads);
                        }
                        if rg(*b) {
                            let mut db = vec![T::zero(); k * n];
                            kernels::matmul_tn_acc(x.data(), g, &mut db, m, k, n);
                            put(*b, db, grads);
                        }
                    }
                    _ => {
                        let (bt, m, k, n) = (xs[0], xs[1], xs[2], ys[2]);
                        if rg(*a) {
                            let mut da = vec![T::zero(); bt * m * k];
                            for i in 0..bt {
                                kernels::matmul_nt_acc(
                                    &g[i * m * n..(i + 1) * m * n],
                                    &y.data()[i * k * n..(i + 1) * k * n],
                                    &mut da[i * m * k..(i + 1) * m * k],
                                    m,
                                    n,
                                    k,
                                );
                            }
                            put(*a, da, grads);
                        }
                        if rg(*b) {
                            let mut db = vec![T::zero(); bt * k * n];
                            for i in 0..bt {
                                kernels::matmul_tn_acc(
                                    &x.data()[i * m * k..(i + 1) * m * k],
                                    &g[i * m * n..(i + 1) * m * n],
                                    &mut db[i * k * n..(i + 1) * k * n],
                                    m,
                                    k,
                                    n,
                                );
                            }
                            put(*b, db, grads);
                        }
                    }
                }
            }
            Op::Concat(inputs, axis) => {
                let outer: usize = node.value.shape()[..*axis].iter().product();
                let mut parts: Vec<Vec<T>> = inputs.iter().map(|v| Vec::with_capacity(val(*v).numel())).collect();
                let mut off = 0;
                for _ in 0..outer {
                    for (p, v) in parts.iter_mut().zip(inputs) {
                        let inner = val(*v).numel() / outer;
                        p.extend_from_slice(&g[off..off + inner]);
                        off += inner;
                    }
                }
                for (p, v) in parts.into_iter().zip(inputs) {
                    put(*v, p, grads);
                }
            }
            Op::Reshape(a) => put(*a, g.to_vec(), grads),
            Op::Permute(a, perm) => {
                let (_, d) = kernels::permute(g, node.value.shape(), &kernels::inverse_perm(perm));
                put(*a, d, grads);
            }
            Op::Softmax(a) => {
                let y = node.value.data();
                let n = *node.value.shape().last().unwrap();
                let mut d = vec![T::zero(); y.len()];
                for ((yr, gr), dr) in y.chunks(n).zip(g.chunks(n)).zip(d.chunks_mut(n)) {
                    let dot: T = yr.iter().zip(gr).map(|(&p, &q)| p * q).sum();
                    for ((o, &yv), &gv) in dr.iter_mut().zip(yr).zip(gr) {
                        *o = yv * (gv - dot);
                    }
                }
                put(*a, d, grads);
            }
            Op::Gelu(a) => {
                let d = val(*a).data().iter().zip(g).map(|(&x, &gv)| kernels::gelu_grad(x) * gv).collect();
                put(*a, d, grads);
            }
            Op::Relu(a) => {
                let d = val(*a)
                    .data()
                    .iter()
                    .zip(g)
                    .map(|(&x, &gv)| if x > T::zero() { gv } else { T::zero() })
                    .collect();
                put(*a, d, grads);
            }
            Op::Exp(a) => {
                let d = node.value.data().iter().zip(g).map(|(&y, &gv)| y * gv).collect();
                put(*a, d, grads);
            }
            Op::Abs(a) => {
                let d = val(*a)
                    .data()
                    .iter()
                    .zip(g)
                    .map(|(&x, &gv)| {
                        if x > T::zero() {
                            gv
                        } else if x < T::zero() {
                            -gv
                        } else {
                            T::zero()
                        }
                    })
                    .collect();
                put(*a, d, grads);
            }
            Op::Sum(a) => put(*a, vec![g[0]; val(*a).numel()], grads),
            Op::Mean(a) => {
                let n = val(*a).numel();
                put(*a, vec![g[0] / T::of(n as f64); n], grads);
            }
            Op::LayerNorm(a, rstd) => {
                let y = node.value.data();
                let n = *node.value.shape().last().unwrap();
                let nf = T::of(n as f64);
                let mut d = vec![T::zero(); y.len()];
                for (((yr, gr), dr), &r) in y.chunks(n).zip(g.chunks(n)).zip(d.chunks_mut(n)).zip(rstd) {
                    let mg: T = gr.iter().copied().sum::<T>() / nf;
                    let mgy: T = gr.iter().zip(yr).map(|(&p, &q)| p * q).sum::<T>() / nf;
                    for ((o, &yv), &gv) in dr.iter_mut().zip(yr).zip(gr) {
                        *o = r * (gv - mg - yv * mgy);
                    }
                }
                put(*a, d, grads);
            }
            Op::Conv2d { x, w, geom, cols } => {
                let cout = node.value.shape()[2];
                let (m, k) = (geom.ho * geom.wo, geom.patch_len());
                if rg(*w) {
                    let mut dw = vec![T::zero(); k * cout];
                    kernels::matmul_tn_acc(cols, g, &mut dw, m, k, cout);
                    put(*w, dw, grads);
                }
                if rg(*x) {
                    let mut dcols = vec![T::zero(); m * k];
                    kernels::matmul_nt_acc(g, val(*w).data(), &mut dcols, m, cout, k);
                    let mut dx = vec![T::zero(); val(*x).numel()];
                    kernels::col2im_acc(&dcols, geom, &mut dx);
                    put(*x, dx, grads);
                }
            }
            Op::ConvTranspose2d { x, w, k, stride } => {
                let xs = val(*x).shape();
                let (h, wd, cin) = (xs[0], xs[1], xs[2]);
                let cout = node.value.shape()[2];
                let blk = k * k * cout;
                let dz = kernels::deconv_gather(g, h, wd, *k, *stride, cout);
                if rg(*w) {
                    let mut dw = vec![T::zero(); cin * blk];
                    kernels::matmul_tn_acc(val(*x).data(), &dz, &mut dw, h * wd, cin, blk);
                    put(*w, dw, grads);
                }
                if rg(*x) {
                    let mut dx = vec![T::zero(); h * wd * cin];
                    kernels::matmul_nt_acc(&dz, val(*w).data(), &mut dx, h * wd, blk, cin);
                    put(*x, dx, grads);
                }
            }
            Op::Resize(a) => {
                let s = val(*a).shape();
                let os = node.value.shape();
                let d = kernels::resize_bilinear_backward(g, s[0], s[1], s[2], os[0], os[1]);
                put(*a, d, grads);
            }
            Op::SpatialGrad(a, axis) => {
                let s = val(*a).shape();
                let c = if s.len() == 3 { s[2] } else { 1 };
                put(*a, kernels::spatial_diff_backward(g, s[0], s[1], c, *axis), grads);
            }
            Op::Custom(inputs, f) => {
                let ins: Vec<&Tensor<T>> = inputs.iter().map(|v| val(*v)).collect();
                let ds = f(&ins, &node.value, g);
                if ds.len() != inputs.len() {
                    return Err(Error::arg("custom", "backward returned wrong number of gradients"));
                }
                for (v, d) in inputs.iter().zip(ds) {
                    if d.len() != val(*v).numel() {
                        return Err(Error::shape("custom backward", val(*v).shape(), &[d.len()]));
                    }
                    put(*v, d, grads);
                }
            }
        }
        Ok(())
    }
}
