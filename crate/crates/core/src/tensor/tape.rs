use std::cell::RefCell;
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::tensor::kernels::{self, ConvGeometry};
use crate::tensor::{ActivationKind, LossKind, Scalar, Tensor};

type Id = usize;

enum Op<T> {
    Leaf,
    MatMul(Id, Id),
    Linear { x: Id, w: Id, b: Option<Id> },
    Add(Id, Id),
    Sub(Id, Id),
    Mul(Id, Id),
    Sum(Id),
    Relu(Id),
    Sigmoid(Id),
    Softmax(Id),
    Conv2d { input: Id, kernel: Id, bias: Option<Id>, geom: ConvGeometry },
    ConvTranspose2d { input: Id, kernel: Id, geom: ConvGeometry },
    MaxPool2d { input: Id, argmax: Vec<usize> },
    Reshape(Id),
    Slice { input: Id, start: usize },
    ChannelsLast(Id),
    ChannelAdd { z: Id, r: Id },
    ChannelMul { z: Id, r: Id },
    Loss { logits: Id, dlogits: Vec<T> },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    tracked: bool,
}

/// Records operations for reverse-mode differentiation.
///
/// A tape and its [`Var`]s belong to one thread. Node ids grow with
/// recording order, so every node's inputs precede it.
pub struct Tape<T: Scalar = f32> {
    nodes: RefCell<Vec<Node<T>>>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t, T: Scalar = f32> {
    tape: &'t Tape<T>,
    id: Id,
}

impl<T: Scalar> std::fmt::Debug for Var<'_, T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Var").field("id", &self.id).field("shape", &self.shape()).finish()
    }
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
pub struct Gradients<T> {
    grads: Vec<Option<Vec<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, var: Var<'_, T>) -> Option<&[T]> {
        self.grads.get(var.id).and_then(|g| g.as_deref())
    }

    /// Gradient of `var`, or zeros when the loss does not depend on it.
    pub fn get_or_zeros(&self, var: Var<'_, T>) -> Vec<T> {
        self.get(var)
            .map(|g| g.to_vec())
            .unwrap_or_else(|| vec![T::zero(); var.len()])
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: RefCell::new(Vec::new()),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Records a leaf. Gradients are tracked iff `tensor.requires_grad()`.
    pub fn input(&self, tensor: &Tensor<T>) -> Var<'_, T> {
        self.leaf(tensor, tensor.requires_grad())
    }

    /// Records a leaf that never receives a gradient.
    pub fn constant(&self, tensor: &Tensor<T>) -> Var<'_, T> {
        self.leaf(tensor, false)
    }

    /// Records a leaf with explicit gradient tracking.
    pub fn leaf(&self, tensor: &Tensor<T>, tracked: bool) -> Var<'_, T> {
        let value = Tensor::from_arc(tensor.shape(), Arc::clone(tensor.shared_values()));
        self.push(value, Op::Leaf, tracked)
    }

    fn push(&self, value: Tensor<T>, op: Op<T>, tracked: bool) -> Var<'_, T> {
        let mut nodes = self.nodes.borrow_mut();
        let op = if tracked { op } else { Op::Leaf };
        nodes.push(Node { value, op, tracked });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    fn value_of(&self, id: Id) -> Tensor<T> {
        self.nodes.borrow()[id].value.clone()
    }

    fn tracked(&self, id: Id) -> bool {
        self.nodes.borrow()[id].tracked
    }

    /// Propagates from a scalar `loss` back to every tracked node.
    /// Contributions from multiple uses of a value are summed.
    pub fn backward(&self, loss: Var<'_, T>) -> Result<Gradients<T>> {
        let nodes = self.nodes.borrow();
        let loss_node = &nodes[loss.id];
        if loss_node.value.len() != 1 {
            return Err(Error::NonScalarLoss(loss_node.value.shape().to_vec()));
        }
        let mut grads: Vec<Option<Vec<T>>> = Vec::with_capacity(loss.id + 1);
        grads.resize_with(loss.id + 1, || None);
        if !loss_node.tracked {
            return Ok(Gradients { grads });
        }
        grads[loss.id] = Some(vec![T::one()]);

        for id in (0..=loss.id).rev() {
            let node = &nodes[id];
            if !node.tracked {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            backprop_node(&nodes, node, &g, &mut grads);
            grads[id] = Some(g);
        }
        Ok(Gradients { grads })
    }
}

fn accumulate<T: Scalar>(
    nodes: &[Node<T>],
    grads: &mut [Option<Vec<T>>],
    id: Id,
    contrib: impl FnOnce() -> Vec<T>,
) {
    if !nodes[id].tracked {
        return;
    }
    let c = contrib();
    match &mut grads[id] {
        Some(g) => g.iter_mut().zip(&c).for_each(|(a, b)| *a += *b),
        slot @ None => *slot = Some(c),
    }
}

fn backprop_node<T: Scalar>(nodes: &[Node<T>], node: &Node<T>, g: &[T], grads: &mut [Option<Vec<T>>]) {
    let val = |id: Id| nodes[id].value.values();
    let shape = |id: Id| nodes[id].value.shape();
    match &node.op {
        Op::Leaf => {}
        Op::MatMul(a, b) => {
            let (m, k) = (shape(*a)[0], shape(*a)[1]);
            let n = shape(*b)[1];
            accumulate(nodes, grads, *a, || kernels::matmul_nt(g, val(*b), m, n, k));
            accumulate(nodes, grads, *b, || kernels::matmul_tn(val(*a), g, m, k, n));
        }
        Op::Linear { x, w, b } => {
            let (n_out, n_in) = (shape(*w)[0], shape(*w)[1]);
            let rows = nodes[*x].value.len() / n_in;
            accumulate(nodes, grads, *x, || kernels::matmul(g, val(*w), rows, n_out, n_in));
            accumulate(nodes, grads, *w, || kernels::matmul_tn(g, val(*x), rows, n_out, n_in));
            if let Some(b) = b {
                accumulate(nodes, grads, *b, || {
                    let mut db = vec![T::zero(); n_out];
                    for row in g.chunks(n_out) {
                        db.iter_mut().zip(row).for_each(|(d, v)| *d += *v);
                    }
                    db
                });
            }
        }
        Op::Add(a, b) => {
            accumulate(nodes, grads, *a, || g.to_vec());
            accumulate(nodes, grads, *b, || g.to_vec());
        }
        Op::Sub(a, b) => {
            accumulate(nodes, grads, *a, || g.to_vec());
            accumulate(nodes, grads, *b, || g.iter().map(|v| -*v).collect());
        }
        Op::Mul(a, b) => {
            accumulate(nodes, grads, *a, || g.iter().zip(val(*b)).map(|(g, y)| *g * *y).collect());
            accumulate(nodes, grads, *b, || g.iter().zip(val(*a)).map(|(g, x)| *g * *x).collect());
        }
        Op::Sum(a) => {
            accumulate(nodes, grads, *a, || vec![g[0]; nodes[*a].value.len()]);
        }
        Op::Relu(a) => {
            accumulate(nodes, grads, *a, || {
                g.iter()
                    .zip(val(*a))
                    .map(|(g, x)| if *x > T::zero() { *g } else { T::zero() })
                    .collect()
            });
        }
        Op::Sigmoid(a) => {
            let y = node.value.values();
            accumulate(nodes, grads, *a, || {
                g.iter().zip(y).map(|(g, y)| *g * *y * (T::one() - *y)).collect()
            });
        }
        Op::Softmax(a) => {
            let y = node.value.values();
            let cols = *node.value.shape().last().unwrap();
            accumulate(nodes, grads, *a, || {
                let mut out = Vec::with_capacity(y.len());
                for (yr, gr) in y.chunks(cols).zip(g.chunks(cols)) {
                    let s = kernels::dot(yr, gr);
                    out.extend(yr.iter().zip(gr).map(|(y, g)| *y * (*g - s)));
                }
                out
            });
        }
        Op::Conv2d {
            input,
            kernel,
            bias,
            geom,
        } => {
            accumulate(nodes, grads, *input, || kernels::conv2d_input_adjoint(g, val(*kernel), geom));
            accumulate(nodes, grads, *kernel, || kernels::conv2d_kernel_adjoint(val(*input), g, geom));
            if let Some(b) = bias {
                let plane = geom.out_h * geom.out_w;
                accumulate(nodes, grads, *b, || g.chunks(plane).map(|c| c.iter().copied().sum()).collect());
            }
        }
        Op::ConvTranspose2d { input, kernel, geom } => {
            // geom describes the convolution whose input adjoint produced
            // this node; its input is our output and its output our input.
            accumulate(nodes, grads, *input, || kernels::conv2d(g, val(*kernel), None, geom));
            accumulate(nodes, grads, *kernel, || kernels::conv2d_kernel_adjoint(g, val(*input), geom));
        }
        Op::MaxPool2d { input, argmax } => {
            accumulate(nodes, grads, *input, || {
                let mut d = vec![T::zero(); nodes[*input].value.len()];
                for (gv, &idx) in g.iter().zip(argmax) {
                    d[idx] += *gv;
                }
                d
            });
        }
        Op::Reshape(a) => accumulate(nodes, grads, *a, || g.to_vec()),
        Op::Slice { input, start } => {
            accumulate(nodes, grads, *input, || {
                let mut d = vec![T::zero(); nodes[*input].value.len()];
                d[*start..*start + g.len()].copy_from_slice(g);
                d
            });
        }
        Op::ChannelsLast(a) => {
            let s = shape(*a);
            let (c, hw) = (s[0], s[1] * s[2]);
            accumulate(nodes, grads, *a, || {
                let mut d = vec![T::zero(); c * hw];
                for p in 0..hw {
                    for ch in 0..c {
                        d[ch * hw + p] = g[p * c + ch];
                    }
                }
                d
            });
        }
        Op::ChannelAdd { z, r } => {
            let plane = nodes[*z].value.len() / nodes[*r].value.len();
            accumulate(nodes, grads, *z, || g.to_vec());
            accumulate(nodes, grads, *r, || g.chunks(plane).map(|c| c.iter().copied().sum()).collect());
        }
        Op::ChannelMul { z, r } => {
            let rv = val(*r);
            let plane = nodes[*z].value.len() / rv.len();
            accumulate(nodes, grads, *z, || {
                g.chunks(plane)
                    .zip(rv)
                    .flat_map(|(c, r)| c.iter().map(move |g| *g * *r))
                    .collect()
            });
            accumulate(nodes, grads, *r, || {
                g.chunks(plane)
                    .zip(val(*z).chunks(plane))
                    .map(|(gc, zc)| kernels::dot(gc, zc))
                    .collect()
            });
        }
        Op::Loss { logits, dlogits } => {
            accumulate(nodes, grads, *logits, || dlogits.iter().map(|d| *d * g[0]).collect());
        }
    }
}

impl<'t, T: Scalar> Var<'t, T> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn tape(&self) -> &'t Tape<T> {
        self.tape
    }

    /// Current value (shares the payload with the tape).
    pub fn value(&self) -> Tensor<T> {
        self.tape.value_of(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.nodes.borrow()[self.id].value.shape().to_vec()
    }

    pub fn len(&self) -> usize {
        self.tape.nodes.borrow()[self.id].value.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn is_tracked(&self) -> bool {
        self.tape.tracked(self.id)
    }

    fn same_tape(&self, other: &Var<'t, T>) {
        assert!(
            std::ptr::eq(self.tape, other.tape),
            "vars recorded on different tapes"
        );
    }

    fn emit(&self, shape: &[usize], values: Vec<T>, op: Op<T>, tracked: bool) -> Var<'t, T> {
        self.tape.push(Tensor::from_arc(shape, Arc::new(values)), op, tracked)
    }

    /// `[m, k] x [k, n] -> [m, n]`
    pub fn matmul(self, rhs: Var<'t, T>) -> Result<Var<'t, T>> {
        self.same_tape(&rhs);
        let (a, b) = (self.value(), rhs.value());
        let (sa, sb) = (a.shape(), b.shape());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                left: sa.to_vec(),
                right: sb.to_vec(),
            });
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let out = kernels::matmul(a.values(), b.values(), m, k, n);
        let tracked = self.is_tracked() || rhs.is_tracked();
        Ok(self.emit(&[m, n], out, Op::MatMul(self.id, rhs.id), tracked))
    }

    /// Dense map `x W^T + b` where `x` is `[n_in]` or `[rows, n_in]` and
    /// `W` is `[n_out, n_in]`.
    pub fn linear(self, weight: Var<'t, T>, bias: Option<Var<'t, T>>) -> Result<Var<'t, T>> {
        self.same_tape(&weight);
        let (x, w) = (self.value(), weight.value());
        let ws = w.shape();
        let xs = x.shape();
        let n_in = *xs.last().unwrap();
        if ws.len() != 2 || xs.len() > 2 || ws[1] != n_in {
            return Err(Error::ShapeMismatch {
                op: "linear",
                left: xs.to_vec(),
                right: ws.to_vec(),
            });
        }
        let n_out = ws[0];
        let b = match bias {
            Some(b) => {
                self.same_tape(&b);
                let bv = b.value();
                if bv.len() != n_out {
                    return Err(Error::ShapeMismatch {
                        op: "linear bias",
                        left: ws.to_vec(),
                        right: bv.shape().to_vec(),
                    });
                }
                Some(bv)
            }
            None => None,
        };
        let rows = x.len() / n_in;
        let out = kernels::linear(x.values(), w.values(), b.as_ref().map(|b| b.values()), rows, n_in, n_out);
        let shape: &[usize] = if xs.len() == 1 { &[n_out] } else { &[rows, n_out] };
        let tracked = self.is_tracked() || weight.is_tracked() || bias.is_some_and(|b| b.is_tracked());
        Ok(self.emit(
            shape,
            out,
            Op::Linear {
                x: self.id,
                w: weight.id,
                b: bias.map(|b| b.id),
            },
            tracked,
        ))
    }

    fn elementwise(
        self,
        rhs: Var<'t, T>,
        name: &'static str,
        f: impl Fn(T, T) -> T,
        op: fn(Id, Id) -> Op<T>,
    ) -> Result<Var<'t, T>> {
        self.same_tape(&rhs);
        let (a, b) = (self.value(), rhs.value());
        if a.shape() != b.shape() {
            return Err(Error::ShapeMismatch {
                op: name,
                left: a.shape().to_vec(),
                right: b.shape().to_vec(),
            });
        }
        let out = a.values().iter().zip(b.values()).map(|(x, y)| f(*x, *y)).collect();
        let tracked = self.is_tracked() || rhs.is_tracked();
        Ok(self.emit(a.shape(), out, op(self.id, rhs.id), tracked))
    }

    pub fn add(self, rhs: Var<'t, T>) -> Result<Var<'t, T>> {
        self.elementwise(rhs, "add", |a, b| a + b, Op::Add)
    }

    pub fn sub(self, rhs: Var<'t, T>) -> Result<Var<'t, T>> {
        self.elementwise(rhs, "sub", |a, b| a - b, Op::Sub)
    }

    pub fn mul(self, rhs: Var<'t, T>) -> Result<Var<'t, T>> {
        self.elementwise(rhs, "mul", |a, b| a * b, Op::Mul)
    }

    pub fn sum(self) -> Var<'t, T> {
        let total: T = self.value().values().iter().copied().sum();
        self.emit(&[1], vec![total], Op::Sum(self.id), self.is_tracked())
    }

    pub fn relu(self) -> Var<'t, T> {
        let x = self.value();
        let out = x
            .values()
            .iter()
            .map(|v| if *v > T::zero() { *v } else { T::zero() })
            .collect();
        self.emit(x.shape(), out, Op::Relu(self.id), self.is_tracked())
    }

    pub fn sigmoid(self) -> Var<'t, T> {
        let x = self.value();
        let out = x.values().iter().map(|v| kernels::sigmoid(*v)).collect();
        self.emit(x.shape(), out, Op::Sigmoid(self.id), self.is_tracked())
    }

    /// Softmax along the last dimension.
    pub fn softmax(self) -> Var<'t, T> {
        let x = self.value();
        let cols = *x.shape().last().unwrap();
        let out = kernels::softmax_rows(x.values(), cols);
        self.emit(x.shape(), out, Op::Softmax(self.id), self.is_tracked())
    }

    pub fn activation(self, kind: ActivationKind) -> Var<'t, T> {
        match kind {
            ActivationKind::Relu => self.relu(),
            ActivationKind::Sigmoid => self.sigmoid(),
            ActivationKind::SoftmaxLastdim => self.softmax(),
            ActivationKind::Identity => self,
        }
    }

    /// Cross-correlation of a `[C_in, H, W]` input with a
    /// `[C_out, C_in, kh, kw]` kernel.
    pub fn conv2d(
        self,
        kernel: Var<'t, T>,
        bias: Option<Var<'t, T>>,
        stride: usize,
        padding: usize,
    ) -> Result<Var<'t, T>> {
        self.same_tape(&kernel);
        let (x, k) = (self.value(), kernel.value());
        let (xs, ks) = (x.shape(), k.shape());
        if xs.len() != 3 || ks.len() != 4 || ks[1] != xs[0] {
            return Err(Error::ShapeMismatch {
                op: "conv2d",
                left: xs.to_vec(),
                right: ks.to_vec(),
            });
        }
        let geom = ConvGeometry::conv([xs[0], xs[1], xs[2]], ks[0], [ks[2], ks[3]], stride, padding)?;
        let b = match bias {
            Some(b) => {
                self.same_tape(&b);
                let bv = b.value();
                if bv.len() != ks[0] {
                    return Err(Error::ShapeMismatch {
                        op: "conv2d bias",
                        left: ks.to_vec(),
                        right: bv.shape().to_vec(),
                    });
                }
                Some(bv)
            }
            None => None,
        };
        let out = kernels::conv2d(x.values(), k.values(), b.as_ref().map(|b| b.values()), &geom);
        let tracked = self.is_tracked() || kernel.is_tracked() || bias.is_some_and(|b| b.is_tracked());
        Ok(self.emit(
            &[geom.out_channels, geom.out_h, geom.out_w],
            out,
            Op::Conv2d {
                input: self.id,
                kernel: kernel.id,
                bias: bias.map(|b| b.id),
                geom,
            },
            tracked,
        ))
    }

    /// Transposed convolution of a `[C_in, H, W]` input with a
    /// `[C_in, C_out, kh, kw]` kernel; output height is
    /// `(H - 1) * stride - 2 * padding + kh`.
    pub fn conv_transpose2d(self, kernel: Var<'t, T>, stride: usize, padding: usize) -> Result<Var<'t, T>> {
        self.same_tape(&kernel);
        let (x, k) = (self.value(), kernel.value());
        let (xs, ks) = (x.shape(), k.shape());
        if xs.len() != 3 || ks.len() != 4 || ks[0] != xs[0] {
            return Err(Error::ShapeMismatch {
                op: "conv_transpose2d",
                left: xs.to_vec(),
                right: ks.to_vec(),
            });
        }
        let geom = ConvGeometry::transposed([xs[0], xs[1], xs[2]], ks[1], [ks[2], ks[3]], stride, padding)?;
        let out = kernels::conv2d_input_adjoint(x.values(), k.values(), &geom);
        let tracked = self.is_tracked() || kernel.is_tracked();
        Ok(self.emit(
            &[geom.in_channels, geom.in_h, geom.in_w],
            out,
            Op::ConvTranspose2d {
                input: self.id,
                kernel: kernel.id,
                geom,
            },
            tracked,
        ))
    }

    /// Non-overlapping `kh x kw` max pooling of a `[C, H, W]` input.
    pub fn max_pool2d(self, kh: usize, kw: usize) -> Result<Var<'t, T>> {
        let x = self.value();
        let s = x.shape();
        if s.len() != 3 || kh == 0 || kw == 0 || kh > s[1] || kw > s[2] {
            return Err(Error::InvalidShape(format!(
                "max_pool2d window {kh}x{kw} on input {s:?}"
            )));
        }
        let (out, argmax) = kernels::max_pool2d(x.values(), [s[0], s[1], s[2]], [kh, kw]);
        Ok(self.emit(
            &[s[0], s[1] / kh, s[2] / kw],
            out,
            Op::MaxPool2d {
                input: self.id,
                argmax,
            },
            self.is_tracked(),
        ))
    }

    pub fn reshape(self, shape: &[usize]) -> Result<Var<'t, T>> {
        let x = self.value();
        let reshaped = x.reshape(shape)?;
        Ok(self.tape.push(reshaped, Op::Reshape(self.id), self.is_tracked()))
    }

    pub fn flatten(self) -> Var<'t, T> {
        let n = self.len();
        self.reshape(&[n]).expect("flatten preserves length")
    }

    /// Contiguous `len` elements of a rank-1 value starting at `start`.
    pub fn slice(self, start: usize, len: usize) -> Result<Var<'t, T>> {
        let x = self.value();
        if x.rank() != 1 || len == 0 || start + len > x.len() {
            return Err(Error::InvalidShape(format!(
                "slice [{start}, {}) of shape {:?}",
                start + len,
                x.shape()
            )));
        }
        let out = x.values()[start..start + len].to_vec();
        Ok(self.emit(&[len], out, Op::Slice { input: self.id, start }, self.is_tracked()))
    }

    /// `[C, H, W] -> [H, W, C]`
    pub fn channels_last(self) -> Result<Var<'t, T>> {
        let x = self.value();
        let s = x.shape();
        if s.len() != 3 {
            return Err(Error::InvalidShape(format!("channels_last expects rank 3, got {s:?}")));
        }
        let (c, hw) = (s[0], s[1] * s[2]);
        let v = x.values();
        let mut out = Vec::with_capacity(v.len());
        for p in 0..hw {
            for ch in 0..c {
                out.push(v[ch * hw + p]);
            }
        }
        Ok(self.emit(&[s[1], s[2], c], out, Op::ChannelsLast(self.id), self.is_tracked()))
    }

    fn check_channels(&self, r: &Var<'t, T>, op: &'static str) -> Result<(Tensor<T>, Tensor<T>)> {
        self.same_tape(r);
        let (z, rv) = (self.value(), r.value());
        if z.rank() < 2 || rv.rank() != 1 || rv.len() != z.shape()[0] {
            return Err(Error::ShapeMismatch {
                op,
                left: z.shape().to_vec(),
                right: rv.shape().to_vec(),
            });
        }
        Ok((z, rv))
    }

    /// Adds `r[c]` to every element of channel `c`.
    pub fn channel_add(self, r: Var<'t, T>) -> Result<Var<'t, T>> {
        let (z, rv) = self.check_channels(&r, "channel_add")?;
        let plane = z.len() / rv.len();
        let out = z
            .values()
            .chunks(plane)
            .zip(rv.values())
            .flat_map(|(c, r)| c.iter().map(move |v| *v + *r))
            .collect();
        let tracked = self.is_tracked() || r.is_tracked();
        Ok(self.emit(z.shape(), out, Op::ChannelAdd { z: self.id, r: r.id }, tracked))
    }

    /// Multiplies every element of channel `c` by `r[c]`.
    pub fn channel_mul(self, r: Var<'t, T>) -> Result<Var<'t, T>> {
        let (z, rv) = self.check_channels(&r, "channel_mul")?;
        let plane = z.len() / rv.len();
        let out = z
            .values()
            .chunks(plane)
            .zip(rv.values())
            .flat_map(|(c, r)| c.iter().map(move |v| *r * *v))
            .collect();
        let tracked = self.is_tracked() || r.is_tracked();
        Ok(self.emit(z.shape(), out, Op::ChannelMul { z: self.id, r: r.id }, tracked))
    }

    /// Scalar loss restricted to positions where `mask == 1`; see
    /// [`kernels::masked_loss`].
    pub fn masked_loss(self, target: &Tensor<T>, mask: &Tensor<T>, kind: LossKind) -> Result<Var<'t, T>> {
        let z = self.value();
        if z.shape() != target.shape() || z.shape() != mask.shape() {
            return Err(Error::ShapeMismatch {
                op: "masked_loss",
                left: z.shape().to_vec(),
                right: if z.shape() != target.shape() {
                    target.shape().to_vec()
                } else {
                    mask.shape().to_vec()
                },
            });
        }
        let classes = *z.shape().last().unwrap();
        let (loss, dlogits) = kernels::masked_loss(z.values(), target.values(), mask.values(), classes, kind)?;
        Ok(self.emit(
            &[1],
            vec![loss],
            Op::Loss {
                logits: self.id,
                dlogits,
            },
            self.is_tracked(),
        ))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], v: Vec<f64>) -> Tensor<f64> {
        Tensor::new(shape, v).unwrap()
    }

    #[test]
    fn sum_gradient_is_ones() {
        let tape = Tape::new();
        let x = tape.input(&t(&[2, 3], vec![0.5; 6]).with_requires_grad(true));
        let g = tape.backward(x.sum()).unwrap();
        assert_eq!(g.get(x).unwrap(), &[1.0; 6]);
    }

    #[test]
    fn square_gradient() {
        let tape = Tape::new();
        let x = tape.input(&t(&[3], vec![1.0, 2.0, 3.0]).with_requires_grad(true));
        let g = tape.backward(x.mul(x).unwrap().sum()).unwrap();
        assert_eq!(g.get(x).unwrap(), &[2.0, 4.0, 6.0]);
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let tape = Tape::new();
        let x = tape.input(&t(&[2], vec![1.0, 2.0]).with_requires_grad(true));
        assert!(matches!(tape.backward(x), Err(Error::NonScalarLoss(_))));
    }

    #[test]
    fn constants_get_no_gradient() {
        let tape = Tape::new();
        let x = tape.input(&t(&[2], vec![1.0, 2.0]).with_requires_grad(true));
        let c = tape.constant(&t(&[2], vec![3.0, 4.0]));
        let g = tape.backward(x.mul(c).unwrap().sum()).unwrap();
        assert_eq!(g.get(x).unwrap(), &[3.0, 4.0]);
        assert!(g.get(c).is_none());
    }

    #[test]
    fn untracked_graph_records_no_rules() {
        let tape = Tape::new();
        let a = tape.constant(&t(&[2], vec![1.0, 2.0]));
        let y = a.mul(a).unwrap().sum();
        assert!(!y.is_tracked());
        let g = tape.backward(y).unwrap();
        assert!(g.get(a).is_none());
    }

    #[test]
    fn identity_matmul() {
        let tape = Tape::<f64>::new();
        let i = tape.constant(&t(&[2, 2], vec![1.0, 0.0, 0.0, 1.0]));
        let b = tape.constant(&t(&[2, 2], vec![5.0, 6.0, 7.0, 8.0]));
        assert_eq!(i.matmul(b).unwrap().value().values(), &[5.0, 6.0, 7.0, 8.0]);
        let r = tape.constant(&t(&[1, 2], vec![1.0, 2.0]));
        let c = tape.constant(&t(&[2, 1], vec![3.0, 4.0]));
        assert_eq!(r.matmul(c).unwrap().value().values(), &[11.0]);
        let err = r.matmul(r).unwrap_err();
        assert!(err.to_string().contains("[1, 2]"));
    }

    #[test]
    fn activations() {
        let tape = Tape::<f64>::new();
        let x = tape.constant(&t(&[3], vec![-1.0, 0.0, 2.0]));
        assert_eq!(x.relu().value().values(), &[0.0, 0.0, 2.0]);
        let z = tape.constant(&t(&[2], vec![0.0, 0.0]));
        assert_eq!(z.softmax().value().values(), &[0.5, 0.5]);
        assert_eq!(x.activation(ActivationKind::Identity).id(), x.id());
    }

    #[test]
    fn slice_and_channel_ops() {
        let tape = Tape::<f64>::new();
        let r = tape.constant(&t(&[4], vec![1.0, 2.0, 3.0, 4.0]));
        assert_eq!(r.slice(2, 2).unwrap().value().values(), &[3.0, 4.0]);
        assert!(r.slice(3, 2).is_err());

        let z = tape.constant(&t(&[2, 1, 2], vec![1.0, 1.0, 1.0, 1.0]));
        let rr = tape.constant(&t(&[2], vec![1.0, -1.0]));
        assert_eq!(z.channel_add(rr).unwrap().value().values(), &[2.0, 2.0, 0.0, 0.0]);
        assert_eq!(z.channel_mul(rr).unwrap().value().values(), &[1.0, 1.0, -1.0, -1.0]);
        assert!(z.channel_add(r).is_err());
    }

    #[test]
    fn channels_last_layout() {
        let tape = Tape::<f64>::new();
        let z = tape.constant(&t(&[2, 1, 2], vec![1.0, 2.0, 3.0, 4.0]));
        let y = z.channels_last().unwrap();
        assert_eq!(y.shape(), vec![1, 2, 2]);
        assert_eq!(y.value().values(), &[1.0, 3.0, 2.0, 4.0]);
    }
}
