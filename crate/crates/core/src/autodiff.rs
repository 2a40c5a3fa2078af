//! Reverse-mode automatic differentiation over [`Tensor`] values.
//!
//! A [`Tape`] records every operation in execution order. Leaves created with
//! [`Tape::leaf`] require gradients; [`Tape::constant`] leaves do not, and an
//! operation requires gradients when any of its inputs does. Gradients are not
//! stored on tensors: [`Tape::backward`] returns a [`Gradients`] table indexed
//! by [`Var`], holding one same-shape array per reachable node.
//!
//! Broadcasting is limited to identical shapes and one-element-vs-tensor.
//! Index routing (gather/take) passes gradients through the gathered values
//! only; the indices themselves are constants.

use std::cell::{Ref, RefCell};
use std::fmt;

use crate::error::{Error, Result};
use crate::linalg::{gemm, MatRef};
use crate::tensor::{sign, strides, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Bcast {
    Same,
    ScalarLhs,
    ScalarRhs,
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(usize, usize, Bcast),
    Sub(usize, usize, Bcast),
    Mul(usize, usize, Bcast),
    Scale(usize, f64),
    Relu(usize),
    Exp(usize),
    Log(usize),
    Sign(usize),
    MatMul(usize, usize),
    Permute(usize, Vec<usize>),
    Reshape(usize),
    Softmax(usize, usize),
    LogSoftmax(usize, usize),
    Sum(usize, usize),
    Mean(usize, usize),
    SumAll(usize),
    Max(usize, usize, Vec<usize>),
    Gather(usize, Vec<usize>),
    Take(usize, Vec<usize>),
    Concat(Vec<usize>),
    AddBias(usize, usize),
    Conv2d {
        input: usize,
        kernel: usize,
        bias: Option<usize>,
        stride: usize,
        padding: usize,
    },
    Upsample(usize, usize),
}

struct Node {
    value: Tensor,
    requires_grad: bool,
    op: Op,
}

/// Operation recorder. Confined to one thread; cheap to create per step.
#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
}

impl fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Var#{} {:?}", self.id, *self.value())
    }
}

/// Gradients produced by [`Tape::backward`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    visited: Vec<usize>,
}

impl Gradients {
    pub fn get(&self, var: Var<'_>) -> Option<&Tensor> {
        self.grads.get(var.id).and_then(Option::as_ref)
    }

    /// Gradient of `var`, or zeros of its shape when it is unreachable.
    pub fn wrt(&self, var: Var<'_>) -> Tensor {
        self.get(var).cloned().unwrap_or_else(|| Tensor::zeros(var.shape()))
    }

    /// Node ids whose backward rule ran, in the order they ran.
    pub fn visit_order(&self) -> &[usize] {
        &self.visited
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Trainable leaf.
    pub fn leaf(&self, value: Tensor) -> Var<'_> {
        self.push(value, true, Op::Leaf)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.push(value, false, Op::Leaf)
    }

    fn push(&self, value: Tensor, requires_grad: bool, op: Op) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            requires_grad,
            op,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    fn requires(&self, ids: &[usize]) -> bool {
        let nodes = self.nodes.borrow();
        ids.iter().any(|&i| nodes[i].requires_grad)
    }

    fn record(&self, value: Tensor, inputs: &[usize], op: Op) -> Var<'_> {
        let rg = self.requires(inputs);
        self.push(value, rg, op)
    }

    /// Reverse sweep from a one-element `loss`.
    pub fn backward(&self, loss: Var<'_>) -> Result<Gradients> {
        assert!(std::ptr::eq(loss.tape, self), "loss belongs to another tape");
        let nodes = self.nodes.borrow();
        let seed = &nodes[loss.id].value;
        if seed.numel() != 1 {
            return Err(Error::invalid(
                "backward",
                format!("loss must be scalar, got shape {:?}", seed.shape()),
            ));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; nodes.len()];
        grads[loss.id] = Some(Tensor::full(seed.shape(), 1.0));
        let mut visited = Vec::new();

        for id in (0..=loss.id).rev() {
            let node = &nodes[id];
            if matches!(node.op, Op::Leaf) || !node.requires_grad {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            visited.push(id);
            backprop(&nodes, node, &g, &mut grads);
            grads[id] = Some(g);
        }
        drop(nodes);
        Ok(Gradients { grads, visited })
    }
}

fn accumulate(grads: &mut [Option<Tensor>], nodes: &[Node], id: usize, delta: Tensor) {
    if !nodes[id].requires_grad {
        return;
    }
    match &mut grads[id] {
        Some(existing) => {
            for (a, b) in existing.data_mut().iter_mut().zip(delta.data()) {
                *a += b;
            }
        }
        slot @ None => *slot = Some(delta),
    }
}

fn shaped(shape: &[usize], data: Vec<f64>) -> Tensor {
    Tensor::new(shape.to_vec(), data).expect("internal shape bookkeeping")
}

/// Splits `shape` around `axis` into (outer, extent, inner).
fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn reduce_shape(shape: &[usize], axis: usize) -> Vec<usize> {
    let mut out = shape.to_vec();
    out.remove(axis);
    out
}

fn bcast_grad(g: &Tensor, shape: &[usize], scalar_side: bool) -> Tensor {
    if scalar_side {
        shaped(shape, vec![g.data().iter().sum()])
    } else {
        g.clone()
    }
}

fn backprop(nodes: &[Node], node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) {
    let val = |i: usize| &nodes[i].value;
    let gd = g.data();
    match &node.op {
        Op::Leaf => {}
        Op::Add(a, b, bc) => {
            let (a, b) = (*a, *b);
            accumulate(grads, nodes, a, bcast_grad(g, val(a).shape(), *bc == Bcast::ScalarLhs));
            accumulate(grads, nodes, b, bcast_grad(g, val(b).shape(), *bc == Bcast::ScalarRhs));
        }
        Op::Sub(a, b, bc) => {
            let (a, b) = (*a, *b);
            accumulate(grads, nodes, a, bcast_grad(g, val(a).shape(), *bc == Bcast::ScalarLhs));
            let neg = g.map(|x| -x);
            accumulate(
                grads,
                nodes,
                b,
                bcast_grad(&neg, val(b).shape(), *bc == Bcast::ScalarRhs),
            );
        }
        Op::Mul(a, b, bc) => {
            let (a, b) = (*a, *b);
            let (av, bv) = (val(a), val(b));
            match bc {
                Bcast::Same => {
                    let ga = gd.iter().zip(bv.data()).map(|(g, y)| g * y).collect();
                    let gb = gd.iter().zip(av.data()).map(|(g, x)| g * x).collect();
                    accumulate(grads, nodes, a, shaped(av.shape(), ga));
                    accumulate(grads, nodes, b, shaped(bv.shape(), gb));
                }
                Bcast::ScalarLhs => {
                    let s = av.item();
                    let ga = gd.iter().zip(bv.data()).map(|(g, y)| g * y).sum();
                    accumulate(grads, nodes, a, shaped(av.shape(), vec![ga]));
                    accumulate(grads, nodes, b, g.map(|x| x * s));
                }
                Bcast::ScalarRhs => {
                    let s = bv.item();
                    let gb = gd.iter().zip(av.data()).map(|(g, x)| g * x).sum();
                    accumulate(grads, nodes, a, g.map(|x| x * s));
                    accumulate(grads, nodes, b, shaped(bv.shape(), vec![gb]));
                }
            }
        }
        Op::Scale(a, f) => accumulate(grads, nodes, *a, g.map(|x| x * f)),
        Op::Relu(a) => {
            let d = gd
                .iter()
                .zip(val(*a).data())
                .map(|(g, &x)| if x > 0.0 { *g } else { 0.0 })
                .collect();
            accumulate(grads, nodes, *a, shaped(g.shape(), d));
        }
        Op::Exp(a) => {
            let d = gd.iter().zip(node.value.data()).map(|(g, y)| g * y).collect();
            accumulate(grads, nodes, *a, shaped(g.shape(), d));
        }
        Op::Log(a) => {
            let d = gd.iter().zip(val(*a).data()).map(|(g, x)| g / x).collect();
            accumulate(grads, nodes, *a, shaped(g.shape(), d));
        }
        Op::Sign(a) => accumulate(grads, nodes, *a, Tensor::zeros(g.shape())),
        Op::MatMul(a, b) => {
            let (a, b) = (*a, *b);
            let (av, bv) = (val(a), val(b));
            let (m, k, n) = (av.shape()[0], av.shape()[1], bv.shape()[1]);
            if nodes[a].requires_grad {
                let mut ga = vec![0.0; m * k];
                gemm(
                    MatRef::row_major(gd, m, n),
                    MatRef::row_major(bv.data(), k, n).t(),
                    0.0,
                    &mut ga,
                );
                accumulate(grads, nodes, a, shaped(av.shape(), ga));
            }
            if nodes[b].requires_grad {
                let mut gb = vec![0.0; k * n];
                gemm(
                    MatRef::row_major(av.data(), m, k).t(),
                    MatRef::row_major(gd, m, n),
                    0.0,
                    &mut gb,
                );
                accumulate(grads, nodes, b, shaped(bv.shape(), gb));
            }
        }
        Op::Permute(a, axes) => {
            let mut inverse = vec![0; axes.len()];
            for (i, &ax) in axes.iter().enumerate() {
                inverse[ax] = i;
            }
            accumulate(grads, nodes, *a, permute_values(g, &inverse));
        }
        Op::Reshape(a) => {
            accumulate(grads, nodes, *a, shaped(val(*a).shape(), gd.to_vec()));
        }
        Op::Softmax(a, axis) => {
            let y = &node.value;
            let (outer, n, inner) = axis_split(y.shape(), *axis);
            let yd = y.data();
            let mut d = vec![0.0; yd.len()];
            for o in 0..outer {
                for i in 0..inner {
                    let base = o * n * inner + i;
                    let dot: f64 = (0..n).map(|j| gd[base + j * inner] * yd[base + j * inner]).sum();
                    for j in 0..n {
                        let p = base + j * inner;
                        d[p] = yd[p] * (gd[p] - dot);
                    }
                }
            }
            accumulate(grads, nodes, *a, shaped(y.shape(), d));
        }
        Op::LogSoftmax(a, axis) => {
            let y = &node.value;
            let (outer, n, inner) = axis_split(y.shape(), *axis);
            let yd = y.data();
            let mut d = vec![0.0; yd.len()];
            for o in 0..outer {
                for i in 0..inner {
                    let base = o * n * inner + i;
                    let total: f64 = (0..n).map(|j| gd[base + j * inner]).sum();
                    for j in 0..n {
                        let p = base + j * inner;
                        d[p] = gd[p] - yd[p].exp() * total;
                    }
                }
            }
            accumulate(grads, nodes, *a, shaped(y.shape(), d));
        }
        Op::Sum(a, axis) | Op::Mean(a, axis) => {
            let shape = val(*a).shape();
            let (outer, n, inner) = axis_split(shape, *axis);
            let f = if matches!(node.op, Op::Mean(..)) {
                1.0 / n as f64
            } else {
                1.0
            };
            let mut d = vec![0.0; outer * n * inner];
            for o in 0..outer {
                for j in 0..n {
                    for i in 0..inner {
                        d[(o * n + j) * inner + i] = gd[o * inner + i] * f;
                    }
                }
            }
            accumulate(grads, nodes, *a, shaped(shape, d));
        }
        Op::SumAll(a) => {
            let s = g.item();
            accumulate(grads, nodes, *a, Tensor::full(val(*a).shape(), s));
        }
        Op::Max(a, axis, argmax) => {
            let shape = val(*a).shape();
            let (outer, n, inner) = axis_split(shape, *axis);
            let mut d = vec![0.0; outer * n * inner];
            for o in 0..outer {
                for i in 0..inner {
                    let j = argmax[o * inner + i];
                    d[(o * n + j) * inner + i] = gd[o * inner + i];
                }
            }
            accumulate(grads, nodes, *a, shaped(shape, d));
        }
        Op::Gather(a, indices) => {
            let shape = val(*a).shape();
            let row: usize = shape[1..].iter().product();
            let mut d = vec![0.0; val(*a).numel()];
            for (j, &r) in indices.iter().enumerate() {
                for (dst, src) in d[r * row..(r + 1) * row].iter_mut().zip(&gd[j * row..(j + 1) * row]) {
                    *dst += src;
                }
            }
            accumulate(grads, nodes, *a, shaped(shape, d));
        }
        Op::Take(a, indices) => {
            let mut d = vec![0.0; val(*a).numel()];
            for (j, &p) in indices.iter().enumerate() {
                d[p] += gd[j];
            }
            accumulate(grads, nodes, *a, shaped(val(*a).shape(), d));
        }
        Op::Concat(inputs) => {
            let mut offset = 0;
            for &id in inputs {
                let n = val(id).numel();
                accumulate(
                    grads,
                    nodes,
                    id,
                    shaped(val(id).shape(), gd[offset..offset + n].to_vec()),
                );
                offset += n;
            }
        }
        Op::AddBias(a, b) => {
            accumulate(grads, nodes, *a, g.clone());
            let n = val(*b).numel();
            let mut d = vec![0.0; n];
            for chunk in gd.chunks(n) {
                for (dst, src) in d.iter_mut().zip(chunk) {
                    *dst += src;
                }
            }
            accumulate(grads, nodes, *b, shaped(val(*b).shape(), d));
        }
        Op::Conv2d {
            input,
            kernel,
            bias,
            stride,
            padding,
        } => {
            let geom = ConvGeom::new(val(*input).shape(), val(*kernel).shape(), *stride, *padding)
                .expect("validated at record time");
            let (dx, dk, db) = conv2d_backward(
                &geom,
                val(*input).data(),
                val(*kernel).data(),
                gd,
                nodes[*input].requires_grad,
                nodes[*kernel].requires_grad,
            );
            if let Some(dx) = dx {
                accumulate(grads, nodes, *input, shaped(val(*input).shape(), dx));
            }
            if let Some(dk) = dk {
                accumulate(grads, nodes, *kernel, shaped(val(*kernel).shape(), dk));
            }
            if let Some(b) = bias {
                accumulate(grads, nodes, *b, shaped(val(*b).shape(), db));
            }
        }
        Op::Upsample(a, f) => {
            let shape = val(*a).shape();
            let nd = shape.len();
            let (h, w) = (shape[nd - 2], shape[nd - 1]);
            let planes = val(*a).numel() / (h * w);
            let (oh, ow) = (h * f, w * f);
            let mut d = vec![0.0; val(*a).numel()];
            for p in 0..planes {
                for y in 0..oh {
                    for x in 0..ow {
                        d[p * h * w + (y / f) * w + x / f] += gd[p * oh * ow + y * ow + x];
                    }
                }
            }
            accumulate(grads, nodes, *a, shaped(shape, d));
        }
    }
}

fn permute_values(t: &Tensor, axes: &[usize]) -> Tensor {
    let in_shape = t.shape();
    let in_strides = strides(in_shape);
    let out_shape: Vec<usize> = axes.iter().map(|&a| in_shape[a]).collect();
    let src_strides: Vec<usize> = axes.iter().map(|&a| in_strides[a]).collect();
    let numel = t.numel();
    let mut out = Vec::with_capacity(numel);
    let mut idx = vec![0usize; out_shape.len()];
    let data = t.data();
    for _ in 0..numel {
        let off: usize = idx.iter().zip(&src_strides).map(|(i, s)| i * s).sum();
        out.push(data[off]);
        for d in (0..idx.len()).rev() {
            idx[d] += 1;
            if idx[d] < out_shape[d] {
                break;
            }
            idx[d] = 0;
        }
    }
    shaped(&out_shape, out)
}

#[derive(Debug, Clone, Copy)]
struct ConvGeom {
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    o: usize,
    kh: usize,
    kw: usize,
    oh: usize,
    ow: usize,
    stride: usize,
    pad: usize,
}

impl ConvGeom {
    fn new(input: &[usize], kernel: &[usize], stride: usize, pad: usize) -> Result<Self> {
        if input.len() != 4 || kernel.len() != 4 || input[1] != kernel[1] {
            return Err(Error::ShapeMismatch {
                op: "conv2d",
                lhs: input.to_vec(),
                rhs: kernel.to_vec(),
            });
        }
        if stride == 0 {
            return Err(Error::invalid("conv2d", "stride must be positive"));
        }
        let (h, w, kh, kw) = (input[2], input[3], kernel[2], kernel[3]);
        if h + 2 * pad < kh || w + 2 * pad < kw {
            return Err(Error::invalid(
                "conv2d",
                format!(
                    "kernel {kh}x{kw} larger than padded input {}x{}",
                    h + 2 * pad,
                    w + 2 * pad
                ),
            ));
        }
        Ok(Self {
            n: input[0],
            c: input[1],
            h,
            w,
            o: kernel[0],
            kh,
            kw,
            oh: (h + 2 * pad - kh) / stride + 1,
            ow: (w + 2 * pad - kw) / stride + 1,
            stride,
            pad,
        })
    }

    fn patch(&self) -> usize {
        self.c * self.kh * self.kw
    }

    fn positions(&self) -> usize {
        self.oh * self.ow
    }

    /// Source pixel for column-matrix entry (row, position), if inside the image.
    #[inline]
    fn source(&self, ky: usize, kx: usize, oy: usize, ox: usize) -> Option<(usize, usize)> {
        let y = (oy * self.stride + ky).checked_sub(self.pad)?;
        let x = (ox * self.stride + kx).checked_sub(self.pad)?;
        (y < self.h && x < self.w).then_some((y, x))
    }

    fn im2col(&self, image: &[f64], cols: &mut [f64]) {
        let p = self.positions();
        for c in 0..self.c {
            let plane = &image[c * self.h * self.w..(c + 1) * self.h * self.w];
            for ky in 0..self.kh {
                for kx in 0..self.kw {
                    let row = (c * self.kh + ky) * self.kw + kx;
                    let dst = &mut cols[row * p..(row + 1) * p];
                    for oy in 0..self.oh {
                        for ox in 0..self.ow {
                            dst[oy * self.ow + ox] = match self.source(ky, kx, oy, ox) {
                                Some((y, x)) => plane[y * self.w + x],
                                None => 0.0,
                            };
                        }
                    }
                }
            }
        }
    }

    fn col2im(&self, cols: &[f64], image: &mut [f64]) {
        let p = self.positions();
        for c in 0..self.c {
            let plane = &mut image[c * self.h * self.w..(c + 1) * self.h * self.w];
            for ky in 0..self.kh {
                for kx in 0..self.kw {
                    let row = (c * self.kh + ky) * self.kw + kx;
                    let src = &cols[row * p..(row + 1) * p];
                    for oy in 0..self.oh {
                        for ox in 0..self.ow {
                            if let Some((y, x)) = self.source(ky, kx, oy, ox) {
                                plane[y * self.w + x] += src[oy * self.ow + ox];
                            }
                        }
                    }
                }
            }
        }
    }
}

fn conv2d_forward(geom: &ConvGeom, input: &[f64], kernel: &[f64], bias: Option<&[f64]>) -> Vec<f64> {
    let (patch, p) = (geom.patch(), geom.positions());
    let image_len = geom.c * geom.h * geom.w;
    let mut out = vec![0.0; geom.n * geom.o * p];
    let mut cols = vec![0.0; patch * p];
    for n in 0..geom.n {
        geom.im2col(&input[n * image_len..(n + 1) * image_len], &mut cols);
        let dst = &mut out[n * geom.o * p..(n + 1) * geom.o * p];
        gemm(
            MatRef::row_major(kernel, geom.o, patch),
            MatRef::row_major(&cols, patch, p),
            0.0,
            dst,
        );
        if let Some(bias) = bias {
            for (o, &b) in bias.iter().enumerate() {
                dst[o * p..(o + 1) * p].iter_mut().for_each(|v| *v += b);
            }
        }
    }
    out
}

type ConvGrads = (Option<Vec<f64>>, Option<Vec<f64>>, Vec<f64>);

fn conv2d_backward(
    geom: &ConvGeom,
    input: &[f64],
    kernel: &[f64],
    grad_out: &[f64],
    want_input: bool,
    want_kernel: bool,
) -> ConvGrads {
    let (patch, p) = (geom.patch(), geom.positions());
    let image_len = geom.c * geom.h * geom.w;
    let mut dx = want_input.then(|| vec![0.0; input.len()]);
    let mut dk = want_kernel.then(|| vec![0.0; kernel.len()]);
    let mut db = vec![0.0; geom.o];
    let mut cols = vec![0.0; patch * p];
    for n in 0..geom.n {
        let g = &grad_out[n * geom.o * p..(n + 1) * geom.o * p];
        for (o, acc) in db.iter_mut().enumerate() {
            *acc += g[o * p..(o + 1) * p].iter().sum::<f64>();
        }
        if let Some(dk) = dk.as_mut() {
            geom.im2col(&input[n * image_len..(n + 1) * image_len], &mut cols);
            gemm(
                MatRef::row_major(g, geom.o, p),
                MatRef::row_major(&cols, patch, p).t(),
                1.0,
                dk,
            );
        }
        if let Some(dx) = dx.as_mut() {
            gemm(
                MatRef::row_major(kernel, geom.o, patch).t(),
                MatRef::row_major(g, geom.o, p),
                0.0,
                &mut cols,
            );
            geom.col2im(&cols, &mut dx[n * image_len..(n + 1) * image_len]);
        }
    }
    (dx, dk, db)
}

// Fallible, tape-bound ops; operator traits cannot return `Result`.
#[allow(clippy::should_implement_trait)]
impl<'t> Var<'t> {
    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn id(&self) -> usize {
        self.id
    }

    pub fn value(&self) -> Ref<'t, Tensor> {
        Ref::map(self.tape.nodes.borrow(), |n| &n[self.id].value)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.value().shape().to_vec()
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.nodes.borrow()[self.id].requires_grad
    }

    fn same_tape(&self, other: &Var<'_>) {
        assert!(
            std::ptr::eq(self.tape, other.tape),
            "operands recorded on different tapes"
        );
    }

    fn binary(
        self,
        other: Var<'t>,
        op: &'static str,
        f: impl Fn(f64, f64) -> f64,
        make: fn(usize, usize, Bcast) -> Op,
    ) -> Result<Var<'t>> {
        self.same_tape(&other);
        let (out, bc) = {
            let (a, b) = (self.value(), other.value());
            let bc = if a.shape() == b.shape() {
                Bcast::Same
            } else if a.numel() == 1 {
                Bcast::ScalarLhs
            } else if b.numel() == 1 {
                Bcast::ScalarRhs
            } else {
                return Err(Error::ShapeMismatch {
                    op,
                    lhs: a.shape().to_vec(),
                    rhs: b.shape().to_vec(),
                });
            };
            let out = match bc {
                Bcast::Same => {
                    let d = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
                    shaped(a.shape(), d)
                }
                Bcast::ScalarLhs => {
                    let s = a.item();
                    b.map(|y| f(s, y))
                }
                Bcast::ScalarRhs => {
                    let s = b.item();
                    a.map(|x| f(x, s))
                }
            };
            (out, bc)
        };
        Ok(self.tape.record(out, &[self.id, other.id], make(self.id, other.id, bc)))
    }

    pub fn add(self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, "add", |x, y| x + y, Op::Add)
    }

    pub fn sub(self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, "sub", |x, y| x - y, Op::Sub)
    }

    pub fn mul(self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, "mul", |x, y| x * y, Op::Mul)
    }

    pub fn add_scalar(self, c: f64) -> Var<'t> {
        let k = self.tape.constant(Tensor::scalar(c));
        self.add(k).expect("scalar broadcast")
    }

    pub fn scale(self, factor: f64) -> Var<'t> {
        let out = self.value().map(|x| x * factor);
        self.tape.record(out, &[self.id], Op::Scale(self.id, factor))
    }

    pub fn neg(self) -> Var<'t> {
        self.scale(-1.0)
    }

    pub fn relu(self) -> Var<'t> {
        let out = self.value().map(|x| x.max(0.0));
        self.tape.record(out, &[self.id], Op::Relu(self.id))
    }

    pub fn exp(self) -> Var<'t> {
        let out = self.value().map(f64::exp);
        self.tape.record(out, &[self.id], Op::Exp(self.id))
    }

    pub fn ln(self) -> Var<'t> {
        let out = self.value().map(f64::ln);
        self.tape.record(out, &[self.id], Op::Log(self.id))
    }

    /// Elementwise sign, `sign(0) = 0`. Its derivative is zero almost everywhere.
    pub fn sign(self) -> Var<'t> {
        let out = self.value().map(sign);
        self.tape.record(out, &[self.id], Op::Sign(self.id))
    }

    pub fn matmul(self, other: Var<'t>) -> Result<Var<'t>> {
        self.same_tape(&other);
        let out = {
            let (a, b) = (self.value(), other.value());
            if a.ndim() != 2 || b.ndim() != 2 || a.shape()[1] != b.shape()[0] {
                return Err(Error::ShapeMismatch {
                    op: "matmul",
                    lhs: a.shape().to_vec(),
                    rhs: b.shape().to_vec(),
                });
            }
            let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
            shaped(&[m, n], crate::linalg::matmul(a.data(), b.data(), m, k, n))
        };
        Ok(self
            .tape
            .record(out, &[self.id, other.id], Op::MatMul(self.id, other.id)))
    }

    pub fn permute(self, axes: &[usize]) -> Result<Var<'t>> {
        let out = {
            let a = self.value();
            let mut seen = vec![false; a.ndim()];
            if axes.len() != a.ndim()
                || axes
                    .iter()
                    .any(|&x| x >= a.ndim() || std::mem::replace(&mut seen[x], true))
            {
                return Err(Error::invalid(
                    "permute",
                    format!("{axes:?} is not a permutation for shape {:?}", a.shape()),
                ));
            }
            permute_values(&a, axes)
        };
        Ok(self.tape.record(out, &[self.id], Op::Permute(self.id, axes.to_vec())))
    }

    /// 2-D transpose.
    pub fn t(self) -> Result<Var<'t>> {
        if self.value().ndim() != 2 {
            return Err(Error::invalid(
                "transpose",
                format!("expected 2-D, got {:?}", self.shape()),
            ));
        }
        self.permute(&[1, 0])
    }

    pub fn reshape(self, shape: &[usize]) -> Result<Var<'t>> {
        let out = self.value().clone().reshape(shape.to_vec())?;
        Ok(self.tape.record(out, &[self.id], Op::Reshape(self.id)))
    }

    fn check_axis(&self, op: &'static str, axis: usize) -> Result<()> {
        let nd = self.value().ndim();
        if axis >= nd {
            return Err(Error::invalid(
                op,
                format!("axis {axis} out of range for {nd}-D tensor"),
            ));
        }
        Ok(())
    }

    /// Softmax along `axis`, computed with max subtraction.
    pub fn softmax(self, axis: usize) -> Result<Var<'t>> {
        let out = softmax_values(&self.value(), axis, false)?;
        Ok(self.tape.record(out, &[self.id], Op::Softmax(self.id, axis)))
    }

    pub fn log_softmax(self, axis: usize) -> Result<Var<'t>> {
        let out = softmax_values(&self.value(), axis, true)?;
        Ok(self.tape.record(out, &[self.id], Op::LogSoftmax(self.id, axis)))
    }

    fn reduce(self, op: &'static str, axis: usize, mean: bool) -> Result<Var<'t>> {
        self.check_axis(op, axis)?;
        let out = {
            let a = self.value();
            let (outer, n, inner) = axis_split(a.shape(), axis);
            let d = a.data();
            let mut out = vec![0.0; outer * inner];
            for o in 0..outer {
                for j in 0..n {
                    for i in 0..inner {
                        out[o * inner + i] += d[(o * n + j) * inner + i];
                    }
                }
            }
            if mean {
                out.iter_mut().for_each(|v| *v /= n as f64);
            }
            shaped(&reduce_shape(a.shape(), axis), out)
        };
        let op = if mean {
            Op::Mean(self.id, axis)
        } else {
            Op::Sum(self.id, axis)
        };
        Ok(self.tape.record(out, &[self.id], op))
    }

    pub fn sum(self, axis: usize) -> Result<Var<'t>> {
        self.reduce("sum", axis, false)
    }

    pub fn mean(self, axis: usize) -> Result<Var<'t>> {
        self.reduce("mean", axis, true)
    }

    pub fn sum_all(self) -> Var<'t> {
        let out = Tensor::scalar(self.value().data().iter().sum());
        self.tape.record(out, &[self.id], Op::SumAll(self.id))
    }

    pub fn mean_all(self) -> Var<'t> {
        let n = self.value().numel() as f64;
        self.sum_all().scale(1.0 / n)
    }

    /// Max along `axis`; gradient routes to the first maximal entry.
    pub fn max(self, axis: usize) -> Result<Var<'t>> {
        self.check_axis("max", axis)?;
        let (out, argmax) = {
            let a = self.value();
            let (outer, n, inner) = axis_split(a.shape(), axis);
            let d = a.data();
            let mut out = vec![f64::NEG_INFINITY; outer * inner];
            let mut arg = vec![0usize; outer * inner];
            for o in 0..outer {
                for j in 0..n {
                    for i in 0..inner {
                        let v = d[(o * n + j) * inner + i];
                        if v > out[o * inner + i] {
                            out[o * inner + i] = v;
                            arg[o * inner + i] = j;
                        }
                    }
                }
            }
            (shaped(&reduce_shape(a.shape(), axis), out), arg)
        };
        Ok(self.tape.record(out, &[self.id], Op::Max(self.id, axis, argmax)))
    }

    /// Rows (axis 0) selected by `indices`, in that order.
    pub fn gather(self, indices: &[usize]) -> Result<Var<'t>> {
        let out = {
            let a = self.value();
            if a.ndim() == 0 {
                return Err(Error::invalid("gather", "cannot gather from a scalar"));
            }
            let rows = a.shape()[0];
            let row: usize = a.shape()[1..].iter().product();
            let mut data = Vec::with_capacity(indices.len() * row);
            for &r in indices {
                if r >= rows {
                    return Err(Error::IndexOutOfBounds { index: r, extent: rows });
                }
                data.extend_from_slice(&a.data()[r * row..(r + 1) * row]);
            }
            if indices.is_empty() {
                return Err(Error::invalid("gather", "empty index set"));
            }
            let mut shape = a.shape().to_vec();
            shape[0] = indices.len();
            shaped(&shape, data)
        };
        Ok(self.tape.record(out, &[self.id], Op::Gather(self.id, indices.to_vec())))
    }

    /// Flat elements selected by row-major `indices`, as a 1-D tensor.
    pub fn take(self, indices: &[usize]) -> Result<Var<'t>> {
        let out = {
            let a = self.value();
            let mut data = Vec::with_capacity(indices.len());
            for &p in indices {
                if p >= a.numel() {
                    return Err(Error::IndexOutOfBounds {
                        index: p,
                        extent: a.numel(),
                    });
                }
                data.push(a.data()[p]);
            }
            if indices.is_empty() {
                return Err(Error::invalid("take", "empty index set"));
            }
            Tensor::from_vec(data)
        };
        Ok(self.tape.record(out, &[self.id], Op::Take(self.id, indices.to_vec())))
    }

    /// `self[.., j] + bias[j]` over the last axis.
    pub fn add_bias(self, bias: Var<'t>) -> Result<Var<'t>> {
        self.same_tape(&bias);
        let out = {
            let (a, b) = (self.value(), bias.value());
            let last = *a.shape().last().unwrap_or(&1);
            if b.ndim() != 1 || b.numel() != last {
                return Err(Error::ShapeMismatch {
                    op: "add_bias",
                    lhs: a.shape().to_vec(),
                    rhs: b.shape().to_vec(),
                });
            }
            let mut d = a.data().to_vec();
            for chunk in d.chunks_mut(last) {
                for (x, y) in chunk.iter_mut().zip(b.data()) {
                    *x += y;
                }
            }
            shaped(a.shape(), d)
        };
        Ok(self
            .tape
            .record(out, &[self.id, bias.id], Op::AddBias(self.id, bias.id)))
    }

    /// NCHW convolution (cross-correlation) with zero padding.
    pub fn conv2d(self, kernel: Var<'t>, bias: Option<Var<'t>>, stride: usize, padding: usize) -> Result<Var<'t>> {
        self.same_tape(&kernel);
        let out = {
            let (x, k) = (self.value(), kernel.value());
            let geom = ConvGeom::new(x.shape(), k.shape(), stride, padding)?;
            let bias_val = bias.map(|b| b.value());
            if let Some(b) = &bias_val {
                if b.shape() != [geom.o] {
                    return Err(Error::ShapeMismatch {
                        op: "conv2d bias",
                        lhs: vec![geom.o],
                        rhs: b.shape().to_vec(),
                    });
                }
            }
            let data = conv2d_forward(&geom, x.data(), k.data(), bias_val.as_ref().map(|b| b.data()));
            shaped(&[geom.n, geom.o, geom.oh, geom.ow], data)
        };
        let mut inputs = vec![self.id, kernel.id];
        inputs.extend(bias.map(|b| b.id));
        let op = Op::Conv2d {
            input: self.id,
            kernel: kernel.id,
            bias: bias.map(|b| b.id),
            stride,
            padding,
        };
        Ok(self.tape.record(out, &inputs, op))
    }

    /// Nearest-neighbour upsampling of the two trailing axes by an integer factor.
    pub fn upsample_nearest(self, factor: usize) -> Result<Var<'t>> {
        let out = {
            let a = self.value();
            let nd = a.ndim();
            if nd < 2 || factor == 0 {
                return Err(Error::invalid(
                    "upsample",
                    format!("shape {:?}, factor {factor}", a.shape()),
                ));
            }
            let (h, w) = (a.shape()[nd - 2], a.shape()[nd - 1]);
            let planes = a.numel() / (h * w);
            let (oh, ow) = (h * factor, w * factor);
            let mut d = Vec::with_capacity(planes * oh * ow);
            for p in 0..planes {
                for y in 0..oh {
                    for x in 0..ow {
                        d.push(a.data()[p * h * w + (y / factor) * w + x / factor]);
                    }
                }
            }
            let mut shape = a.shape().to_vec();
            shape[nd - 2] = oh;
            shape[nd - 1] = ow;
            shaped(&shape, d)
        };
        Ok(self.tape.record(out, &[self.id], Op::Upsample(self.id, factor)))
    }
}

/// Concatenation along axis 0.
pub fn concat<'t>(parts: &[Var<'t>]) -> Result<Var<'t>> {
    let first = parts.first().ok_or_else(|| Error::invalid("concat", "no inputs"))?;
    let tape = first.tape;
    let out = {
        let head = first.value();
        let tail_shape = head.shape().get(1..).unwrap_or(&[]).to_vec();
        let mut rows = 0;
        let mut data = Vec::new();
        for p in parts {
            first.same_tape(p);
            let v = p.value();
            if v.ndim() == 0 || v.shape()[1..] != tail_shape[..] {
                return Err(Error::ShapeMismatch {
                    op: "concat",
                    lhs: head.shape().to_vec(),
                    rhs: v.shape().to_vec(),
                });
            }
            rows += v.shape()[0];
            data.extend_from_slice(v.data());
        }
        let mut shape = vec![rows];
        shape.extend(tail_shape);
        shaped(&shape, data)
    };
    let ids: Vec<usize> = parts.iter().map(|p| p.id).collect();
    Ok(tape.record(out, &ids, Op::Concat(ids.clone())))
}

fn softmax_values(a: &Tensor, axis: usize, log: bool) -> Result<Tensor> {
    if axis >= a.ndim() {
        return Err(Error::invalid(
            "softmax",
            format!("axis {axis} out of range for {:?}", a.shape()),
        ));
    }
    if !a.all_finite() {
        return Err(Error::Numeric("softmax input contains non-finite values".into()));
    }
    let (outer, n, inner) = axis_split(a.shape(), axis);
    let d = a.data();
    let mut out = vec![0.0; d.len()];
    for o in 0..outer {
        for i in 0..inner {
            let base = o * n * inner + i;
            let max = (0..n).map(|j| d[base + j * inner]).fold(f64::NEG_INFINITY, f64::max);
            let total: f64 = (0..n).map(|j| (d[base + j * inner] - max).exp()).sum();
            let lse = total.ln();
            for j in 0..n {
                let p = base + j * inner;
                out[p] = if log {
                    d[p] - max - lse
                } else {
                    (d[p] - max).exp() / total
                };
            }
        }
    }
    Ok(shaped(a.shape(), out))
}

/// Softmax of a plain tensor along `axis`, no tape involved.
pub fn softmax(a: &Tensor, axis: usize) -> Result<Tensor> {
    softmax_values(a, axis, false)
}
