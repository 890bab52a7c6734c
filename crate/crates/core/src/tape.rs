//! Reverse-mode differentiation over [`Tensor`] values.
//!
//! A [`Tape`] owns an append-only list of nodes. Every op on a [`Var`] appends
//! one node holding its value and, when the tape is traced, the op kind and
//! input ids. [`Tape::backward`] walks the list once in reverse, so the graph
//! is acyclic by construction and gradients add up at fan-out.
//!
//! `sign` and the small-gradient branch of gradient preprocessing have zero
//! derivative; `abs'(0) = 0`. A truncation boundary is a [`Var::detach`],
//! which copies the value into a fresh constant node.

use std::cell::RefCell;
use std::rc::Rc;

use crate::error::{Error, Result};
use crate::tensor::{self, broadcast_binary, reduce_to, Tensor};

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Div(usize, usize),
    Neg(usize),
    Scale(usize, f64),
    AddScalar(usize),
    Exp(usize),
    Log(usize),
    Tanh(usize),
    Sigmoid(usize),
    Relu(usize),
    Abs(usize),
    Sign,
    Sqrt(usize),
    Sum(usize),
    Mean(usize),
    SumAxis(usize),
    MatMul(usize, usize),
    Transpose(usize),
    Concat(Vec<usize>, usize),
    Slice {
        input: usize,
        axis: usize,
        start: usize,
    },
    Reshape(usize),
    SoftmaxXent {
        logits: usize,
        probs: Tensor,
        labels: Vec<usize>,
    },
    Mse(usize, usize),
    OuterRows(usize, usize),
    VecMatRows(usize, usize),
    GroupSumRows(usize, usize),
    DecayOuterAdd(usize, usize, usize, Rc<[f64]>),
    GatherRows(usize, Rc<[usize]>),
}

struct Node {
    value: Rc<Tensor>,
    op: Op,
    requires_grad: bool,
}

pub struct Tape {
    nodes: RefCell<Vec<Node>>,
    traced: bool,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

/// Handle to one node of a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var#{}{:?}", self.id, self.shape())
    }
}

/// Gradients of the traced leaves, indexed by node id.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, var: Var<'_>) -> Option<&Tensor> {
        self.by_id(var.id)
    }

    pub fn by_id(&self, id: usize) -> Option<&Tensor> {
        self.grads.get(id).and_then(|g| g.as_ref())
    }

    /// Gradient of `var`, or zeros of the right shape when the loss does not depend on it.
    pub fn wrt(&self, var: Var<'_>) -> Tensor {
        self.get(var)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(var.value().shape()))
    }
}

impl Tape {
    pub fn new() -> Self {
        Self {
            nodes: RefCell::new(Vec::new()),
            traced: true,
        }
    }

    /// A tape that only evaluates values; `backward` on it fails.
    pub fn untraced() -> Self {
        Self {
            nodes: RefCell::new(Vec::new()),
            traced: false,
        }
    }

    pub fn is_traced(&self) -> bool {
        self.traced
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.push(value, Op::Leaf, false)
    }

    /// A leaf that gradients are computed for.
    pub fn param(&self, value: Tensor) -> Var<'_> {
        self.push(value, Op::Leaf, self.traced)
    }

    pub fn scalar(&self, value: f64) -> Var<'_> {
        self.constant(Tensor::scalar(value))
    }

    fn push(&self, value: Tensor, op: Op, requires_grad: bool) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        let id = nodes.len();
        let op = if self.traced && requires_grad {
            op
        } else {
            Op::Leaf
        };
        nodes.push(Node {
            value: Rc::new(value),
            op,
            requires_grad: self.traced && requires_grad,
        });
        Var { tape: self, id }
    }

    fn value_of(&self, id: usize) -> Rc<Tensor> {
        Rc::clone(&self.nodes.borrow()[id].value)
    }

    fn requires(&self, ids: &[usize]) -> bool {
        let nodes = self.nodes.borrow();
        ids.iter().any(|&i| nodes[i].requires_grad)
    }

    pub fn concat<'t>(&'t self, parts: &[Var<'t>], axis: usize) -> Result<Var<'t>> {
        let values: Vec<Rc<Tensor>> = parts.iter().map(|p| p.value()).collect();
        let refs: Vec<&Tensor> = values.iter().map(|v| v.as_ref()).collect();
        let out = tensor::concat(&refs, axis)?;
        let ids: Vec<usize> = parts.iter().map(|p| p.id).collect();
        let req = self.requires(&ids);
        Ok(self.push(out, Op::Concat(ids, axis), req))
    }

    /// Gradients of a scalar `loss` with respect to every param leaf it depends on.
    pub fn backward(&self, loss: Var<'_>) -> Result<Gradients> {
        if !self.traced {
            return Err(Error::NotTraced);
        }
        let nodes = self.nodes.borrow();
        let loss_value = &nodes[loss.id].value;
        if loss_value.numel() != 1 {
            return Err(Error::NonScalarLoss(loss_value.shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; loss.id + 1];
        grads[loss.id] = Some(Tensor::full(loss_value.shape(), 1.0));

        for id in (0..=loss.id).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &nodes[id];
            if !node.requires_grad {
                grads[id] = Some(g);
                continue;
            }
            if matches!(node.op, Op::Leaf) {
                grads[id] = Some(g);
                continue;
            }
            let mut acc = |target: usize, contrib: Tensor| {
                if !nodes[target].requires_grad {
                    return;
                }
                match &mut grads[target] {
                    Some(existing) => {
                        for (e, c) in existing.data_mut().iter_mut().zip(contrib.data()) {
                            *e += c;
                        }
                    }
                    slot @ None => *slot = Some(contrib),
                }
            };
            let val = |i: usize| -> &Tensor { &nodes[i].value };
            let out = &node.value;
            match &node.op {
                Op::Leaf => {}
                Op::Add(a, b) => {
                    acc(*a, reduce_to(&g, val(*a).shape()));
                    acc(*b, reduce_to(&g, val(*b).shape()));
                }
                Op::Sub(a, b) => {
                    acc(*a, reduce_to(&g, val(*a).shape()));
                    acc(*b, reduce_to(&g, val(*b).shape()).scale(-1.0));
                }
                Op::Mul(a, b) => {
                    let (va, vb) = (val(*a), val(*b));
                    if nodes[*a].requires_grad {
                        let ga = broadcast_binary("mul", &g, vb, |x, y| x * y)?;
                        acc(*a, reduce_to(&ga, va.shape()));
                    }
                    if nodes[*b].requires_grad {
                        let gb = broadcast_binary("mul", &g, va, |x, y| x * y)?;
                        acc(*b, reduce_to(&gb, vb.shape()));
                    }
                }
                Op::Div(a, b) => {
                    let (va, vb) = (val(*a), val(*b));
                    if nodes[*a].requires_grad {
                        let ga = broadcast_binary("div", &g, vb, |x, y| x / y)?;
                        acc(*a, reduce_to(&ga, va.shape()));
                    }
                    if nodes[*b].requires_grad {
                        // d(a/b)/db = -out / b
                        let q = broadcast_binary("div", out, vb, |x, y| x / y)?;
                        let gb = q.zip_map(&g, "div", |x, y| -x * y)?;
                        acc(*b, reduce_to(&gb, vb.shape()));
                    }
                }
                Op::Neg(a) => acc(*a, g.scale(-1.0)),
                Op::Scale(a, k) => acc(*a, g.scale(*k)),
                Op::AddScalar(a) => acc(*a, g),
                Op::Exp(a) => acc(*a, g.zip_map(out, "exp", |x, y| x * y)?),
                Op::Log(a) => acc(*a, g.zip_map(val(*a), "log", |x, y| x / y)?),
                Op::Tanh(a) => acc(*a, g.zip_map(out, "tanh", |x, y| x * (1.0 - y * y))?),
                Op::Sigmoid(a) => acc(*a, g.zip_map(out, "sigmoid", |x, y| x * y * (1.0 - y))?),
                Op::Relu(a) => acc(
                    *a,
                    g.zip_map(val(*a), "relu", |x, y| if y > 0.0 { x } else { 0.0 })?,
                ),
                Op::Abs(a) => acc(*a, g.zip_map(val(*a), "abs", |x, y| x * tensor::sign(y))?),
                Op::Sign => {}
                Op::Sqrt(a) => acc(*a, g.zip_map(out, "sqrt", |x, y| 0.5 * x / y)?),
                Op::Sum(a) => {
                    let gv = g.data()[0];
                    acc(*a, Tensor::full(val(*a).shape(), gv));
                }
                Op::Mean(a) => {
                    let n = val(*a).numel() as f64;
                    let gv = g.data()[0] / n;
                    acc(*a, Tensor::full(val(*a).shape(), gv));
                }
                Op::SumAxis(a) => {
                    let va = val(*a);
                    let full =
                        broadcast_binary("sum_axis", &Tensor::zeros(va.shape()), &g, |_, y| y)?;
                    acc(*a, full);
                }
                Op::MatMul(a, b) => {
                    let (va, vb) = (val(*a), val(*b));
                    let (m, k) = (va.shape()[0], va.shape()[1]);
                    let n = if vb.rank() == 1 { 1 } else { vb.shape()[1] };
                    if nodes[*a].requires_grad {
                        let mut ga = vec![0.0; m * k];
                        tensor::matmul_nt(g.data(), vb.data(), &mut ga, m, n, k);
                        acc(*a, Tensor::new(va.shape().to_vec(), ga)?);
                    }
                    if nodes[*b].requires_grad {
                        let mut gb = vec![0.0; k * n];
                        tensor::matmul_tn(va.data(), g.data(), &mut gb, m, k, n);
                        acc(*b, Tensor::new(vb.shape().to_vec(), gb)?);
                    }
                }
                Op::Transpose(a) => acc(*a, tensor::transpose(&g)?),
                Op::Concat(ids, axis) => {
                    let mut offset = 0;
                    for &i in ids {
                        let (r, c) = val(i).dims2();
                        let len = if *axis == 0 { r } else { c };
                        let part = tensor::slice(&g, *axis, offset, len)?;
                        offset += len;
                        acc(i, part.reshape(val(i).shape())?);
                    }
                }
                Op::Slice { input, axis, start } => {
                    let vi = val(*input);
                    let (r, c) = vi.dims2();
                    let mut full = vec![0.0; r * c];
                    let (gr, gc) = g.dims2();
                    for i in 0..gr {
                        for j in 0..gc {
                            let (ti, tj) = if *axis == 0 {
                                (i + start, j)
                            } else {
                                (i, j + start)
                            };
                            full[ti * c + tj] = g.data()[i * gc + j];
                        }
                    }
                    acc(*input, Tensor::new(vi.shape().to_vec(), full)?);
                }
                Op::Reshape(a) => acc(*a, g.reshape(val(*a).shape())?),
                Op::SoftmaxXent {
                    logits,
                    probs,
                    labels,
                } => {
                    let gv = g.data()[0] / labels.len() as f64;
                    let (_, c) = probs.dims2();
                    let mut d = probs.data().to_vec();
                    for (i, &l) in labels.iter().enumerate() {
                        d[i * c + l] -= 1.0;
                    }
                    for x in &mut d {
                        *x *= gv;
                    }
                    acc(*logits, Tensor::new(val(*logits).shape().to_vec(), d)?);
                }
                Op::Mse(a, b) => {
                    let (va, vb) = (val(*a), val(*b));
                    let k = 2.0 * g.data()[0] / va.numel() as f64;
                    let diff = va.zip_map(vb, "mse", |x, y| k * (x - y))?;
                    acc(*b, diff.scale(-1.0));
                    acc(*a, diff);
                }
                Op::OuterRows(a, b) => {
                    let (ga, gb) = outer_rows_backward(val(*a), val(*b), &g);
                    if nodes[*a].requires_grad {
                        acc(*a, ga);
                    }
                    if nodes[*b].requires_grad {
                        acc(*b, gb);
                    }
                }
                Op::DecayOuterAdd(m, a, b, decay) => {
                    if nodes[*m].requires_grad {
                        let width = g.dims2().1;
                        let mut gm = g.data().to_vec();
                        for (row, d) in decay.iter().enumerate() {
                            for x in &mut gm[row * width..(row + 1) * width] {
                                *x *= d;
                            }
                        }
                        acc(*m, Tensor::new(g.shape().to_vec(), gm)?);
                    }
                    let (va, vb) = (val(*a), val(*b));
                    let (ga, gb) = outer_rows_backward(va, vb, &g);
                    if nodes[*a].requires_grad {
                        acc(*a, ga);
                    }
                    if nodes[*b].requires_grad {
                        acc(*b, gb);
                    }
                }
                Op::GroupSumRows(a, len) => {
                    let (n, c) = val(*a).dims2();
                    let gd = g.data();
                    let mut ga = vec![0.0; n * c];
                    for row in 0..n {
                        let grp = row / len;
                        ga[row * c..(row + 1) * c].copy_from_slice(&gd[grp * c..(grp + 1) * c]);
                    }
                    acc(*a, Tensor::new(val(*a).shape().to_vec(), ga)?);
                }
                Op::GatherRows(a, idx) => {
                    let (n, c) = val(*a).dims2();
                    let gd = g.data();
                    let mut ga = vec![0.0; n * c];
                    for (i, &src) in idx.iter().enumerate() {
                        for (o, x) in ga[src * c..(src + 1) * c]
                            .iter_mut()
                            .zip(&gd[i * c..(i + 1) * c])
                        {
                            *o += x;
                        }
                    }
                    acc(*a, Tensor::new(val(*a).shape().to_vec(), ga)?);
                }
                Op::VecMatRows(a, m) => {
                    let (va, vm) = (val(*a), val(*m));
                    let (p, r) = va.dims2();
                    let (_, d) = g.dims2();
                    if nodes[*a].requires_grad {
                        let mut ga = vec![0.0; p * r];
                        for row in 0..p {
                            let gr = g.row(row);
                            for i in 0..r {
                                let ms = &vm.data()[row * r * d + i * d..row * r * d + (i + 1) * d];
                                ga[row * r + i] = ms.iter().zip(gr).map(|(x, y)| x * y).sum();
                            }
                        }
                        acc(*a, Tensor::new(va.shape().to_vec(), ga)?);
                    }
                    if nodes[*m].requires_grad {
                        let mut gm = vec![0.0; p * r * d];
                        for row in 0..p {
                            let gr = g.row(row);
                            for (i, &ai) in va.row(row).iter().enumerate() {
                                let dst = &mut gm[row * r * d + i * d..row * r * d + (i + 1) * d];
                                for (o, x) in dst.iter_mut().zip(gr) {
                                    *o = ai * x;
                                }
                            }
                        }
                        acc(*m, Tensor::new(vm.shape().to_vec(), gm)?);
                    }
                }
            }
        }
        Ok(Gradients { grads })
    }
}

impl<'t> Var<'t> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn value(&self) -> Rc<Tensor> {
        self.tape.value_of(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.value().shape().to_vec()
    }

    pub fn item(&self) -> f64 {
        self.value().data()[0]
    }

    fn unary(&self, op: Op, f: impl Fn(f64) -> f64) -> Var<'t> {
        let out = self.value().map(f);
        let req = self.tape.requires(&[self.id]);
        self.tape.push(out, op, req)
    }

    fn binary(
        &self,
        other: Var<'t>,
        name: &'static str,
        op: Op,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Var<'t>> {
        let out = broadcast_binary(name, &self.value(), &other.value(), f)?;
        let req = self.tape.requires(&[self.id, other.id]);
        Ok(self.tape.push(out, op, req))
    }

    pub fn add(&self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, "add", Op::Add(self.id, other.id), |a, b| a + b)
    }

    pub fn sub(&self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, "sub", Op::Sub(self.id, other.id), |a, b| a - b)
    }

    pub fn mul(&self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, "mul", Op::Mul(self.id, other.id), |a, b| a * b)
    }

    pub fn div(&self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, "div", Op::Div(self.id, other.id), |a, b| a / b)
    }

    pub fn neg(&self) -> Var<'t> {
        self.unary(Op::Neg(self.id), |v| -v)
    }

    pub fn scale(&self, k: f64) -> Var<'t> {
        self.unary(Op::Scale(self.id, k), |v| v * k)
    }

    pub fn add_scalar(&self, k: f64) -> Var<'t> {
        self.unary(Op::AddScalar(self.id), |v| v + k)
    }

    pub fn exp(&self) -> Var<'t> {
        self.unary(Op::Exp(self.id), f64::exp)
    }

    pub fn log(&self) -> Var<'t> {
        self.unary(Op::Log(self.id), f64::ln)
    }

    pub fn tanh(&self) -> Var<'t> {
        self.unary(Op::Tanh(self.id), f64::tanh)
    }

    pub fn sigmoid(&self) -> Var<'t> {
        self.unary(Op::Sigmoid(self.id), tensor::sigmoid)
    }

    pub fn relu(&self) -> Var<'t> {
        self.unary(Op::Relu(self.id), |v| v.max(0.0))
    }

    pub fn abs(&self) -> Var<'t> {
        self.unary(Op::Abs(self.id), f64::abs)
    }

    pub fn sign(&self) -> Var<'t> {
        self.unary(Op::Sign, tensor::sign)
    }

    pub fn sqrt(&self) -> Var<'t> {
        self.unary(Op::Sqrt(self.id), f64::sqrt)
    }

    pub fn square(&self) -> Var<'t> {
        // a * a with equal shapes cannot fail
        self.mul(*self).expect("square of a single operand")
    }

    pub fn sum(&self) -> Var<'t> {
        let out = Tensor::scalar(self.value().sum());
        let req = self.tape.requires(&[self.id]);
        self.tape.push(out, Op::Sum(self.id), req)
    }

    pub fn mean(&self) -> Var<'t> {
        let v = self.value();
        let out = Tensor::scalar(v.sum() / v.numel() as f64);
        let req = self.tape.requires(&[self.id]);
        self.tape.push(out, Op::Mean(self.id), req)
    }

    pub fn sum_axis(&self, axis: usize) -> Result<Var<'t>> {
        let out = tensor::sum_axis(&self.value(), axis)?;
        let req = self.tape.requires(&[self.id]);
        Ok(self.tape.push(out, Op::SumAxis(self.id), req))
    }

    pub fn matmul(&self, other: Var<'t>) -> Result<Var<'t>> {
        let out = tensor::matmul(&self.value(), &other.value())?;
        let req = self.tape.requires(&[self.id, other.id]);
        Ok(self.tape.push(out, Op::MatMul(self.id, other.id), req))
    }

    pub fn transpose(&self) -> Result<Var<'t>> {
        let out = tensor::transpose(&self.value())?;
        let req = self.tape.requires(&[self.id]);
        Ok(self.tape.push(out, Op::Transpose(self.id), req))
    }

    pub fn slice(&self, axis: usize, start: usize, len: usize) -> Result<Var<'t>> {
        let out = tensor::slice(&self.value(), axis, start, len)?;
        let req = self.tape.requires(&[self.id]);
        Ok(self.tape.push(
            out,
            Op::Slice {
                input: self.id,
                axis,
                start,
            },
            req,
        ))
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Var<'t>> {
        let out = self.value().reshape(shape)?;
        let req = self.tape.requires(&[self.id]);
        Ok(self.tape.push(out, Op::Reshape(self.id), req))
    }

    /// Same value, no gradient path back through this node.
    pub fn detach(&self) -> Var<'t> {
        self.tape.constant(self.value().as_ref().clone())
    }

    /// Mean softmax cross-entropy of `self` (batch x classes logits) against class labels.
    pub fn softmax_cross_entropy(&self, labels: &[usize]) -> Result<Var<'t>> {
        let logits = self.value();
        let (b, c) = logits.dims2();
        if logits.rank() != 2 || b != labels.len() || labels.iter().any(|&l| l >= c) {
            return Err(Error::InvalidShape {
                op: "softmax_cross_entropy",
                shape: logits.shape().to_vec(),
                reason: format!("{} labels for {c} classes", labels.len()),
            });
        }
        let mut probs = Vec::with_capacity(b * c);
        let mut loss = 0.0;
        for (i, &l) in labels.iter().enumerate() {
            let row = logits.row(i);
            let lse = tensor::log_sum_exp(row);
            loss += lse - row[l];
            probs.extend(row.iter().map(|v| (v - lse).exp()));
        }
        let probs = Tensor::new(vec![b, c], probs)?;
        let req = self.tape.requires(&[self.id]);
        Ok(self.tape.push(
            Tensor::scalar(loss / b as f64),
            Op::SoftmaxXent {
                logits: self.id,
                probs,
                labels: labels.to_vec(),
            },
            req,
        ))
    }

    /// Mean squared error over all elements.
    pub fn mse(&self, other: Var<'t>) -> Result<Var<'t>> {
        let (a, b) = (self.value(), other.value());
        if a.shape() != b.shape() {
            return Err(Error::ShapeMismatch {
                op: "mse",
                left: a.shape().to_vec(),
                right: b.shape().to_vec(),
            });
        }
        let n = a.numel().max(1) as f64;
        let v: f64 = a
            .data()
            .iter()
            .zip(b.data())
            .map(|(x, y)| (x - y) * (x - y))
            .sum::<f64>()
            / n;
        let req = self.tape.requires(&[self.id, other.id]);
        Ok(self
            .tape
            .push(Tensor::scalar(v), Op::Mse(self.id, other.id), req))
    }

    /// Row-wise outer products: `(P x r, P x d) -> P x (r*d)`, row `p` holding `a_p b_p^T` flattened.
    pub fn outer_rows(&self, other: Var<'t>) -> Result<Var<'t>> {
        let (a, b) = (self.value(), other.value());
        let (p, r) = a.dims2();
        let (pb, d) = b.dims2();
        if p != pb {
            return Err(Error::ShapeMismatch {
                op: "outer_rows",
                left: a.shape().to_vec(),
                right: b.shape().to_vec(),
            });
        }
        let mut out = Vec::with_capacity(p * r * d);
        for row in 0..p {
            let bv = b.row(row);
            for &ai in a.row(row) {
                out.extend(bv.iter().map(|x| ai * x));
            }
        }
        let req = self.tape.requires(&[self.id, other.id]);
        Ok(self.tape.push(
            Tensor::new(vec![p, r * d], out)?,
            Op::OuterRows(self.id, other.id),
            req,
        ))
    }

    /// Row-wise vector-matrix products: `(P x r, P x (r*d)) -> P x d`.
    pub fn vecmat_rows(&self, mats: Var<'t>) -> Result<Var<'t>> {
        let (a, m) = (self.value(), mats.value());
        let (p, r) = a.dims2();
        let (pm, rd) = m.dims2();
        if p != pm || r == 0 || rd % r != 0 {
            return Err(Error::ShapeMismatch {
                op: "vecmat_rows",
                left: a.shape().to_vec(),
                right: m.shape().to_vec(),
            });
        }
        let d = rd / r;
        let mut out = vec![0.0; p * d];
        for row in 0..p {
            let dst = &mut out[row * d..(row + 1) * d];
            for (i, &ai) in a.row(row).iter().enumerate() {
                let ms = &m.data()[row * rd + i * d..row * rd + (i + 1) * d];
                for (o, x) in dst.iter_mut().zip(ms) {
                    *o += ai * x;
                }
            }
        }
        let req = self.tape.requires(&[self.id, mats.id]);
        Ok(self.tape.push(
            Tensor::new(vec![p, d], out)?,
            Op::VecMatRows(self.id, mats.id),
            req,
        ))
    }
    /// `decay[p] * self[p] + outer(a[p], b[p])` per row `p`, without materialising the intermediates.
    pub fn decay_outer_add(&self, decay: &[f64], a: Var<'t>, b: Var<'t>) -> Result<Var<'t>> {
        let (m, va, vb) = (self.value(), a.value(), b.value());
        let (p, r) = va.dims2();
        let (pb, d) = vb.dims2();
        if p != pb || m.dims2() != (p, r * d) || decay.len() != p {
            return Err(Error::ShapeMismatch {
                op: "decay_outer_add",
                left: m.shape().to_vec(),
                right: vec![p, r, pb, d],
            });
        }
        let mut out = m.data().to_vec();
        for row in 0..p {
            let bv = vb.row(row);
            let dst = &mut out[row * r * d..(row + 1) * r * d];
            let k = decay[row];
            for (i, &ai) in va.row(row).iter().enumerate() {
                for (o, x) in dst[i * d..(i + 1) * d].iter_mut().zip(bv) {
                    *o = k * *o + ai * x;
                }
            }
        }
        let req = self.tape.requires(&[self.id, a.id, b.id]);
        Ok(self.tape.push(
            Tensor::new(m.shape().to_vec(), out)?,
            Op::DecayOuterAdd(self.id, a.id, b.id, decay.into()),
            req,
        ))
    }

    /// Sums consecutive groups of `len` rows (the last group may be shorter): `n x c -> ceil(n/len) x c`.
    pub fn group_sum_rows(&self, len: usize) -> Result<Var<'t>> {
        let a = self.value();
        let (n, c) = a.dims2();
        if len == 0 || n == 0 {
            return Err(Error::InvalidShape {
                op: "group_sum_rows",
                shape: a.shape().to_vec(),
                reason: format!("group length {len} over {n} rows"),
            });
        }
        let groups = n.div_ceil(len);
        let mut out = vec![0.0; groups * c];
        for row in 0..n {
            let grp = row / len;
            for (o, x) in out[grp * c..(grp + 1) * c].iter_mut().zip(a.row(row)) {
                *o += x;
            }
        }
        let req = self.tape.requires(&[self.id]);
        Ok(self.tape.push(
            Tensor::new(vec![groups, c], out)?,
            Op::GroupSumRows(self.id, len),
            req,
        ))
    }

    /// Row `i` of the result is row `idx[i]` of `self`; indices may repeat.
    pub fn gather_rows(&self, idx: &[usize]) -> Result<Var<'t>> {
        let a = self.value();
        let (n, c) = a.dims2();
        let mut out = Vec::with_capacity(idx.len() * c);
        for &i in idx {
            if i >= n {
                return Err(Error::InvalidShape {
                    op: "gather_rows",
                    shape: a.shape().to_vec(),
                    reason: format!("row index {i} out of range"),
                });
            }
            out.extend_from_slice(a.row(i));
        }
        let req = self.tape.requires(&[self.id]);
        Ok(self.tape.push(
            Tensor::new(vec![idx.len(), c], out)?,
            Op::GatherRows(self.id, idx.into()),
            req,
        ))
    }
}

/// Gradients of `outer_rows(a, b)` given the output gradient `g`.
fn outer_rows_backward(a: &Tensor, b: &Tensor, g: &Tensor) -> (Tensor, Tensor) {
    let (p, r) = a.dims2();
    let (_, d) = b.dims2();
    let gd = g.data();
    let mut ga = vec![0.0; p * r];
    let mut gb = vec![0.0; p * d];
    for row in 0..p {
        let (av, bv) = (a.row(row), b.row(row));
        let gb_row = &mut gb[row * d..(row + 1) * d];
        for i in 0..r {
            let gs = &gd[row * r * d + i * d..row * r * d + (i + 1) * d];
            ga[row * r + i] = gs.iter().zip(bv).map(|(x, y)| x * y).sum();
            for (o, x) in gb_row.iter_mut().zip(gs) {
                *o += av[i] * x;
            }
        }
    }
    (
        Tensor::new(a.shape().to_vec(), ga).expect("shape"),
        Tensor::new(b.shape().to_vec(), gb).expect("shape"),
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mse_of_equal_inputs_is_zero() {
        let tape = Tape::new();
        let x = tape.param(Tensor::vector(vec![1.0, -2.0, 3.0]));
        assert_eq!(x.mse(x).unwrap().item(), 0.0);
    }

    #[test]
    fn uniform_logits_cross_entropy_is_ln2() {
        let tape = Tape::new();
        let logits = tape.param(Tensor::matrix(1, 2, vec![0.0, 0.0]).unwrap());
        let l = logits.softmax_cross_entropy(&[0]).unwrap();
        assert!((l.item() - 2f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn quadratic_gradient() {
        let tape = Tape::new();
        let x = tape.param(Tensor::vector(vec![1.0, 2.0]));
        let loss = x.square().sum();
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.wrt(x).data(), &[2.0, 4.0]);
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let tape = Tape::new();
        let x = tape.param(Tensor::vector(vec![1.0, 2.0]));
        assert!(matches!(
            tape.backward(x.exp()),
            Err(Error::NonScalarLoss(_))
        ));
    }

    #[test]
    fn untraced_tape_refuses_backward() {
        let tape = Tape::untraced();
        let x = tape.param(Tensor::scalar(1.0));
        assert!(matches!(tape.backward(x.exp()), Err(Error::NotTraced)));
    }

    #[test]
    fn diamond_accumulates_both_paths() {
        // y = exp(x) * sin-free second path: loss = exp(x) + 3x, dl/dx = exp(x) + 3
        let tape = Tape::new();
        let x = tape.param(Tensor::scalar(0.7));
        let a = x.exp();
        let b = x.scale(3.0);
        let loss = a.add(b).unwrap();
        let g = tape.backward(loss).unwrap();
        let want = 0.7f64.exp() + 3.0;
        assert!((g.wrt(x).data()[0] - want).abs() < 1e-14);
    }

    #[test]
    fn detach_blocks_gradient() {
        let tape = Tape::new();
        let x = tape.param(Tensor::scalar(2.0));
        let y = x.square().detach().mul(x).unwrap();
        let g = tape.backward(y).unwrap();
        assert_eq!(g.wrt(x).data(), &[4.0]);
    }

    #[test]
    fn sign_and_abs_at_zero_have_zero_gradient() {
        let tape = Tape::new();
        let x = tape.param(Tensor::vector(vec![0.0, -1.5]));
        let loss = x.sign().sum().add(x.abs().sum()).unwrap();
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.wrt(x).data(), &[0.0, -1.0]);
    }
}
