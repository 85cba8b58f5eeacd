//! Reverse-mode automatic differentiation over [`Tensor`] values.
//!
//! A [`Tape`] records every operation of one forward pass. [`Var`] is a
//! cheap handle to a recorded value. [`Tape::backward`] replays the record in
//! strict reverse order, returns the gradients of every node that depends on
//! a gradient-requiring leaf, and then frees the tape; a second call fails.

use std::cell::{Cell, RefCell};
use std::f64::consts::PI;
use std::rc::Rc;

use crate::error::{Error, Result};
use crate::kernels::{self, ConvDims};
use crate::linalg;
use crate::tensor::{broadcast_index_map, broadcast_shape, Tensor};

type Id = usize;

#[derive(Debug)]
enum Op {
    Leaf,
    Add(Id, Id),
    Sub(Id, Id),
    Mul(Id, Id),
    Div(Id, Id),
    Neg(Id),
    Scale(Id, f64),
    AddConst(Id),
    Exp(Id),
    Ln(Id),
    Tanh(Id),
    MatMul(Id, Id),
    Conv2d {
        input: Id,
        kernel: Id,
        bias: Id,
        dims: ConvDims,
    },
    ChannelMix {
        input: Id,
        weight: Id,
    },
    Gather {
        input: Id,
        index: Rc<Vec<usize>>,
    },
    Concat {
        inputs: Vec<Id>,
        axis: usize,
    },
    Reshape(Id),
    SumAll(Id),
    SumPerSample(Id),
    MvnLogPdf {
        z: Id,
        mean: Id,
        cov: Id,
        precision: Rc<Vec<f64>>,
    },
}

struct Node {
    value: Rc<Tensor>,
    op: Op,
    requires_grad: bool,
}

/// Record of one forward pass.
#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
    consumed: Cell<bool>,
    flags: RefCell<Vec<String>>,
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: Id,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var#{}{:?}", self.id, self.shape())
    }
}

/// Gradients produced by [`Tape::backward`], indexed by node.
pub struct Grads {
    grads: Vec<Option<Tensor>>,
    shapes: Vec<Vec<usize>>,
}

impl Grads {
    /// Gradient w.r.t. `v`, or `None` when `v` does not influence the loss
    /// through a gradient-requiring path.
    pub fn get(&self, v: Var<'_>) -> Option<&Tensor> {
        self.grads.get(v.id).and_then(Option::as_ref)
    }

    /// Gradient w.r.t. `v`, zero-filled when absent.
    pub fn wrt(&self, v: Var<'_>) -> Tensor {
        self.get(v)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(&self.shapes[v.id]))
    }
}

fn mismatch(op: &'static str, a: &Tensor, b: &Tensor) -> Error {
    Error::ShapeMismatch {
        op,
        lhs: a.shape().to_vec(),
        rhs: b.shape().to_vec(),
    }
}

/// Sums `grad` (of `out_shape`) down to `in_shape` over broadcast axes.
fn reduce_to(grad: &Tensor, in_shape: &[usize]) -> Tensor {
    if grad.shape() == in_shape {
        return grad.clone();
    }
    let map = broadcast_index_map(in_shape, grad.shape());
    let mut out = Tensor::zeros(in_shape);
    let o = out.data_mut();
    for (g, &i) in grad.data().iter().zip(&map) {
        o[i] += g;
    }
    out
}

fn binary_values(a: &Tensor, b: &Tensor, op: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
    if a.shape() == b.shape() {
        return a.zip_map(b, f);
    }
    let shape = broadcast_shape(a.shape(), b.shape()).ok_or_else(|| mismatch(op, a, b))?;
    let ma = broadcast_index_map(a.shape(), &shape);
    let mb = broadcast_index_map(b.shape(), &shape);
    let (da, db) = (a.data(), b.data());
    let data = ma.iter().zip(&mb).map(|(&i, &j)| f(da[i], db[j])).collect();
    Tensor::new(&shape, data)
}

/// Elementwise product of `grad` with `other` broadcast to `grad`'s shape.
fn mul_broadcast(grad: &Tensor, other: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    if grad.shape() == other.shape() {
        return grad.zip_map(other, f).expect("same shape");
    }
    let map = broadcast_index_map(other.shape(), grad.shape());
    let od = other.data();
    let data = grad.data().iter().zip(&map).map(|(&g, &i)| f(g, od[i])).collect();
    Tensor::new(grad.shape(), data).expect("shape preserved")
}

fn accumulate(slot: &mut Option<Tensor>, g: Tensor) {
    match slot {
        Some(acc) => acc
            .data_mut()
            .iter_mut()
            .zip(g.data())
            .for_each(|(a, b)| *a += b),
        None => *slot = Some(g),
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    fn push(&self, value: Tensor, op: Op, requires_grad: bool) -> Var<'_> {
        if value.non_finite_count() > 0 {
            self.flag(format!("non-finite output of {op:?}"));
        }
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value: Rc::new(value),
            op,
            requires_grad,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    fn flag(&self, msg: String) {
        let mut f = self.flags.borrow_mut();
        if f.len() < 16 {
            f.push(msg);
        }
    }

    fn value_of(&self, id: Id) -> Rc<Tensor> {
        Rc::clone(&self.nodes.borrow()[id].value)
    }

    fn rg(&self, id: Id) -> bool {
        self.nodes.borrow()[id].requires_grad
    }

    /// Leaf value; gradients are tracked when `requires_grad`.
    pub fn leaf(&self, value: Tensor, requires_grad: bool) -> Var<'_> {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.leaf(value, false)
    }

    pub fn param(&self, value: &Tensor) -> Var<'_> {
        self.leaf(value.clone(), true)
    }

    /// Number of recorded operations (leaves included).
    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Messages recorded when an operation produced NaN/Inf or `ln` saw a
    /// non-positive argument.
    pub fn non_finite_events(&self) -> Vec<String> {
        self.flags.borrow().clone()
    }

    pub fn has_non_finite(&self) -> bool {
        !self.flags.borrow().is_empty()
    }

    pub fn is_consumed(&self) -> bool {
        self.consumed.get()
    }

    /// Reverse pass from the scalar `loss`. Consumes the tape.
    pub fn backward(&self, loss: Var<'_>) -> Result<Grads> {
        if self.consumed.get() {
            return Err(Error::TapeConsumed);
        }
        let loss_shape = loss.shape();
        if loss_shape.iter().product::<usize>() != 1 {
            return Err(Error::NonScalarLoss(loss_shape));
        }
        self.consumed.set(true);
        let nodes = std::mem::take(&mut *self.nodes.borrow_mut());
        let shapes: Vec<Vec<usize>> = nodes.iter().map(|n| n.value.shape().to_vec()).collect();
        let mut grads: Vec<Option<Tensor>> = (0..nodes.len()).map(|_| None).collect();
        if nodes[loss.id].requires_grad {
            grads[loss.id] = Some(Tensor::full(&shapes[loss.id], 1.0));
        }
        for id in (0..nodes.len()).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &nodes[id];
            if node.requires_grad {
                backprop_node(&nodes, id, &g, &mut grads);
            }
            // only leaf gradients are kept
            if matches!(node.op, Op::Leaf) {
                grads[id] = Some(g);
            }
        }
        Ok(Grads { grads, shapes })
    }

    // ── elementwise ────────────────────────────────────────────────────

    fn binary(&self, a: Var<'_>, b: Var<'_>, name: &'static str, f: impl Fn(f64, f64) -> f64, op: Op) -> Result<Var<'_>> {
        let (va, vb) = (self.value_of(a.id), self.value_of(b.id));
        let out = binary_values(&va, &vb, name, f)?;
        Ok(self.push(out, op, self.rg(a.id) || self.rg(b.id)))
    }

    pub fn add<'a>(&'a self, a: Var<'a>, b: Var<'a>) -> Result<Var<'a>> {
        self.binary(a, b, "add", |x, y| x + y, Op::Add(a.id, b.id))
    }

    pub fn sub<'a>(&'a self, a: Var<'a>, b: Var<'a>) -> Result<Var<'a>> {
        self.binary(a, b, "sub", |x, y| x - y, Op::Sub(a.id, b.id))
    }

    pub fn mul<'a>(&'a self, a: Var<'a>, b: Var<'a>) -> Result<Var<'a>> {
        self.binary(a, b, "mul", |x, y| x * y, Op::Mul(a.id, b.id))
    }

    pub fn div<'a>(&'a self, a: Var<'a>, b: Var<'a>) -> Result<Var<'a>> {
        self.binary(a, b, "div", |x, y| x / y, Op::Div(a.id, b.id))
    }

    fn unary(&self, a: Var<'_>, f: impl Fn(f64) -> f64, op: Op) -> Var<'_> {
        let out = self.value_of(a.id).map(f);
        self.push(out, op, self.rg(a.id))
    }

    pub fn neg<'a>(&'a self, a: Var<'a>) -> Var<'a> {
        self.unary(a, |x| -x, Op::Neg(a.id))
    }

    pub fn scale<'a>(&'a self, a: Var<'a>, c: f64) -> Var<'a> {
        self.unary(a, |x| c * x, Op::Scale(a.id, c))
    }

    pub fn add_const<'a>(&'a self, a: Var<'a>, c: f64) -> Var<'a> {
        self.unary(a, |x| x + c, Op::AddConst(a.id))
    }

    pub fn exp<'a>(&'a self, a: Var<'a>) -> Var<'a> {
        self.unary(a, f64::exp, Op::Exp(a.id))
    }

    pub fn ln<'a>(&'a self, a: Var<'a>) -> Var<'a> {
        let bad = self.value_of(a.id).data().iter().filter(|&&v| v <= 0.0).count();
        if bad > 0 {
            self.flag(format!("ln of {bad} non-positive value(s)"));
        }
        self.unary(a, f64::ln, Op::Ln(a.id))
    }

    pub fn tanh<'a>(&'a self, a: Var<'a>) -> Var<'a> {
        self.unary(a, f64::tanh, Op::Tanh(a.id))
    }

    // ── linear algebra ─────────────────────────────────────────────────

    pub fn matmul<'a>(&'a self, a: Var<'a>, b: Var<'a>) -> Result<Var<'a>> {
        let (va, vb) = (self.value_of(a.id), self.value_of(b.id));
        let (&[m, k], &[k2, n]) = (va.shape(), vb.shape()) else {
            return Err(mismatch("matmul", &va, &vb));
        };
        if k != k2 {
            return Err(mismatch("matmul", &va, &vb));
        }
        let out = Tensor::new(&[m, n], kernels::matmul(va.data(), vb.data(), m, k, n))?;
        Ok(self.push(out, Op::MatMul(a.id, b.id), self.rg(a.id) || self.rg(b.id)))
    }

    /// Same-size convolution: `input[N,C,H,W]`, `kernel[C',C,k,k]` (odd k,
    /// zero padding k/2), `bias[C']`.
    pub fn conv2d<'a>(&'a self, input: Var<'a>, kernel: Var<'a>, bias: Var<'a>) -> Result<Var<'a>> {
        let (vi, vk, vb) = (self.value_of(input.id), self.value_of(kernel.id), self.value_of(bias.id));
        let (n, c, h, w) = vi.dims4()?;
        let &[co, ci, kh, kw] = vk.shape() else {
            return Err(mismatch("conv2d", &vi, &vk));
        };
        if ci != c || kh != kw || kh % 2 == 0 {
            return Err(mismatch("conv2d", &vi, &vk));
        }
        if vb.shape() != [co] {
            return Err(mismatch("conv2d bias", &vk, &vb));
        }
        let dims = ConvDims {
            batch: n,
            c_in: c,
            c_out: co,
            height: h,
            width: w,
            ksize: kh,
        };
        let out = Tensor::new(&[n, co, h, w], kernels::conv2d(vi.data(), vk.data(), vb.data(), dims))?;
        let rg = self.rg(input.id) || self.rg(kernel.id) || self.rg(bias.id);
        Ok(self.push(
            out,
            Op::Conv2d {
                input: input.id,
                kernel: kernel.id,
                bias: bias.id,
                dims,
            },
            rg,
        ))
    }

    /// Multiplies the channel vector at every location of `input[N,C,...]`
    /// by `weight[C,C]`.
    pub fn channel_mix<'a>(&'a self, input: Var<'a>, weight: Var<'a>) -> Result<Var<'a>> {
        let (vi, vw) = (self.value_of(input.id), self.value_of(weight.id));
        if vi.rank() < 2 || vw.shape() != [vi.shape()[1], vi.shape()[1]] {
            return Err(mismatch("channel_mix", &vi, &vw));
        }
        let (n, c) = (vi.shape()[0], vi.shape()[1]);
        let plane = vi.len() / (n * c);
        let out = Tensor::new(vi.shape(), kernels::channel_mix(vi.data(), vw.data(), n, c, plane))?;
        let rg = self.rg(input.id) || self.rg(weight.id);
        Ok(self.push(
            out,
            Op::ChannelMix {
                input: input.id,
                weight: weight.id,
            },
            rg,
        ))
    }

    // ── structural ─────────────────────────────────────────────────────

    /// `out[i] = input[index[i]]` with the given output shape.
    pub fn gather<'a>(&'a self, input: Var<'a>, index: Rc<Vec<usize>>, shape: &[usize]) -> Result<Var<'a>> {
        let vi = self.value_of(input.id);
        if index.len() != shape.iter().product::<usize>() {
            return Err(Error::invalid(format!(
                "gather: {} indices for shape {shape:?}",
                index.len()
            )));
        }
        if let Some(&bad) = index.iter().find(|&&i| i >= vi.len()) {
            return Err(Error::invalid(format!("gather index {bad} out of range {}", vi.len())));
        }
        let d = vi.data();
        let out = Tensor::new(shape, index.iter().map(|&i| d[i]).collect())?;
        Ok(self.push(out, Op::Gather { input: input.id, index }, self.rg(input.id)))
    }

    pub fn concat<'a>(&'a self, inputs: &[Var<'a>], axis: usize) -> Result<Var<'a>> {
        let vals: Vec<Rc<Tensor>> = inputs.iter().map(|v| self.value_of(v.id)).collect();
        let first = vals.first().ok_or_else(|| Error::invalid("concat of nothing"))?;
        if axis >= first.rank() {
            return Err(Error::invalid(format!("concat axis {axis} on rank {}", first.rank())));
        }
        let mut shape = first.shape().to_vec();
        shape[axis] = 0;
        for v in &vals {
            let ok = v.rank() == first.rank()
                && (0..first.rank()).all(|d| d == axis || v.shape()[d] == first.shape()[d]);
            if !ok {
                return Err(mismatch("concat", first, v));
            }
            shape[axis] += v.shape()[axis];
        }
        let outer: usize = first.shape()[..axis].iter().product();
        let inner: usize = first.shape()[axis + 1..].iter().product();
        let mut data = Vec::with_capacity(shape.iter().product());
        for o in 0..outer {
            for v in &vals {
                let block = v.shape()[axis] * inner;
                data.extend_from_slice(&v.data()[o * block..(o + 1) * block]);
            }
        }
        let rg = inputs.iter().any(|v| self.rg(v.id));
        let out = Tensor::new(&shape, data)?;
        Ok(self.push(
            out,
            Op::Concat {
                inputs: inputs.iter().map(|v| v.id).collect(),
                axis,
            },
            rg,
        ))
    }

    pub fn reshape<'a>(&'a self, a: Var<'a>, shape: &[usize]) -> Result<Var<'a>> {
        let out = self.value_of(a.id).reshape(shape)?;
        Ok(self.push(out, Op::Reshape(a.id), self.rg(a.id)))
    }

    // ── reductions ─────────────────────────────────────────────────────

    /// Sum of all entries as a rank-0 tensor.
    pub fn sum<'a>(&'a self, a: Var<'a>) -> Var<'a> {
        let s = self.value_of(a.id).sum();
        self.push(Tensor::scalar(s), Op::SumAll(a.id), self.rg(a.id))
    }

    pub fn mean<'a>(&'a self, a: Var<'a>) -> Var<'a> {
        let n = self.value_of(a.id).len() as f64;
        let s = self.sum(a);
        self.scale(s, 1.0 / n)
    }

    /// Per-item sum over all but the leading axis: `[N, ...] -> [N]`.
    pub fn sum_per_sample<'a>(&'a self, a: Var<'a>) -> Result<Var<'a>> {
        let va = self.value_of(a.id);
        let n = *va.shape().first().ok_or_else(|| Error::invalid("sum_per_sample of a scalar"))?;
        let per = va.len() / n.max(1);
        let data = (0..n).map(|i| va.data()[i * per..(i + 1) * per].iter().sum()).collect();
        Ok(self.push(Tensor::new(&[n], data)?, Op::SumPerSample(a.id), self.rg(a.id)))
    }

    /// Per-item multivariate normal log-density of `z[N,C,...]`, treating
    /// each spatial location as an independent draw of `N(mean[C], cov[C,C])`.
    /// Fails with [`Error::Degenerate`] when `cov` is not positive definite.
    pub fn mvn_log_pdf<'a>(&'a self, z: Var<'a>, mean: Var<'a>, cov: Var<'a>) -> Result<Var<'a>> {
        let (vz, vm, vc) = (self.value_of(z.id), self.value_of(mean.id), self.value_of(cov.id));
        if vz.rank() < 2 {
            return Err(Error::invalid(format!("mvn_log_pdf needs [N,C,...], got {:?}", vz.shape())));
        }
        let (n, c) = (vz.shape()[0], vz.shape()[1]);
        if vm.shape() != [c] {
            return Err(mismatch("mvn_log_pdf mean", &vz, &vm));
        }
        if vc.shape() != [c, c] {
            return Err(mismatch("mvn_log_pdf cov", &vz, &vc));
        }
        let chol = linalg::cholesky(vc.data(), c).ok_or_else(|| {
            Error::Degenerate(format!("{c}×{c} covariance is not positive definite"))
        })?;
        let logdet = linalg::cholesky_logdet(&chol, c);
        let precision = linalg::cholesky_inverse(&chol, c);
        let plane = vz.len() / (n * c);
        let norm = -0.5 * plane as f64 * (logdet + c as f64 * (2.0 * PI).ln());
        let zd = vz.data();
        let mut out = vec![norm; n];
        let mut r = vec![0.0; c];
        for (i, o) in out.iter_mut().enumerate() {
            let base = i * c * plane;
            let mut quad = 0.0;
            for p in 0..plane {
                for ch in 0..c {
                    r[ch] = zd[base + ch * plane + p] - vm.data()[ch];
                }
                for a in 0..c {
                    let pr: f64 = (0..c).map(|b| precision[a * c + b] * r[b]).sum();
                    quad += r[a] * pr;
                }
            }
            *o -= 0.5 * quad;
        }
        let rg = self.rg(z.id) || self.rg(mean.id) || self.rg(cov.id);
        Ok(self.push(
            Tensor::new(&[n], out)?,
            Op::MvnLogPdf {
                z: z.id,
                mean: mean.id,
                cov: cov.id,
                precision: Rc::new(precision),
            },
            rg,
        ))
    }
}

fn backprop_node(nodes: &[Node], id: Id, g: &Tensor, grads: &mut [Option<Tensor>]) {
    let val = |i: Id| -> &Tensor { &nodes[i].value };
    let rg = |i: Id| nodes[i].requires_grad;
    let send = |i: Id, t: Tensor, grads: &mut [Option<Tensor>]| {
        if rg(i) {
            accumulate(&mut grads[i], t);
        }
    };
    match &nodes[id].op {
        Op::Leaf => {}
        &Op::Add(a, b) => {
            send(a, reduce_to(g, val(a).shape()), grads);
            send(b, reduce_to(g, val(b).shape()), grads);
        }
        &Op::Sub(a, b) => {
            send(a, reduce_to(g, val(a).shape()), grads);
            if rg(b) {
                send(b, reduce_to(&g.map(|v| -v), val(b).shape()), grads);
            }
        }
        &Op::Mul(a, b) => {
            if rg(a) {
                send(a, reduce_to(&mul_broadcast(g, val(b), |x, y| x * y), val(a).shape()), grads);
            }
            if rg(b) {
                send(b, reduce_to(&mul_broadcast(g, val(a), |x, y| x * y), val(b).shape()), grads);
            }
        }
        &Op::Div(a, b) => {
            if rg(a) {
                send(a, reduce_to(&mul_broadcast(g, val(b), |x, y| x / y), val(a).shape()), grads);
            }
            if rg(b) {
                // d(a/b)/db = -out / b
                let out = val(id);
                let t = mul_broadcast(&g.zip_map(out, |x, o| -x * o).expect("same shape"), val(b), |x, y| x / y);
                send(b, reduce_to(&t, val(b).shape()), grads);
            }
        }
        &Op::Neg(a) => send(a, g.map(|v| -v), grads),
        &Op::Scale(a, c) => send(a, g.map(|v| c * v), grads),
        &Op::AddConst(a) => send(a, g.clone(), grads),
        &Op::Exp(a) => send(a, g.zip_map(val(id), |x, o| x * o).expect("same shape"), grads),
        &Op::Ln(a) => send(a, g.zip_map(val(a), |x, v| x / v).expect("same shape"), grads),
        &Op::Tanh(a) => send(a, g.zip_map(val(id), |x, o| x * (1.0 - o * o)).expect("same shape"), grads),
        &Op::MatMul(a, b) => {
            let (va, vb) = (val(a), val(b));
            let (m, k, n) = (va.shape()[0], va.shape()[1], vb.shape()[1]);
            if rg(a) {
                let bt = kernels::transpose(vb.data(), k, n);
                let ga = kernels::matmul(g.data(), &bt, m, n, k);
                send(a, Tensor::new(&[m, k], ga).expect("shape"), grads);
            }
            if rg(b) {
                let at = kernels::transpose(va.data(), m, k);
                let gb = kernels::matmul(&at, g.data(), k, m, n);
                send(b, Tensor::new(&[k, n], gb).expect("shape"), grads);
            }
        }
        &Op::Conv2d {
            input,
            kernel,
            bias,
            dims,
        } => {
            let want_params = rg(kernel) || rg(bias);
            let (gi, gk, gb) = kernels::conv2d_backward(
                val(input).data(),
                val(kernel).data(),
                g.data(),
                dims,
                rg(input),
                want_params,
            );
            if let Some(gi) = gi {
                send(input, Tensor::new(val(input).shape(), gi).expect("shape"), grads);
            }
            if let Some(gk) = gk {
                send(kernel, Tensor::new(val(kernel).shape(), gk).expect("shape"), grads);
            }
            if let Some(gb) = gb {
                send(bias, Tensor::new(val(bias).shape(), gb).expect("shape"), grads);
            }
        }
        &Op::ChannelMix { input, weight } => {
            let (vi, vw) = (val(input), val(weight));
            let (n, c) = (vi.shape()[0], vi.shape()[1]);
            let plane = vi.len() / (n * c);
            if rg(input) {
                let wt = kernels::transpose(vw.data(), c, c);
                let gi = kernels::channel_mix(g.data(), &wt, n, c, plane);
                send(input, Tensor::new(vi.shape(), gi).expect("shape"), grads);
            }
            if rg(weight) {
                let mut gw = vec![0.0; c * c];
                for s in 0..n {
                    let gs = &g.data()[s * c * plane..(s + 1) * c * plane];
                    let xs = &vi.data()[s * c * plane..(s + 1) * c * plane];
                    for i in 0..c {
                        let grow = &gs[i * plane..(i + 1) * plane];
                        for j in 0..c {
                            let xrow = &xs[j * plane..(j + 1) * plane];
                            gw[i * c + j] += grow.iter().zip(xrow).map(|(a, b)| a * b).sum::<f64>();
                        }
                    }
                }
                send(weight, Tensor::new(&[c, c], gw).expect("shape"), grads);
            }
        }
        Op::Gather { input, index } => {
            let mut gi = Tensor::zeros(val(*input).shape());
            let d = gi.data_mut();
            for (gv, &i) in g.data().iter().zip(index.iter()) {
                d[i] += gv;
            }
            send(*input, gi, grads);
        }
        Op::Concat { inputs, axis } => {
            let shape = g.shape();
            let outer: usize = shape[..*axis].iter().product();
            let inner: usize = shape[axis + 1..].iter().product();
            let total_block = shape[*axis] * inner;
            let mut offset = 0;
            for &inp in inputs {
                let vshape = val(inp).shape();
                let block = vshape[*axis] * inner;
                if rg(inp) {
                    let mut data = Vec::with_capacity(outer * block);
                    for o in 0..outer {
                        let start = o * total_block + offset;
                        data.extend_from_slice(&g.data()[start..start + block]);
                    }
                    send(inp, Tensor::new(vshape, data).expect("shape"), grads);
                }
                offset += block;
            }
        }
        &Op::Reshape(a) => send(a, g.reshape(val(a).shape()).expect("same size"), grads),
        &Op::SumAll(a) => send(a, Tensor::full(val(a).shape(), g.item()), grads),
        &Op::SumPerSample(a) => {
            let va = val(a);
            let n = va.shape()[0];
            let per = va.len() / n.max(1);
            let data = (0..n).flat_map(|i| std::iter::repeat_n(g.data()[i], per)).collect();
            send(a, Tensor::new(va.shape(), data).expect("shape"), grads);
        }
        Op::MvnLogPdf {
            z,
            mean,
            cov,
            precision,
        } => {
            let (vz, vm) = (val(*z), val(*mean));
            let (n, c) = (vz.shape()[0], vz.shape()[1]);
            let plane = vz.len() / (n * c);
            let p = precision.as_slice();
            let mut gz = rg(*z).then(|| Tensor::zeros(vz.shape()));
            let mut gm = vec![0.0; c];
            // Σ_n g_n Σ_p r rᵀ
            let mut scatter = vec![0.0; c * c];
            let mut r = vec![0.0; c];
            let mut pr = vec![0.0; c];
            for s in 0..n {
                let gs = g.data()[s];
                let base = s * c * plane;
                for q in 0..plane {
                    for ch in 0..c {
                        r[ch] = vz.data()[base + ch * plane + q] - vm.data()[ch];
                    }
                    for a in 0..c {
                        pr[a] = (0..c).map(|b| p[a * c + b] * r[b]).sum();
                    }
                    if let Some(gz) = gz.as_mut() {
                        let d = gz.data_mut();
                        for ch in 0..c {
                            d[base + ch * plane + q] = -gs * pr[ch];
                        }
                    }
                    for a in 0..c {
                        gm[a] += gs * pr[a];
                        for b in 0..c {
                            scatter[a * c + b] += gs * r[a] * r[b];
                        }
                    }
                }
            }
            if let Some(gz) = gz {
                send(*z, gz, grads);
            }
            if rg(*mean) {
                send(*mean, Tensor::new(&[c], gm).expect("shape"), grads);
            }
            if rg(*cov) {
                let gsum: f64 = g.data().iter().sum();
                let pap = kernels::matmul(&kernels::matmul(p, &scatter, c, c, c), p, c, c, c);
                let gc = p
                    .iter()
                    .zip(&pap)
                    .map(|(pi, papi)| -0.5 * plane as f64 * gsum * pi + 0.5 * papi)
                    .collect();
                send(*cov, Tensor::new(&[c, c], gc).expect("shape"), grads);
            }
        }
    }
}

impl<'t> Var<'t> {
    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    /// Current value. Panics after the tape has been consumed.
    pub fn value(&self) -> Rc<Tensor> {
        self.tape.value_of(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.nodes.borrow()[self.id].value.shape().to_vec()
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.rg(self.id)
    }

    pub fn add(self, o: Var<'t>) -> Result<Var<'t>> {
        self.tape.add(self, o)
    }
    pub fn sub(self, o: Var<'t>) -> Result<Var<'t>> {
        self.tape.sub(self, o)
    }
    pub fn mul(self, o: Var<'t>) -> Result<Var<'t>> {
        self.tape.mul(self, o)
    }
    pub fn div(self, o: Var<'t>) -> Result<Var<'t>> {
        self.tape.div(self, o)
    }
    pub fn neg(self) -> Var<'t> {
        self.tape.neg(self)
    }
    pub fn scale(self, c: f64) -> Var<'t> {
        self.tape.scale(self, c)
    }
    pub fn add_const(self, c: f64) -> Var<'t> {
        self.tape.add_const(self, c)
    }
    pub fn exp(self) -> Var<'t> {
        self.tape.exp(self)
    }
    pub fn ln(self) -> Var<'t> {
        self.tape.ln(self)
    }
    pub fn tanh(self) -> Var<'t> {
        self.tape.tanh(self)
    }
    pub fn square(self) -> Result<Var<'t>> {
        self.tape.mul(self, self)
    }
    pub fn matmul(self, o: Var<'t>) -> Result<Var<'t>> {
        self.tape.matmul(self, o)
    }
    pub fn reshape(self, shape: &[usize]) -> Result<Var<'t>> {
        self.tape.reshape(self, shape)
    }
    pub fn sum(self) -> Var<'t> {
        self.tape.sum(self)
    }
    pub fn mean(self) -> Var<'t> {
        self.tape.mean(self)
    }
    pub fn sum_per_sample(self) -> Result<Var<'t>> {
        self.tape.sum_per_sample(self)
    }

    /// Transpose of a 2-D value.
    pub fn t(self) -> Result<Var<'t>> {
        let shape = self.shape();
        let &[m, n] = shape.as_slice() else {
            return Err(Error::invalid(format!("transpose of shape {shape:?}")));
        };
        let index: Vec<usize> = (0..n).flat_map(|j| (0..m).map(move |i| i * n + j)).collect();
        self.tape.gather(self, Rc::new(index), &[n, m])
    }

    /// Channels `start..start+count` of an `[N,C,...]` value.
    pub fn narrow_channels(self, start: usize, count: usize) -> Result<Var<'t>> {
        let shape = self.shape();
        if shape.len() < 2 || start + count > shape[1] {
            return Err(Error::invalid(format!(
                "channel range {start}..{} of shape {shape:?}",
                start + count
            )));
        }
        let (n, c) = (shape[0], shape[1]);
        let plane: usize = shape[2..].iter().product();
        let mut index = Vec::with_capacity(n * count * plane);
        for s in 0..n {
            let base = s * c * plane + start * plane;
            index.extend(base..base + count * plane);
        }
        let mut out_shape = shape.clone();
        out_shape[1] = count;
        self.tape.gather(self, Rc::new(index), &out_shape)
    }
}
