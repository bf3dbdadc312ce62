//! Define-by-run reverse-mode differentiation over small dense tensors.
//!
//! A [`Graph`] is an append-only tape. Every operation appends a node holding
//! its output value and the ids of its inputs; [`Graph::backward`] walks the
//! tape in reverse append order and returns the gradients of every leaf that
//! was registered with `requires_grad`. The tape is cleared afterwards, so a
//! fresh graph is built for every forward pass.
//!
//! Tensors are generic over [`Real`] so the same model code can be evaluated
//! in `f64` for finite-difference checks. Everything that crosses a process
//! boundary is `f32`.

use std::fmt::Debug;
use std::iter::Sum;
use std::ops::{AddAssign, MulAssign};

use num_traits::Float;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{contract, Error, Result};

/// Scalar element type of a [`Tensor`].
pub trait Real: Float + Default + Debug + Send + Sync + Sum + AddAssign + MulAssign + 'static {
    fn cast_from(v: f64) -> Self;
    fn as_f64(self) -> f64;
}

impl Real for f32 {
    fn cast_from(v: f64) -> Self {
        v as f32
    }
    fn as_f64(self) -> f64 {
        self as f64
    }
}

impl Real for f64 {
    fn cast_from(v: f64) -> Self {
        v
    }
    fn as_f64(self) -> f64 {
        self
    }
}

/// Dense row-major tensor with an optional gradient slot.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T: Real = f32> {
    shape: Vec<usize>,
    data: Vec<T>,
    requires_grad: bool,
    grad: Option<Vec<T>>,
}

impl<T: Real> Tensor<T> {
    pub fn new(shape: Vec<usize>, data: Vec<T>) -> Result<Self> {
        if shape.is_empty() || shape.contains(&0) {
            return Err(contract(format!("shape {shape:?} must have positive extents")));
        }
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(contract(format!(
                "shape {shape:?} holds {n} elements but {} were given",
                data.len()
            )));
        }
        Ok(Self {
            shape,
            data,
            requires_grad: false,
            grad: None,
        })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Self::new(shape, vec![T::zero(); n]).expect("positive extents")
    }

    pub fn scalar(v: T) -> Self {
        Self::new(vec![1], vec![v]).expect("scalar shape")
    }

    pub fn from_vec(data: Vec<T>) -> Self {
        let n = data.len();
        Self::new(vec![n], data).expect("nonempty vector")
    }

    /// Builds a `[rows, cols]` tensor from a flat row-major buffer.
    pub fn matrix(rows: usize, cols: usize, data: Vec<T>) -> Result<Self> {
        Self::new(vec![rows, cols], data)
    }

    pub fn with_grad(mut self) -> Self {
        self.requires_grad = true;
        self
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn rows(&self) -> usize {
        self.shape[0]
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn set_requires_grad(&mut self, on: bool) {
        self.requires_grad = on;
        if !on {
            self.grad = None;
        }
    }

    pub fn grad(&self) -> Option<&[T]> {
        self.grad.as_deref()
    }

    pub fn set_grad(&mut self, grad: Vec<T>) -> Result<()> {
        if grad.len() != self.data.len() {
            return Err(Error::ShapeMismatch {
                op: "set_grad",
                left: self.shape.clone(),
                right: vec![grad.len()],
            });
        }
        self.grad = Some(grad);
        Ok(())
    }

    pub fn take_grad(&mut self) -> Option<Vec<T>> {
        self.grad.take()
    }

    pub fn zero_grad(&mut self) {
        self.grad = None;
    }

    /// Element-wise conversion to another precision. The gradient slot is dropped.
    pub fn cast<U: Real>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| U::cast_from(v.as_f64())).collect(),
            requires_grad: self.requires_grad,
            grad: None,
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    fn detached(&self) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.clone(),
            requires_grad: false,
            grad: None,
        }
    }
}

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Operation selector for [`Graph::apply`].
#[derive(Clone, Debug, PartialEq)]
pub enum OpKind {
    Add,
    Sub,
    Mul,
    MatMul,
    /// `x · wᵀ + b` with `w: [out, in]`, `b: [out]`.
    Linear,
    Mean,
    Scale(f64),
    /// Concatenation along the last axis.
    Concat,
    Relu,
    LeakyRelu(f64),
    Sigmoid,
    Log,
    /// `log σ(z)` evaluated without forming `σ(z)`.
    LogSigmoid,
    Dropout {
        rate: f64,
        seed: u64,
    },
}

pub const DEFAULT_LEAKY_SLOPE: f64 = 0.2;

#[derive(Debug)]
enum Op<T> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    MatMul(Var, Var),
    Linear(Var, Var, Var),
    Mean(Var),
    Scale(Var, T),
    Concat(Vec<Var>),
    Relu(Var),
    LeakyRelu(Var, T),
    Sigmoid(Var),
    Log(Var),
    LogSigmoid(Var),
    Dropout(Var, Vec<T>),
}

#[derive(Debug)]
struct Node<T: Real> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Append-only operation tape.
#[derive(Debug)]
pub struct Graph<T: Real = f32> {
    nodes: Vec<Node<T>>,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Leaf gradients produced by one backward pass.
#[derive(Debug)]
pub struct Gradients<T: Real = f32> {
    grads: Vec<Option<Vec<T>>>,
}

impl<T: Real> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&[T]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    pub fn take(&mut self, v: Var) -> Option<Vec<T>> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Registers a tensor as a leaf. It is differentiated iff `requires_grad` is set.
    pub fn leaf(&mut self, t: &Tensor<T>) -> Var {
        let requires_grad = t.requires_grad;
        self.push(t.detached(), Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        let mut t = t;
        t.requires_grad = false;
        t.grad = None;
        self.push(t, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        // Nodes with no differentiable input are stored as constants.
        let op = if requires_grad { op } else { Op::Leaf };
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa != sb {
            return Err(Error::ShapeMismatch {
                op,
                left: sa.to_vec(),
                right: sb.to_vec(),
            });
        }
        Ok(())
    }

    fn zip(&mut self, op: &'static str, a: Var, b: Var, f: impl Fn(T, T) -> T) -> Result<Tensor<T>> {
        self.same_shape(op, a, b)?;
        let (va, vb) = (self.value(a), self.value(b));
        let data = va.data.iter().zip(&vb.data).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(va.shape.clone(), data)
    }

    fn map(&self, a: Var, f: impl Fn(T) -> T) -> Tensor<T> {
        let va = self.value(a);
        Tensor {
            shape: va.shape.clone(),
            data: va.data.iter().map(|&x| f(x)).collect(),
            requires_grad: false,
            grad: None,
        }
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip("add", a, b, |x, y| x + y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip("sub", a, b, |x, y| x - y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::Sub(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip("mul", a, b, |x, y| x * y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::Mul(a, b), rg))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                left: sa.to_vec(),
                right: sb.to_vec(),
            });
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![T::zero(); m * n];
        let (da, db) = (&self.value(a).data, &self.value(b).data);
        for i in 0..m {
            let row = &mut out[i * n..(i + 1) * n];
            for p in 0..k {
                axpy(da[i * k + p], &db[p * n..(p + 1) * n], row);
            }
        }
        let out = Tensor::new(vec![m, n], out)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::MatMul(a, b), rg))
    }

    /// Affine map `x · wᵀ + b` for `x: [m, in]`, `w: [out, in]`, `b: [out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (sx, sw, sb) = (self.value(x).shape(), self.value(w).shape(), self.value(b).shape());
        if sx.len() != 2 || sw.len() != 2 || sx[1] != sw[1] {
            return Err(Error::ShapeMismatch {
                op: "linear",
                left: sx.to_vec(),
                right: sw.to_vec(),
            });
        }
        if sb != [sw[0]] {
            return Err(Error::ShapeMismatch {
                op: "linear bias",
                left: sw.to_vec(),
                right: sb.to_vec(),
            });
        }
        let (m, k, n) = (sx[0], sx[1], sw[0]);
        let (dx, dw, db) = (&self.value(x).data, &self.value(w).data, &self.value(b).data);
        let mut out = Vec::with_capacity(m * n);
        for i in 0..m {
            let xi = &dx[i * k..(i + 1) * k];
            for o in 0..n {
                out.push(db[o] + dot(xi, &dw[o * k..(o + 1) * k]));
            }
        }
        let out = Tensor::new(vec![m, n], out)?;
        let rg = self.rg(x) || self.rg(w) || self.rg(b);
        Ok(self.push(out, Op::Linear(x, w, b), rg))
    }

    /// Mean over all elements, shape `[1]`.
    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let va = self.value(a);
        let s: f64 = va.data.iter().map(|v| v.as_f64()).sum();
        let out = Tensor::scalar(T::cast_from(s / va.len() as f64));
        let rg = self.rg(a);
        Ok(self.push(out, Op::Mean(a), rg))
    }

    pub fn scale(&mut self, a: Var, c: T) -> Result<Var> {
        let out = self.map(a, |x| x * c);
        let rg = self.rg(a);
        Ok(self.push(out, Op::Scale(a, c), rg))
    }

    pub fn neg(&mut self, a: Var) -> Result<Var> {
        self.scale(a, -T::one())
    }

    /// Concatenates along the last axis. All inputs share every other extent.
    pub fn concat(&mut self, inputs: &[Var]) -> Result<Var> {
        let first = *inputs
            .first()
            .ok_or_else(|| contract("concat needs at least one input"))?;
        let lead = self.value(first).shape();
        let rank = lead.len();
        if rank > 2 {
            return Err(contract(format!("concat supports rank 1 or 2, got {lead:?}")));
        }
        let rows = if rank == 2 { lead[0] } else { 1 };
        for &v in &inputs[1..] {
            let s = self.value(v).shape();
            if s.len() != rank || (rank == 2 && s[0] != rows) {
                return Err(Error::ShapeMismatch {
                    op: "concat",
                    left: lead.to_vec(),
                    right: s.to_vec(),
                });
            }
        }
        let widths: Vec<usize> = inputs.iter().map(|&v| *self.value(v).shape().last().unwrap()).collect();
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for (&v, &w) in inputs.iter().zip(&widths) {
                out.extend_from_slice(&self.value(v).data[r * w..(r + 1) * w]);
            }
        }
        let shape = if rank == 2 { vec![rows, total] } else { vec![total] };
        let out = Tensor::new(shape, out)?;
        let rg = inputs.iter().any(|&v| self.rg(v));
        Ok(self.push(out, Op::Concat(inputs.to_vec()), rg))
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let out = self.map(a, |x| if x > T::zero() { x } else { T::zero() });
        let rg = self.rg(a);
        Ok(self.push(out, Op::Relu(a), rg))
    }

    pub fn leaky_relu(&mut self, a: Var, slope: T) -> Result<Var> {
        let out = self.map(a, |x| if x > T::zero() { x } else { slope * x });
        let rg = self.rg(a);
        Ok(self.push(out, Op::LeakyRelu(a, slope), rg))
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        let out = self.map(a, sigmoid);
        let rg = self.rg(a);
        Ok(self.push(out, Op::Sigmoid(a), rg))
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        if let Some(bad) = self.value(a).data.iter().find(|&&x| !(x > T::zero())) {
            return Err(Error::Domain(format!("log of non-positive value {bad:?}")));
        }
        let out = self.map(a, |x| x.ln());
        let rg = self.rg(a);
        Ok(self.push(out, Op::Log(a), rg))
    }

    pub fn log_sigmoid(&mut self, a: Var) -> Result<Var> {
        let out = self.map(a, log_sigmoid);
        let rg = self.rg(a);
        Ok(self.push(out, Op::LogSigmoid(a), rg))
    }

    /// Inverted dropout: each entry is zeroed with probability `rate` and
    /// survivors are scaled by `1 / (1 - rate)`. Always active.
    pub fn dropout<R: Rng + ?Sized>(&mut self, a: Var, rate: f64, rng: &mut R) -> Result<Var> {
        if !(0.0..1.0).contains(&rate) {
            return Err(contract(format!("dropout rate {rate} outside [0, 1)")));
        }
        if rate == 0.0 {
            return Ok(a);
        }
        let keep = T::cast_from(1.0 / (1.0 - rate));
        let mask: Vec<T> = (0..self.value(a).len())
            .map(|_| if rng.random::<f64>() < rate { T::zero() } else { keep })
            .collect();
        let va = self.value(a);
        let data = va.data.iter().zip(&mask).map(|(&x, &k)| x * k).collect();
        let out = Tensor::new(va.shape.clone(), data)?;
        let rg = self.rg(a);
        Ok(self.push(out, Op::Dropout(a, mask), rg))
    }

    /// Applies an operation selected at runtime.
    pub fn apply(&mut self, kind: &OpKind, inputs: &[Var]) -> Result<Var> {
        let arity = |n: usize| -> Result<()> {
            if inputs.len() != n {
                return Err(contract(format!("{kind:?} takes {n} inputs, got {}", inputs.len())));
            }
            Ok(())
        };
        match *kind {
            OpKind::Add => {
                arity(2)?;
                self.add(inputs[0], inputs[1])
            }
            OpKind::Sub => {
                arity(2)?;
                self.sub(inputs[0], inputs[1])
            }
            OpKind::Mul => {
                arity(2)?;
                self.mul(inputs[0], inputs[1])
            }
            OpKind::MatMul => {
                arity(2)?;
                self.matmul(inputs[0], inputs[1])
            }
            OpKind::Linear => {
                arity(3)?;
                self.linear(inputs[0], inputs[1], inputs[2])
            }
            OpKind::Mean => {
                arity(1)?;
                self.mean(inputs[0])
            }
            OpKind::Scale(c) => {
                arity(1)?;
                self.scale(inputs[0], T::cast_from(c))
            }
            OpKind::Concat => self.concat(inputs),
            OpKind::Relu => {
                arity(1)?;
                self.relu(inputs[0])
            }
            OpKind::LeakyRelu(s) => {
                arity(1)?;
                self.leaky_relu(inputs[0], T::cast_from(s))
            }
            OpKind::Sigmoid => {
                arity(1)?;
                self.sigmoid(inputs[0])
            }
            OpKind::Log => {
                arity(1)?;
                self.log(inputs[0])
            }
            OpKind::LogSigmoid => {
                arity(1)?;
                self.log_sigmoid(inputs[0])
            }
            OpKind::Dropout { rate, seed } => {
                arity(1)?;
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                self.dropout(inputs[0], rate, &mut rng)
            }
        }
    }

    /// Back-propagates from a scalar loss and clears the tape.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients<T>> {
        let shape = self.value(loss).shape();
        if shape != [1] {
            return Err(contract(format!("backward needs a [1] loss, got {shape:?}")));
        }
        self.backward_from(loss, vec![T::one()])
    }

    /// Vector-Jacobian product: back-propagates `seed` (same shape as
    /// `output`) and clears the tape.
    pub fn backward_from(&mut self, output: Var, seed: Vec<T>) -> Result<Gradients<T>> {
        if self.nodes.is_empty() {
            return Err(contract("backward on an empty graph"));
        }
        if seed.len() != self.value(output).len() {
            return Err(Error::ShapeMismatch {
                op: "backward seed",
                left: self.value(output).shape.clone(),
                right: vec![seed.len()],
            });
        }
        let mut grads: Vec<Option<Vec<T>>> = vec![None; self.nodes.len()];
        if self.rg(output) {
            grads[output.0] = Some(seed);
        }
        for i in (0..=output.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            match &node.op {
                Op::Leaf => {
                    grads[i] = Some(g);
                }
                Op::Add(a, b) => {
                    self.accumulate(&mut grads, *a, |j| g[j]);
                    self.accumulate(&mut grads, *b, |j| g[j]);
                }
                Op::Sub(a, b) => {
                    self.accumulate(&mut grads, *a, |j| g[j]);
                    self.accumulate(&mut grads, *b, |j| -g[j]);
                }
                Op::Mul(a, b) => {
                    let (va, vb) = (&self.value(*a).data, &self.value(*b).data);
                    self.accumulate(&mut grads, *a, |j| g[j] * vb[j]);
                    self.accumulate(&mut grads, *b, |j| g[j] * va[j]);
                }
                Op::MatMul(a, b) => {
                    let (va, vb) = (self.value(*a), self.value(*b));
                    let (m, k, n) = (va.shape[0], va.shape[1], vb.shape[1]);
                    if self.rg(*a) {
                        // dA = dC · Bᵀ
                        let mut da = vec![T::zero(); m * k];
                        for r in 0..m {
                            for p in 0..k {
                                da[r * k + p] = dot(&g[r * n..(r + 1) * n], &vb.data[p * n..(p + 1) * n]);
                            }
                        }
                        add_slot(&mut grads[a.0], da);
                    }
                    if self.rg(*b) {
                        // dB = Aᵀ · dC
                        let mut db = vec![T::zero(); k * n];
                        for r in 0..m {
                            for p in 0..k {
                                axpy(va.data[r * k + p], &g[r * n..(r + 1) * n], &mut db[p * n..(p + 1) * n]);
                            }
                        }
                        add_slot(&mut grads[b.0], db);
                    }
                }
                Op::Linear(x, w, b) => {
                    let (vx, vw) = (self.value(*x), self.value(*w));
                    let (m, k, n) = (vx.shape[0], vx.shape[1], vw.shape[0]);
                    if self.rg(*x) {
                        // dX = dY · W
                        let mut dx = vec![T::zero(); m * k];
                        for r in 0..m {
                            let row = &mut dx[r * k..(r + 1) * k];
                            for o in 0..n {
                                axpy(g[r * n + o], &vw.data[o * k..(o + 1) * k], row);
                            }
                        }
                        add_slot(&mut grads[x.0], dx);
                    }
                    if self.rg(*w) {
                        // dW = dYᵀ · X
                        let mut dw = vec![T::zero(); n * k];
                        for r in 0..m {
                            let xr = &vx.data[r * k..(r + 1) * k];
                            for o in 0..n {
                                axpy(g[r * n + o], xr, &mut dw[o * k..(o + 1) * k]);
                            }
                        }
                        add_slot(&mut grads[w.0], dw);
                    }
                    if self.rg(*b) {
                        let mut dbias = vec![T::zero(); n];
                        for r in 0..m {
                            for o in 0..n {
                                dbias[o] += g[r * n + o];
                            }
                        }
                        add_slot(&mut grads[b.0], dbias);
                    }
                }
                Op::Mean(a) => {
                    let n = T::cast_from(self.value(*a).len() as f64);
                    let share = g[0] / n;
                    self.accumulate(&mut grads, *a, |_| share);
                }
                Op::Scale(a, c) => {
                    let c = *c;
                    self.accumulate(&mut grads, *a, |j| g[j] * c);
                }
                Op::Concat(inputs) => {
                    let out_shape = &node.value.shape;
                    let total = *out_shape.last().unwrap();
                    let rows = if out_shape.len() == 2 { out_shape[0] } else { 1 };
                    let mut offset = 0;
                    for &v in inputs {
                        let w = *self.value(v).shape.last().unwrap();
                        if self.rg(v) {
                            let mut part = Vec::with_capacity(rows * w);
                            for r in 0..rows {
                                part.extend_from_slice(&g[r * total + offset..r * total + offset + w]);
                            }
                            add_slot(&mut grads[v.0], part);
                        }
                        offset += w;
                    }
                }
                Op::Relu(a) => {
                    let va = &self.value(*a).data;
                    self.accumulate(&mut grads, *a, |j| if va[j] > T::zero() { g[j] } else { T::zero() });
                }
                Op::LeakyRelu(a, s) => {
                    let (va, s) = (&self.value(*a).data, *s);
                    self.accumulate(&mut grads, *a, |j| if va[j] > T::zero() { g[j] } else { g[j] * s });
                }
                Op::Sigmoid(a) => {
                    let out = &node.value.data;
                    self.accumulate(&mut grads, *a, |j| g[j] * out[j] * (T::one() - out[j]));
                }
                Op::Log(a) => {
                    let va = &self.value(*a).data;
                    self.accumulate(&mut grads, *a, |j| g[j] / va[j]);
                }
                Op::LogSigmoid(a) => {
                    // d/dz log σ(z) = σ(-z)
                    let va = &self.value(*a).data;
                    self.accumulate(&mut grads, *a, |j| g[j] * sigmoid(-va[j]));
                }
                Op::Dropout(a, mask) => {
                    self.accumulate(&mut grads, *a, |j| g[j] * mask[j]);
                }
            }
        }
        self.nodes.clear();
        Ok(Gradients { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Vec<T>>], target: Var, f: impl Fn(usize) -> T) {
        if !self.rg(target) {
            return;
        }
        let n = self.value(target).len();
        match &mut grads[target.0] {
            Some(acc) => acc.iter_mut().enumerate().for_each(|(j, v)| *v += f(j)),
            slot => *slot = Some((0..n).map(f).collect()),
        }
    }
}

fn add_slot<T: Real>(slot: &mut Option<Vec<T>>, g: Vec<T>) {
    match slot {
        Some(acc) => acc.iter_mut().zip(g).for_each(|(a, b)| *a += b),
        None => *slot = Some(g),
    }
}

pub fn sigmoid<T: Real>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

/// `log σ(x) = -softplus(-x)`, stable for large `|x|`.
pub fn log_sigmoid<T: Real>(x: T) -> T {
    if x >= T::zero() {
        -(-x).exp().ln_1p()
    } else {
        x - x.exp().ln_1p()
    }
}

/// Dot product with eight independent accumulators so the loop vectorizes.
#[inline]
fn dot<T: Real>(a: &[T], b: &[T]) -> T {
    let mut acc = [T::zero(); 8];
    let ca = a.chunks_exact(8);
    let cb = b.chunks_exact(8);
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        for l in 0..8 {
            acc[l] += x[l] * y[l];
        }
    }
    let mut tail = T::zero();
    for (&x, &y) in ra.iter().zip(rb) {
        tail += x * y;
    }
    ((acc[0] + acc[1]) + (acc[2] + acc[3])) + ((acc[4] + acc[5]) + (acc[6] + acc[7])) + tail
}

#[inline]
fn axpy<T: Real>(alpha: T, x: &[T], y: &mut [T]) {
    for (yi, &xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

/// Compares the tape gradient of a scalar function against central
/// differences and returns `max |analytic - numeric| / max(1, |analytic|)`.
///
/// `f` must be deterministic; two evaluations at `point` are compared first.
pub fn grad_check<F>(f: F, point: &Tensor<f64>, eps: f64) -> Result<f64>
where
    F: Fn(&mut Graph<f64>, Var) -> Result<Var>,
{
    if !(eps > 0.0 && eps <= 1e-2) {
        return Err(contract(format!("eps {eps} outside (0, 1e-2]")));
    }
    let eval = |p: &Tensor<f64>| -> Result<f64> {
        let mut g = Graph::new();
        let x = g.leaf(p);
        let y = f(&mut g, x)?;
        let v = g.value(y);
        if v.shape() != [1] {
            return Err(contract(format!(
                "grad_check needs a scalar function, got {:?}",
                v.shape()
            )));
        }
        Ok(v.data()[0])
    };
    let base = point.detached();
    let (f0, f1) = (eval(&base)?, eval(&base)?);
    if f0.to_bits() != f1.to_bits() {
        return Err(contract(format!("function is not deterministic: {f0} vs {f1}")));
    }

    let mut g = Graph::new();
    let x = g.leaf(&base.clone().with_grad());
    let y = f(&mut g, x)?;
    let grads = g.backward(y)?;
    let analytic = grads
        .get(x)
        .map(<[f64]>::to_vec)
        .unwrap_or_else(|| vec![0.0; base.len()]);

    let mut worst: f64 = 0.0;
    for (i, &a) in analytic.iter().enumerate() {
        let mut plus = base.clone();
        plus.data_mut()[i] += eps;
        let mut minus = base.clone();
        minus.data_mut()[i] -= eps;
        let numeric = (eval(&plus)? - eval(&minus)?) / (2.0 * eps);
        let err = (a - numeric).abs() / a.abs().max(1.0);
        worst = worst.max(err);
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: Vec<usize>, data: Vec<f32>) -> Tensor {
        Tensor::new(shape, data).unwrap()
    }

    #[test]
    fn sigmoid_of_zero_is_half() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::scalar(0.0f32));
        let y = g.sigmoid(x).unwrap();
        assert_eq!(g.value(y).data(), &[0.5]);
    }

    #[test]
    fn matmul_identity() {
        let mut g = Graph::new();
        let a = g.constant(t(vec![2, 2], vec![1., 2., 3., 4.]));
        let i = g.constant(t(vec![2, 2], vec![1., 0., 0., 1.]));
        let y = g.matmul(a, i).unwrap();
        assert_eq!(g.value(y).data(), &[1., 2., 3., 4.]);
    }

    #[test]
    fn leaky_relu_piecewise() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::from_vec(vec![-1.0f32, 2.0]));
        let y = g.leaky_relu(x, 0.2).unwrap();
        let d = g.value(y).data();
        assert!((d[0] + 0.2).abs() < 1e-7);
        assert_eq!(d[1], 2.0);
    }

    #[test]
    fn shape_errors_name_both_shapes() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::<f32>::zeros(vec![2, 3]));
        let b = g.constant(Tensor::<f32>::zeros(vec![2, 2]));
        let err = g.matmul(a, b).unwrap_err().to_string();
        assert!(err.contains("[2, 3]") && err.contains("[2, 2]"), "{err}");
        assert!(matches!(g.add(a, b), Err(Error::ShapeMismatch { .. })));
    }

    #[test]
    fn log_rejects_non_positive() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::from_vec(vec![1.0f32, 0.0]));
        assert!(matches!(g.log(x), Err(Error::Domain(_))));
    }

    #[test]
    fn dropout_rate_validated() {
        let mut g = Graph::<f32>::new();
        let x = g.constant(Tensor::from_vec(vec![1.0; 4]));
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(g.dropout(x, 1.0, &mut rng).is_err());
        assert!(g.dropout(x, -0.1, &mut rng).is_err());
    }

    #[test]
    fn mean_of_square_gradient() {
        let mut g = Graph::new();
        let x = g.leaf(&Tensor::from_vec(vec![3.0f32]).with_grad());
        let sq = g.mul(x, x).unwrap();
        let loss = g.mean(sq).unwrap();
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.get(x).unwrap(), &[6.0]);
        assert!(g.is_empty());
    }

    #[test]
    fn log_sigmoid_gradient_at_zero() {
        let mut g = Graph::new();
        let w = g.leaf(&Tensor::scalar(0.0f32).with_grad());
        let s = g.sigmoid(w).unwrap();
        let l = g.log(s).unwrap();
        let grads = g.backward(l).unwrap();
        assert_eq!(grads.get(w).unwrap(), &[0.5]);
    }

    #[test]
    fn non_grad_leaf_has_no_gradient() {
        let mut g = Graph::new();
        let a = g.leaf(&Tensor::from_vec(vec![1.0f32, 2.0]).with_grad());
        let b = g.leaf(&Tensor::from_vec(vec![3.0f32, 4.0]));
        let p = g.mul(a, b).unwrap();
        let loss = g.mean(p).unwrap();
        let grads = g.backward(loss).unwrap();
        assert!(grads.get(b).is_none());
        assert_eq!(grads.get(a).unwrap(), &[1.5, 2.0]);
    }

    #[test]
    fn backward_requires_scalar() {
        let mut g = Graph::new();
        let a = g.leaf(&Tensor::from_vec(vec![1.0f32, 2.0]).with_grad());
        assert!(matches!(g.backward(a), Err(Error::Contract(_))));
    }

    #[test]
    fn fan_out_accumulates() {
        // loss = mean(a*b + a) with a used twice; d/da = b + 1.
        let mut g = Graph::new();
        let a = g.leaf(&Tensor::from_vec(vec![2.0f32, -1.0]).with_grad());
        let b = g.constant(Tensor::from_vec(vec![5.0f32, 7.0]));
        let ab = g.mul(a, b).unwrap();
        let s = g.add(ab, a).unwrap();
        let loss = g.mean(s).unwrap();
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.get(a).unwrap(), &[3.0, 4.0]);
    }

    #[test]
    fn log_sigmoid_is_stable() {
        assert!(log_sigmoid(-100.0f32).is_finite());
        assert!((log_sigmoid(-100.0f64) + 100.0).abs() < 1e-12);
        assert!(log_sigmoid(100.0f32).abs() < 1e-30);
        assert!((log_sigmoid(0.0f64) + std::f64::consts::LN_2).abs() < 1e-15);
    }

    #[test]
    fn grad_check_quadratic_and_constant() {
        let p = Tensor::from_vec(vec![1.0, 2.0, 3.0]);
        let err = grad_check(
            |g, x| {
                let sq = g.mul(x, x)?;
                let m = g.mean(sq)?;
                g.scale(m, 3.0)
            },
            &p,
            1e-4,
        )
        .unwrap();
        assert!(err < 1e-5, "{err}");

        let err = grad_check(|g, _| Ok(g.constant(Tensor::scalar(4.0))), &p, 1e-4).unwrap();
        assert_eq!(err, 0.0);
    }

    #[test]
    fn grad_check_detects_nondeterminism() {
        use std::sync::atomic::{AtomicU64, Ordering};
        let calls = AtomicU64::new(0);
        let p = Tensor::from_vec(vec![1.0]);
        let res = grad_check(
            |g, x| {
                let k = calls.fetch_add(1, Ordering::SeqCst) as f64;
                let m = g.mean(x)?;
                g.scale(m, k)
            },
            &p,
            1e-4,
        );
        assert!(matches!(res, Err(Error::Contract(_))));
    }

    #[test]
    fn concat_backward_splits() {
        let mut g = Graph::new();
        let a = g.leaf(&t(vec![2, 1], vec![1., 2.]).with_grad());
        let b = g.leaf(&t(vec![2, 2], vec![3., 4., 5., 6.]).with_grad());
        let c = g.concat(&[a, b]).unwrap();
        assert_eq!(g.value(c).shape(), &[2, 3]);
        assert_eq!(g.value(c).data(), &[1., 3., 4., 2., 5., 6.]);
        let w = g.constant(t(vec![2, 3], vec![1., 2., 3., 4., 5., 6.]));
        let p = g.mul(c, w).unwrap();
        let l = g.mean(p).unwrap();
        let grads = g.backward(l).unwrap();
        let s = 1.0 / 6.0;
        assert_eq!(grads.get(a).unwrap(), &[1. * s, 4. * s]);
        assert_eq!(grads.get(b).unwrap(), &[2. * s, 3. * s, 5. * s, 6. * s]);
    }

    #[test]
    fn tensor_invariants() {
        assert!(Tensor::<f32>::new(vec![2, 2], vec![0.0; 3]).is_err());
        assert!(Tensor::<f32>::new(vec![0], vec![]).is_err());
        let mut x = Tensor::<f32>::zeros(vec![3]);
        assert!(x.set_grad(vec![0.0; 2]).is_err());
        x.set_grad(vec![1.0; 3]).unwrap();
        assert_eq!(x.grad().unwrap().len(), 3);
    }
}
