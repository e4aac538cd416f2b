//! Define-by-run computation graph with reverse-mode differentiation.
//!
//! Every primitive applied to a [`Var`] appends one node to its [`Graph`]; the
//! node keeps its output and whatever intermediates its adjoint needs. Nodes
//! are stored in creation order, which is already a topological order, so
//! [`Graph::backward`] is a single reverse sweep.

use std::cell::{Cell, Ref, RefCell};
use std::sync::Arc;

use super::error::{Result, TensorError};
use super::tensor::{self, numel, Tensor};
use crate::Real;

/// Shared parameter storage. Binding a parameter into a graph is a refcount bump.
pub type Param<T> = Arc<Tensor<T>>;

/// SELU scale constant (self-normalizing parameterization).
pub const SELU_SCALE: f64 = 1.050_700_987_355_480_5;
/// SELU negative-branch shape constant.
pub const SELU_ALPHA: f64 = 1.673_263_242_354_377_3;

thread_local! {
    static SELU_GRAD_SCALE: Cell<f64> = const { Cell::new(SELU_SCALE) };
}

/// Mutation hooks for self-tests. Not part of the numerical API.
#[doc(hidden)]
pub mod hooks {
    use super::*;

    /// Overrides the scale constant used by the SELU adjoint on this thread.
    /// The forward pass is untouched, so a gradient check must notice.
    pub fn set_selu_grad_scale(scale: f64) {
        SELU_GRAD_SCALE.with(|c| c.set(scale));
    }

    pub fn reset_selu_grad_scale() {
        set_selu_grad_scale(SELU_SCALE);
    }
}

/// Batch-normalization mode.
#[derive(Debug, Clone)]
pub enum BatchNormMode<T> {
    /// Normalize with batch statistics.
    Train { eps: T },
    /// Normalize with frozen running statistics.
    Eval {
        running_mean: Tensor<T>,
        running_var: Tensor<T>,
        eps: T,
    },
}

/// Batch statistics observed by a training-mode batch norm, for running-stat updates.
#[derive(Debug, Clone)]
pub struct BatchStats<T> {
    pub mean: Tensor<T>,
    /// Unbiased variance.
    pub var: Tensor<T>,
}

/// Primitive tags accepted by [`Graph::apply`].
#[derive(Debug, Clone)]
pub enum Primitive<T> {
    MatMul,
    Add,
    Sub,
    Mul,
    Div,
    Neg,
    Exp,
    Log,
    Sqrt,
    Square,
    Tanh,
    Selu,
    Softplus,
    Sigmoid,
    Sum,
    SumAxis(usize),
    Mean,
    MeanAxis(usize),
    BroadcastTo(Vec<usize>),
    Reshape(Vec<usize>),
    AddScalar(T),
    MulScalar(T),
    /// Inputs: x, gamma, beta.
    BatchNorm(BatchNormMode<T>),
    /// Inputs: mean, std. Output `mean + std * eps` with `eps` recorded as a constant.
    GaussianSample(Tensor<T>),
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    MatMul(usize, usize),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Div(usize, usize),
    Neg(usize),
    Exp(usize),
    Log(usize),
    Sqrt(usize),
    Square(usize),
    Tanh(usize),
    Selu(usize),
    Softplus(usize),
    Sigmoid(usize),
    Pointwise(usize, Tensor<T>),
    AddScalar(usize),
    MulScalar(usize, T),
    SumAll(usize),
    SumAxis { x: usize, axis: usize, len: usize },
    MeanAll(usize),
    MeanAxis { x: usize, axis: usize, len: usize },
    BroadcastTo(usize),
    Reshape(usize),
    BatchNorm {
        x: usize,
        gamma: usize,
        beta: usize,
        x_hat: Tensor<T>,
        inv_std: Vec<T>,
        train: bool,
    },
    Gaussian {
        mean: usize,
        std: usize,
        eps: Tensor<T>,
    },
}

#[derive(Debug)]
struct Node<T> {
    op: Op<T>,
    value: Arc<Tensor<T>>,
    requires_grad: bool,
    grad: Option<Tensor<T>>,
}

/// Arena of recorded primitive applications.
#[derive(Debug, Default)]
pub struct Graph<T> {
    nodes: RefCell<Vec<Node<T>>>,
    params: RefCell<Vec<usize>>,
}

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy)]
pub struct Var<'g, T> {
    graph: &'g Graph<T>,
    id: usize,
}

impl<T> std::fmt::Debug for Var<'_, T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var({})", self.id)
    }
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: RefCell::new(Vec::new()),
            params: RefCell::new(Vec::new()),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, op: Op<T>, value: Arc<Tensor<T>>, requires_grad: bool) -> Var<'_, T> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            op,
            value,
            requires_grad,
            grad: None,
        });
        Var {
            graph: self,
            id: nodes.len() - 1,
        }
    }

    fn push_checked(
        &self,
        name: &'static str,
        op: Op<T>,
        value: Tensor<T>,
        requires_grad: bool,
    ) -> Result<Var<'_, T>> {
        if let Some(index) = value.first_non_finite() {
            return Err(TensorError::NonFinite { op: name, index });
        }
        Ok(self.push(op, Arc::new(value), requires_grad))
    }

    /// Leaf that does not receive gradients.
    pub fn constant(&self, value: Tensor<T>) -> Var<'_, T> {
        self.push(Op::Leaf, Arc::new(value), false)
    }

    pub fn scalar(&self, value: T) -> Var<'_, T> {
        self.constant(Tensor::scalar(value))
    }

    /// Leaf that accumulates gradients; not registered as a parameter.
    pub fn variable(&self, value: Tensor<T>) -> Var<'_, T> {
        self.push(Op::Leaf, Arc::new(value), true)
    }

    /// Binds a shared parameter as a gradient-tracking leaf and records it in
    /// registration order (see [`Graph::param_grads`]).
    pub fn param(&self, value: &Param<T>) -> Var<'_, T> {
        let v = self.push(Op::Leaf, Arc::clone(value), true);
        self.params.borrow_mut().push(v.id);
        v
    }

    /// Binds a shared tensor without tracking gradients.
    pub fn frozen(&self, value: &Param<T>) -> Var<'_, T> {
        self.push(Op::Leaf, Arc::clone(value), false)
    }

    pub fn value(&self, v: Var<'_, T>) -> Ref<'_, Tensor<T>> {
        Ref::map(self.nodes.borrow(), |n| n[v.id].value.as_ref())
    }

    /// Accumulated gradient of a leaf, if any was produced.
    pub fn grad(&self, v: Var<'_, T>) -> Option<Tensor<T>> {
        self.nodes.borrow()[v.id].grad.clone()
    }

    /// Gradients of every [`Graph::param`] leaf in registration order; zeros where
    /// the parameter did not influence the root.
    pub fn param_grads(&self) -> Vec<Tensor<T>> {
        let nodes = self.nodes.borrow();
        self.params
            .borrow()
            .iter()
            .map(|&id| {
                nodes[id]
                    .grad
                    .clone()
                    .unwrap_or_else(|| Tensor::zeros(nodes[id].value.shape()))
            })
            .collect()
    }

    pub fn param_count(&self) -> usize {
        self.params.borrow().len()
    }

    pub fn zero_grad(&self) {
        for n in self.nodes.borrow_mut().iter_mut() {
            n.grad = None;
        }
    }

    fn same_graph(&self, v: Var<'_, T>) -> Result<usize> {
        if std::ptr::eq(self, v.graph) {
            Ok(v.id)
        } else {
            Err(TensorError::GraphMismatch)
        }
    }

    /// Applies a primitive by tag.
    pub fn apply<'g>(&'g self, tag: Primitive<T>, inputs: &[Var<'g, T>]) -> Result<Var<'g, T>> {
        fn arity(op: &'static str, inputs: usize, expected: usize) -> Result<()> {
            if inputs == expected {
                Ok(())
            } else {
                Err(TensorError::Arity {
                    op,
                    expected,
                    got: inputs,
                })
            }
        }
        for v in inputs {
            self.same_graph(*v)?;
        }
        let n = inputs.len();
        match tag {
            Primitive::MatMul => arity("matmul", n, 2).and_then(|_| inputs[0].matmul(inputs[1])),
            Primitive::Add => arity("add", n, 2).and_then(|_| inputs[0].add(inputs[1])),
            Primitive::Sub => arity("sub", n, 2).and_then(|_| inputs[0].sub(inputs[1])),
            Primitive::Mul => arity("mul", n, 2).and_then(|_| inputs[0].mul(inputs[1])),
            Primitive::Div => arity("div", n, 2).and_then(|_| inputs[0].div(inputs[1])),
            Primitive::Neg => arity("neg", n, 1).and_then(|_| inputs[0].neg()),
            Primitive::Exp => arity("exp", n, 1).and_then(|_| inputs[0].exp()),
            Primitive::Log => arity("log", n, 1).and_then(|_| inputs[0].log()),
            Primitive::Sqrt => arity("sqrt", n, 1).and_then(|_| inputs[0].sqrt()),
            Primitive::Square => arity("square", n, 1).and_then(|_| inputs[0].square()),
            Primitive::Tanh => arity("tanh", n, 1).and_then(|_| inputs[0].tanh()),
            Primitive::Selu => arity("selu", n, 1).and_then(|_| inputs[0].selu()),
            Primitive::Softplus => arity("softplus", n, 1).and_then(|_| inputs[0].softplus()),
            Primitive::Sigmoid => arity("sigmoid", n, 1).and_then(|_| inputs[0].sigmoid()),
            Primitive::Sum => arity("sum", n, 1).and_then(|_| inputs[0].sum()),
            Primitive::SumAxis(a) => arity("sum_axis", n, 1).and_then(|_| inputs[0].sum_axis(a)),
            Primitive::Mean => arity("mean", n, 1).and_then(|_| inputs[0].mean()),
            Primitive::MeanAxis(a) => arity("mean_axis", n, 1).and_then(|_| inputs[0].mean_axis(a)),
            Primitive::BroadcastTo(s) => {
                arity("broadcast_to", n, 1).and_then(|_| inputs[0].broadcast_to(&s))
            }
            Primitive::Reshape(s) => arity("reshape", n, 1).and_then(|_| inputs[0].reshape(&s)),
            Primitive::AddScalar(c) => arity("add_scalar", n, 1).and_then(|_| inputs[0].add_scalar(c)),
            Primitive::MulScalar(c) => arity("mul_scalar", n, 1).and_then(|_| inputs[0].mul_scalar(c)),
            Primitive::BatchNorm(mode) => {
                arity("batch_norm", n, 3)?;
                inputs[0].batch_norm(inputs[1], inputs[2], &mode).map(|(v, _)| v)
            }
            Primitive::GaussianSample(eps) => {
                arity("gaussian_sample", n, 2)?;
                self.gaussian_sample(inputs[0], inputs[1], eps)
            }
        }
    }

    /// Reparameterized Gaussian draw `mean + std * eps`; `eps` is recorded as a constant
    /// so the node replays bit-identically.
    pub fn gaussian_sample<'g>(
        &'g self,
        mean: Var<'g, T>,
        std: Var<'g, T>,
        eps: Tensor<T>,
    ) -> Result<Var<'g, T>> {
        let (mi, si) = (self.same_graph(mean)?, self.same_graph(std)?);
        let value = {
            let nodes = self.nodes.borrow();
            let (m, s) = (&nodes[mi].value, &nodes[si].value);
            let shape = tensor::broadcast_shape("gaussian_sample", m.shape(), s.shape())?;
            let shape = tensor::broadcast_shape("gaussian_sample", &shape, eps.shape())?;
            if shape != eps.shape() {
                return Err(TensorError::ShapeMismatch {
                    op: "gaussian_sample",
                    lhs: shape,
                    rhs: eps.shape().to_vec(),
                });
            }
            let scaled = tensor::zip_broadcast("gaussian_sample", s, &eps, |a, b| a * b)?;
            tensor::zip_broadcast("gaussian_sample", &scaled, m, |a, b| a + b)?
        };
        let rg = self.requires(mi) || self.requires(si);
        self.push_checked(
            "gaussian_sample",
            Op::Gaussian {
                mean: mi,
                std: si,
                eps,
            },
            value,
            rg,
        )
    }

    fn requires(&self, id: usize) -> bool {
        self.nodes.borrow()[id].requires_grad
    }

    /// Reverse sweep from a scalar root; leaf gradients accumulate across calls.
    pub fn backward(&self, root: Var<'_, T>) -> Result<()> {
        let root = self.same_graph(root)?;
        let mut nodes = self.nodes.borrow_mut();
        let shape = nodes[root].value.shape().to_vec();
        if numel(&shape) != 1 {
            return Err(TensorError::NonScalarRoot { shape });
        }
        if !nodes[root].requires_grad {
            return Ok(());
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..=root).map(|_| None).collect();
        grads[root] = Some(Tensor::ones(&shape));
        let selu_scale = T::lit(SELU_GRAD_SCALE.with(|c| c.get()));

        for id in (0..=root).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &nodes[id];
            if !node.requires_grad {
                continue;
            }
            if matches!(node.op, Op::Leaf) {
                grads[id] = Some(g);
                continue;
            }
            let val = |i: usize| -> &Tensor<T> { nodes[i].value.as_ref() };
            let out = node.value.as_ref();
            let mut emit = |i: usize, t: Tensor<T>| {
                if nodes[i].requires_grad {
                    accumulate(&mut grads[i], t);
                }
            };
            match &node.op {
                Op::Leaf => unreachable!("leaves handled above"),
                Op::MatMul(a, b) => {
                    if nodes[*a].requires_grad {
                        emit(*a, tensor::matmul(&g, false, val(*b), true)?);
                    }
                    if nodes[*b].requires_grad {
                        emit(*b, tensor::matmul(val(*a), true, &g, false)?);
                    }
                }
                Op::Add(a, b) => {
                    let (sa, sb) = (val(*a).shape().to_vec(), val(*b).shape().to_vec());
                    if nodes[*b].requires_grad {
                        emit(*b, tensor::reduce_to_shape(g.clone(), &sb));
                    }
                    emit(*a, tensor::reduce_to_shape(g, &sa));
                }
                Op::Sub(a, b) => {
                    let (sa, sb) = (val(*a).shape().to_vec(), val(*b).shape().to_vec());
                    if nodes[*b].requires_grad {
                        emit(*b, tensor::reduce_to_shape(g.map(|v| -v), &sb));
                    }
                    emit(*a, tensor::reduce_to_shape(g, &sa));
                }
                Op::Mul(a, b) => {
                    let (ta, tb) = (val(*a), val(*b));
                    if nodes[*a].requires_grad {
                        let d = tensor::zip_broadcast("mul", &g, tb, |x, y| x * y)?;
                        emit(*a, tensor::reduce_to_shape(d, ta.shape()));
                    }
                    if nodes[*b].requires_grad {
                        let d = tensor::zip_broadcast("mul", &g, ta, |x, y| x * y)?;
                        emit(*b, tensor::reduce_to_shape(d, tb.shape()));
                    }
                }
                Op::Div(a, b) => {
                    let (ta, tb) = (val(*a), val(*b));
                    if nodes[*a].requires_grad {
                        let d = tensor::zip_broadcast("div", &g, tb, |x, y| x / y)?;
                        emit(*a, tensor::reduce_to_shape(d, ta.shape()));
                    }
                    if nodes[*b].requires_grad {
                        let go = tensor::zip_broadcast("div", &g, out, |x, y| -x * y)?;
                        let d = tensor::zip_broadcast("div", &go, tb, |x, y| x / y)?;
                        emit(*b, tensor::reduce_to_shape(d, tb.shape()));
                    }
                }
                Op::Neg(a) => emit(*a, g.map(|v| -v)),
                Op::Exp(a) => emit(*a, zip(&g, out, |g, y| g * y)),
                Op::Log(a) => emit(*a, zip(&g, val(*a), |g, x| g / x)),
                Op::Sqrt(a) => emit(*a, zip(&g, out, |g, y| g / (y + y))),
                Op::Square(a) => emit(*a, zip(&g, val(*a), |g, x| g * (x + x))),
                Op::Tanh(a) => emit(*a, zip(&g, out, |g, y| g * (T::one() - y * y))),
                Op::Selu(a) => {
                    let alpha = T::lit(SELU_ALPHA);
                    let x = val(*a);
                    let d = Tensor::from_fn(x.shape(), |i| {
                        let xi = x.data()[i];
                        // right-hand derivative at 0
                        let slope = if xi >= T::zero() {
                            selu_scale
                        } else {
                            selu_scale * alpha * xi.exp()
                        };
                        g.data()[i] * slope
                    });
                    emit(*a, d);
                }
                Op::Softplus(a) => emit(*a, zip(&g, val(*a), |g, x| g * sigmoid(x))),
                Op::Sigmoid(a) => emit(*a, zip(&g, out, |g, y| g * y * (T::one() - y))),
                Op::Pointwise(a, slope) => emit(*a, zip(&g, slope, |g, d| g * d)),
                Op::AddScalar(a) => emit(*a, g),
                Op::MulScalar(a, c) => {
                    let c = *c;
                    emit(*a, g.map(|v| v * c))
                }
                Op::SumAll(a) => {
                    let gv = g.data()[0];
                    emit(*a, Tensor::full(val(*a).shape(), gv));
                }
                Op::SumAxis { x, axis, len } => emit(*x, tensor::expand_axis(&g, *axis, *len)),
                Op::MeanAll(a) => {
                    let n = T::lit(val(*a).len() as f64);
                    let gv = g.data()[0] / n;
                    emit(*a, Tensor::full(val(*a).shape(), gv));
                }
                Op::MeanAxis { x, axis, len } => {
                    let n = T::lit(*len as f64);
                    emit(*x, tensor::expand_axis(&g, *axis, *len).map(|v| v / n));
                }
                Op::BroadcastTo(a) => {
                    let shape = val(*a).shape().to_vec();
                    emit(*a, tensor::reduce_to_shape(g, &shape));
                }
                Op::Reshape(a) => {
                    let shape = val(*a).shape().to_vec();
                    emit(*a, g.reshape(&shape)?);
                }
                Op::BatchNorm {
                    x,
                    gamma,
                    beta,
                    x_hat,
                    inv_std,
                    train,
                } => {
                    let cols = inv_std.len();
                    let rows = x_hat.len() / cols.max(1);
                    let gam = val(*gamma).data();
                    let mut d_gamma = vec![T::zero(); cols];
                    let mut d_beta = vec![T::zero(); cols];
                    for (grow, hrow) in g.data().chunks(cols).zip(x_hat.data().chunks(cols)) {
                        for j in 0..cols {
                            d_beta[j] += grow[j];
                            d_gamma[j] += grow[j] * hrow[j];
                        }
                    }
                    if nodes[*x].requires_grad {
                        let mut dx = vec![T::zero(); rows * cols];
                        if *train {
                            let n = T::lit(rows as f64);
                            for (i, (grow, hrow)) in
                                g.data().chunks(cols).zip(x_hat.data().chunks(cols)).enumerate()
                            {
                                for j in 0..cols {
                                    dx[i * cols + j] = gam[j] * inv_std[j] / n
                                        * (n * grow[j] - d_beta[j] - hrow[j] * d_gamma[j]);
                                }
                            }
                        } else {
                            for (i, grow) in g.data().chunks(cols).enumerate() {
                                for j in 0..cols {
                                    dx[i * cols + j] = grow[j] * gam[j] * inv_std[j];
                                }
                            }
                        }
                        emit(*x, Tensor::new(val(*x).shape().to_vec(), dx)?);
                    }
                    let gshape = val(*gamma).shape().to_vec();
                    let bshape = val(*beta).shape().to_vec();
                    emit(*gamma, Tensor::new(gshape, d_gamma)?);
                    emit(*beta, Tensor::new(bshape, d_beta)?);
                }
                Op::Gaussian { mean, std, eps } => {
                    let (ms, ss) = (val(*mean).shape().to_vec(), val(*std).shape().to_vec());
                    if nodes[*std].requires_grad {
                        let d = zip(&g, eps, |g, e| g * e);
                        emit(*std, tensor::reduce_to_shape(d, &ss));
                    }
                    emit(*mean, tensor::reduce_to_shape(g, &ms));
                }
            }
        }

        for (id, g) in grads.into_iter().enumerate() {
            let is_leaf = matches!(nodes[id].op, Op::Leaf);
            if let (Some(g), true) = (g, is_leaf) {
                accumulate(&mut nodes[id].grad, g);
            }
        }
        Ok(())
    }
}

fn accumulate<T: Real>(slot: &mut Option<Tensor<T>>, t: Tensor<T>) {
    match slot {
        Some(acc) => {
            for (a, b) in acc.data_mut().iter_mut().zip(t.data()) {
                *a += *b;
            }
        }
        None => *slot = Some(t),
    }
}

fn zip<T: Real>(a: &Tensor<T>, b: &Tensor<T>, f: impl Fn(T, T) -> T) -> Tensor<T> {
    debug_assert_eq!(a.shape(), b.shape());
    Tensor::from_fn(a.shape(), |i| f(a.data()[i], b.data()[i]))
}

#[inline]
fn sigmoid<T: Real>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

#[inline]
fn softplus<T: Real>(x: T) -> T {
    x.max(T::zero()) + (-x.abs()).exp().ln_1p()
}

#[inline]
fn selu<T: Real>(x: T) -> T {
    let scale = T::lit(SELU_SCALE);
    if x > T::zero() {
        scale * x
    } else {
        scale * T::lit(SELU_ALPHA) * x.exp_m1()
    }
}

impl<'g, T: Real> Var<'g, T> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn graph(&self) -> &'g Graph<T> {
        self.graph
    }

    pub fn value(&self) -> Ref<'g, Tensor<T>> {
        self.graph.value(*self)
    }

    /// Owned copy of the forward value.
    pub fn tensor(&self) -> Tensor<T> {
        self.value().clone()
    }

    pub fn shape(&self) -> Vec<usize> {
        self.value().shape().to_vec()
    }

    /// Scalar value of a single-element node.
    pub fn item(&self) -> T {
        self.value().data()[0]
    }

    pub fn grad(&self) -> Option<Tensor<T>> {
        self.graph.grad(*self)
    }

    pub fn backward(&self) -> Result<()> {
        self.graph.backward(*self)
    }

    fn unary(
        self,
        name: &'static str,
        op: fn(usize) -> Op<T>,
        f: impl Fn(T) -> T,
    ) -> Result<Var<'g, T>> {
        let value = self.value().map(f);
        let rg = self.graph.requires(self.id);
        self.graph.push_checked(name, op(self.id), value, rg)
    }

    fn binary(
        self,
        other: Var<'g, T>,
        name: &'static str,
        op: fn(usize, usize) -> Op<T>,
        f: impl Fn(T, T) -> T,
    ) -> Result<Var<'g, T>> {
        let oid = self.graph.same_graph(other)?;
        let value = {
            let (a, b) = (self.value(), other.value());
            tensor::zip_broadcast(name, &a, &b, f)?
        };
        let rg = self.graph.requires(self.id) || self.graph.requires(oid);
        self.graph.push_checked(name, op(self.id, oid), value, rg)
    }

    fn check_domain(&self, name: &'static str, ok: impl Fn(T) -> bool) -> Result<()> {
        match self.value().data().iter().position(|&v| !ok(v)) {
            Some(index) => Err(TensorError::Domain { op: name, index }),
            None => Ok(()),
        }
    }

    pub fn matmul(self, other: Var<'g, T>) -> Result<Var<'g, T>> {
        let oid = self.graph.same_graph(other)?;
        let value = tensor::matmul(&self.value(), false, &other.value(), false)?;
        let rg = self.graph.requires(self.id) || self.graph.requires(oid);
        self.graph.push_checked("matmul", Op::MatMul(self.id, oid), value, rg)
    }

    pub fn add(self, other: Var<'g, T>) -> Result<Var<'g, T>> {
        self.binary(other, "add", Op::Add, |a, b| a + b)
    }

    pub fn sub(self, other: Var<'g, T>) -> Result<Var<'g, T>> {
        self.binary(other, "sub", Op::Sub, |a, b| a - b)
    }

    pub fn mul(self, other: Var<'g, T>) -> Result<Var<'g, T>> {
        self.binary(other, "mul", Op::Mul, |a, b| a * b)
    }

    pub fn div(self, other: Var<'g, T>) -> Result<Var<'g, T>> {
        other.check_domain("div", |v| v != T::zero())?;
        self.binary(other, "div", Op::Div, |a, b| a / b)
    }

    pub fn neg(self) -> Result<Var<'g, T>> {
        self.unary("neg", Op::Neg, |v| -v)
    }

    pub fn exp(self) -> Result<Var<'g, T>> {
        self.unary("exp", Op::Exp, |v| v.exp())
    }

    pub fn log(self) -> Result<Var<'g, T>> {
        self.check_domain("log", |v| v > T::zero())?;
        self.unary("log", Op::Log, |v| v.ln())
    }

    pub fn sqrt(self) -> Result<Var<'g, T>> {
        self.check_domain("sqrt", |v| v > T::zero())?;
        self.unary("sqrt", Op::Sqrt, |v| v.sqrt())
    }

    pub fn square(self) -> Result<Var<'g, T>> {
        self.unary("square", Op::Square, |v| v * v)
    }

    pub fn tanh(self) -> Result<Var<'g, T>> {
        self.unary("tanh", Op::Tanh, |v| v.tanh())
    }

    pub fn selu(self) -> Result<Var<'g, T>> {
        self.unary("selu", Op::Selu, selu)
    }

    pub fn softplus(self) -> Result<Var<'g, T>> {
        self.unary("softplus", Op::Softplus, softplus)
    }

    pub fn sigmoid(self) -> Result<Var<'g, T>> {
        self.unary("sigmoid", Op::Sigmoid, sigmoid)
    }

    /// Element-wise map computed by the caller: `f` returns the value and
    /// the slope used on the backward pass.
    pub fn pointwise(self, name: &'static str, f: impl Fn(T) -> (T, T)) -> Result<Var<'g, T>> {
        let (value, slope) = {
            let x = self.value();
            let pairs: Vec<(T, T)> = x.data().iter().map(|&v| f(v)).collect();
            (
                Tensor::from_fn(x.shape(), |i| pairs[i].0),
                Tensor::from_fn(x.shape(), |i| pairs[i].1),
            )
        };
        let rg = self.graph.requires(self.id);
        self.graph.push_checked(name, Op::Pointwise(self.id, slope), value, rg)
    }

    pub fn add_scalar(self, c: T) -> Result<Var<'g, T>> {
        self.unary("add_scalar", Op::AddScalar, move |v| v + c)
    }

    pub fn mul_scalar(self, c: T) -> Result<Var<'g, T>> {
        let value = self.value().map(|v| v * c);
        let rg = self.graph.requires(self.id);
        self.graph
            .push_checked("mul_scalar", Op::MulScalar(self.id, c), value, rg)
    }

    /// Sum of all elements (rank-0 result).
    pub fn sum(self) -> Result<Var<'g, T>> {
        let value = Tensor::scalar(self.value().sum());
        let rg = self.graph.requires(self.id);
        self.graph.push_checked("sum", Op::SumAll(self.id), value, rg)
    }

    pub fn mean(self) -> Result<Var<'g, T>> {
        let value = {
            let v = self.value();
            if v.is_empty() {
                return Err(TensorError::Contract("mean of an empty tensor".into()));
            }
            Tensor::scalar(v.sum() / T::lit(v.len() as f64))
        };
        let rg = self.graph.requires(self.id);
        self.graph.push_checked("mean", Op::MeanAll(self.id), value, rg)
    }

    pub fn sum_axis(self, axis: usize) -> Result<Var<'g, T>> {
        let (value, len) = {
            let v = self.value();
            (tensor::sum_axis(&v, axis)?, v.shape()[axis])
        };
        let rg = self.graph.requires(self.id);
        self.graph.push_checked(
            "sum_axis",
            Op::SumAxis {
                x: self.id,
                axis,
                len,
            },
            value,
            rg,
        )
    }

    pub fn mean_axis(self, axis: usize) -> Result<Var<'g, T>> {
        let (value, len) = {
            let v = self.value();
            let s = tensor::sum_axis(&v, axis)?;
            let len = v.shape()[axis];
            let n = T::lit(len as f64);
            (s.map(|x| x / n), len)
        };
        let rg = self.graph.requires(self.id);
        self.graph.push_checked(
            "mean_axis",
            Op::MeanAxis {
                x: self.id,
                axis,
                len,
            },
            value,
            rg,
        )
    }

    pub fn broadcast_to(self, shape: &[usize]) -> Result<Var<'g, T>> {
        let value = tensor::broadcast_to(&self.value(), shape)?;
        let rg = self.graph.requires(self.id);
        self.graph
            .push_checked("broadcast_to", Op::BroadcastTo(self.id), value, rg)
    }

    pub fn reshape(self, shape: &[usize]) -> Result<Var<'g, T>> {
        let value = self.value().clone().reshape(shape)?;
        let rg = self.graph.requires(self.id);
        self.graph.push_checked("reshape", Op::Reshape(self.id), value, rg)
    }

    /// Batch normalization over axis 0 of a `batch x features` input.
    ///
    /// Returns the normalized output and, in training mode, the batch statistics
    /// for the caller's running-average update.
    pub fn batch_norm(
        self,
        gamma: Var<'g, T>,
        beta: Var<'g, T>,
        mode: &BatchNormMode<T>,
    ) -> Result<(Var<'g, T>, Option<BatchStats<T>>)> {
        let gid = self.graph.same_graph(gamma)?;
        let bid = self.graph.same_graph(beta)?;
        let (value, x_hat, inv_std, stats, train) = {
            let x = self.value();
            let (g, b) = (gamma.value(), beta.value());
            if x.rank() != 2 {
                return Err(TensorError::ShapeMismatch {
                    op: "batch_norm",
                    lhs: x.shape().to_vec(),
                    rhs: g.shape().to_vec(),
                });
            }
            let (rows, cols) = (x.shape()[0], x.shape()[1]);
            if g.len() != cols || b.len() != cols || rows == 0 {
                return Err(TensorError::ShapeMismatch {
                    op: "batch_norm",
                    lhs: x.shape().to_vec(),
                    rhs: g.shape().to_vec(),
                });
            }
            let (mean, var_b, eps, train, stats) = match mode {
                BatchNormMode::Train { eps } => {
                    let n = T::lit(rows as f64);
                    let mut mean = vec![T::zero(); cols];
                    for r in x.data().chunks(cols) {
                        for j in 0..cols {
                            mean[j] += r[j];
                        }
                    }
                    mean.iter_mut().for_each(|m| *m /= n);
                    let mut var = vec![T::zero(); cols];
                    for r in x.data().chunks(cols) {
                        for j in 0..cols {
                            let d = r[j] - mean[j];
                            var[j] += d * d;
                        }
                    }
                    let unbiased: Vec<T> = if rows > 1 {
                        var.iter().map(|&v| v / (n - T::one())).collect()
                    } else {
                        var.clone()
                    };
                    var.iter_mut().for_each(|v| *v /= n);
                    let stats = BatchStats {
                        mean: Tensor::vector(mean.clone()),
                        var: Tensor::vector(unbiased),
                    };
                    (mean, var, *eps, true, Some(stats))
                }
                BatchNormMode::Eval {
                    running_mean,
                    running_var,
                    eps,
                } => {
                    if running_mean.len() != cols || running_var.len() != cols {
                        return Err(TensorError::ShapeMismatch {
                            op: "batch_norm",
                            lhs: x.shape().to_vec(),
                            rhs: running_mean.shape().to_vec(),
                        });
                    }
                    (
                        running_mean.data().to_vec(),
                        running_var.data().to_vec(),
                        *eps,
                        false,
                        None,
                    )
                }
            };
            let inv_std: Vec<T> = var_b.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
            let mut x_hat = Vec::with_capacity(rows * cols);
            let mut out = Vec::with_capacity(rows * cols);
            for r in x.data().chunks(cols) {
                for j in 0..cols {
                    let h = (r[j] - mean[j]) * inv_std[j];
                    x_hat.push(h);
                    out.push(g.data()[j] * h + b.data()[j]);
                }
            }
            let shape = x.shape().to_vec();
            (
                Tensor::new(shape.clone(), out)?,
                Tensor::new(shape, x_hat)?,
                inv_std,
                stats,
                train,
            )
        };
        let rg = self.graph.requires(self.id) || self.graph.requires(gid) || self.graph.requires(bid);
        let v = self.graph.push_checked(
            "batch_norm",
            Op::BatchNorm {
                x: self.id,
                gamma: gid,
                beta: bid,
                x_hat,
                inv_std,
                train,
            },
            value,
            rg,
        )?;
        Ok((v, stats))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    type G = Graph<f64>;

    fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn sum_grad_is_ones() {
        let g = G::new();
        let x = g.variable(t(&[2, 3], &[1.0, -2.0, 3.0, 0.5, 0.0, 9.0]));
        let s = x.sum().unwrap();
        s.backward().unwrap();
        assert_eq!(x.grad().unwrap().data(), &[1.0; 6]);
    }

    #[test]
    fn mean_square_grad() {
        let g = G::new();
        let x = g.variable(Tensor::vector(vec![1.0, 2.0, 3.0]));
        let l = x.square().unwrap().mean().unwrap();
        l.backward().unwrap();
        let gr = x.grad().unwrap();
        let expect = [2.0 / 3.0, 4.0 / 3.0, 2.0];
        for (a, b) in gr.data().iter().zip(expect) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn repeated_backward_accumulates() {
        let g = G::new();
        let x = g.variable(Tensor::vector(vec![1.0, 2.0]));
        let l = x.square().unwrap().sum().unwrap();
        l.backward().unwrap();
        l.backward().unwrap();
        assert_eq!(x.grad().unwrap().data(), &[4.0, 8.0]);
        g.zero_grad();
        l.backward().unwrap();
        assert_eq!(x.grad().unwrap().data(), &[2.0, 4.0]);
    }

    #[test]
    fn non_scalar_root_rejected() {
        let g = G::new();
        let x = g.variable(Tensor::vector(vec![1.0, 2.0]));
        let y = x.exp().unwrap();
        assert!(matches!(y.backward(), Err(TensorError::NonScalarRoot { .. })));
    }

    #[test]
    fn selu_fixes_origin_and_takes_right_slope() {
        let g = G::new();
        let x = g.variable(Tensor::scalar(0.0));
        let y = x.selu().unwrap();
        assert_eq!(y.item(), 0.0);
        y.backward().unwrap();
        assert_eq!(x.grad().unwrap().data()[0], SELU_SCALE);
    }

    #[test]
    fn log_of_nonpositive_names_index() {
        let g = G::new();
        let x = g.constant(Tensor::vector(vec![1.0, 2.0, -1.0, 0.0]));
        assert_eq!(x.log().unwrap_err(), TensorError::Domain { op: "log", index: 2 });
        assert_eq!(x.sqrt().unwrap_err(), TensorError::Domain { op: "sqrt", index: 2 });
    }

    #[test]
    fn exp_overflow_reports_non_finite() {
        let g = G::new();
        let x = g.constant(Tensor::vector(vec![1.0, 1000.0]));
        assert_eq!(x.exp().unwrap_err(), TensorError::NonFinite { op: "exp", index: 1 });
    }

    #[test]
    fn matmul_shape_error_names_op() {
        let g = G::new();
        let a = g.constant(Tensor::zeros(&[2, 3]));
        let b = g.constant(Tensor::zeros(&[2, 3]));
        assert_eq!(
            a.matmul(b).unwrap_err(),
            TensorError::ShapeMismatch {
                op: "matmul",
                lhs: vec![2, 3],
                rhs: vec![2, 3]
            }
        );
    }

    #[test]
    fn gaussian_node_replays_bit_identically() {
        let eps = Tensor::vector(vec![0.3, -1.2, 2.0]);
        let run = || {
            let g = G::new();
            let m = g.variable(Tensor::vector(vec![1.0, 2.0, 3.0]));
            let s = g.variable(Tensor::vector(vec![0.5, 0.1, 2.0]));
            g.gaussian_sample(m, s, eps.clone()).unwrap().tensor()
        };
        let (a, b) = (run(), run());
        assert_eq!(a.data(), b.data());
        assert_eq!(a.data(), &[1.15, 2.0 - 0.12000000000000001, 7.0]);
    }

    #[test]
    fn cross_graph_ops_rejected() {
        let (g1, g2) = (G::new(), G::new());
        let a = g1.scalar(1.0);
        let b = g2.scalar(2.0);
        assert_eq!(a.add(b).unwrap_err(), TensorError::GraphMismatch);
    }

    #[test]
    fn param_grads_follow_registration_order() {
        let g = G::new();
        let p1 = Arc::new(Tensor::vector(vec![1.0, 2.0]));
        let p2 = Arc::new(Tensor::scalar(3.0));
        let unused = Arc::new(Tensor::vector(vec![5.0]));
        let a = g.param(&p1);
        let b = g.param(&p2);
        let _ = g.param(&unused);
        let l = a.mul(b).unwrap().sum().unwrap();
        l.backward().unwrap();
        let grads = g.param_grads();
        assert_eq!(grads[0].data(), &[3.0, 3.0]);
        assert_eq!(grads[1].data(), &[3.0]);
        assert_eq!(grads[2].data(), &[0.0]);
    }

    #[test]
    fn apply_checks_arity() {
        let g = G::new();
        let a = g.scalar(1.0);
        assert!(matches!(
            g.apply(Primitive::Add, &[a]),
            Err(TensorError::Arity { op: "add", .. })
        ));
        let s = g.apply(Primitive::Exp, &[a]).unwrap();
        assert!((s.item() - std::f64::consts::E).abs() < 1e-15);
    }
}
