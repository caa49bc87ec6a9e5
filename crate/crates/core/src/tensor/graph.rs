//! The autodiff tape: ops evaluate eagerly on insertion, and `backward`
//! walks the tape in reverse to accumulate adjoints.
//!
//! Every op scans its output for NaN/infinity as it is recorded; the first
//! offender poisons the graph and `backward` reports it instead of silently
//! propagating garbage into parameter updates.

use super::kernels as k;
use super::{lit, Scalar, Tensor, TensorError};
use std::cell::RefCell;
use std::rc::Rc;

enum Op<T: Scalar> {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Div(usize, usize),
    Scale(usize, T),
    AddScalar(usize),
    Sqrt(usize),
    Relu(usize),
    Exp(usize),
    Matmul(usize, usize),
    SwapAxes(usize, usize, usize),
    Reshape(usize),
    Sum { input: usize, axes: Vec<usize>, keepdim: bool },
    Softmax { input: usize, axis: usize },
    /// Row gather from a [rows, width] table; the adjoint scatter-adds.
    GatherRows { table: usize, ids: Rc<Vec<usize>> },
    /// Fused weighted-mean cross entropy over [rows, classes] logits.
    CrossEntropy { logits: usize, targets: Rc<Vec<usize>>, weights: Rc<Vec<T>> },
}

impl<T: Scalar> Op<T> {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Div(..) => "div",
            Op::Scale(..) => "scale",
            Op::AddScalar(..) => "add_scalar",
            Op::Sqrt(..) => "sqrt",
            Op::Relu(..) => "relu",
            Op::Exp(..) => "exp",
            Op::Matmul(..) => "matmul",
            Op::SwapAxes(..) => "swap_axes",
            Op::Reshape(..) => "reshape",
            Op::Sum { .. } => "sum",
            Op::Softmax { .. } => "softmax",
            Op::GatherRows { .. } => "gather_rows",
            Op::CrossEntropy { .. } => "cross_entropy",
        }
    }
}

struct Node<T: Scalar> {
    op: Op<T>,
    value: Tensor<T>,
    grad: Option<Tensor<T>>,
    needs_grad: bool,
}

struct GraphInner<T: Scalar> {
    nodes: Vec<Node<T>>,
    poisoned: Option<(usize, &'static str)>,
    backward_done: bool,
}

/// A computation tape. Create one per forward pass; ops append nodes, and
/// [`Graph::backward`] fills in gradients for every node that needs them.
pub struct Graph<T: Scalar> {
    inner: RefCell<GraphInner<T>>,
}

/// A lightweight handle to one node of a [`Graph`]. `Copy`, so expressions
/// read like arithmetic: `(x - mean) / std * gamma + beta`.
pub struct Var<'g, T: Scalar> {
    graph: &'g Graph<T>,
    id: usize,
}

impl<T: Scalar> Clone for Var<'_, T> {
    fn clone(&self) -> Self {
        *self
    }
}
impl<T: Scalar> Copy for Var<'_, T> {}

impl<T: Scalar> std::fmt::Debug for Var<'_, T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var(#{}, shape {:?})", self.id, self.shape())
    }
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Graph {
            inner: RefCell::new(GraphInner {
                nodes: Vec::new(),
                poisoned: None,
                backward_done: false,
            }),
        }
    }

    /// Inserts a leaf; it participates in gradients iff the tensor has
    /// `requires_grad` set.
    pub fn leaf(&self, t: Tensor<T>) -> Var<'_, T> {
        let needs = t.requires_grad();
        self.push(Op::Leaf, t, needs)
    }

    /// Inserts a non-differentiable leaf (masks, frozen statistics, ...).
    pub fn constant(&self, mut t: Tensor<T>) -> Var<'_, T> {
        t.set_requires_grad(false);
        self.push(Op::Leaf, t, false)
    }

    /// A rank-0 constant.
    pub fn scalar(&self, x: T) -> Var<'_, T> {
        self.constant(Tensor::scalar(x))
    }

    pub fn node_count(&self) -> usize {
        self.inner.borrow().nodes.len()
    }

    /// The first non-finite op recorded, if any.
    pub fn error(&self) -> Option<TensorError> {
        self.inner
            .borrow()
            .poisoned
            .map(|(node, op)| TensorError::NonFinite { op, node })
    }

    fn push(&self, op: Op<T>, value: Tensor<T>, needs_grad: bool) -> Var<'_, T> {
        let mut inner = self.inner.borrow_mut();
        let id = inner.nodes.len();
        if inner.poisoned.is_none() && !value.all_finite() {
            inner.poisoned = Some((id, op.name()));
        }
        inner.nodes.push(Node { op, value, grad: None, needs_grad });
        Var { graph: self, id }
    }

    fn needs(&self, id: usize) -> bool {
        self.inner.borrow().nodes[id].needs_grad
    }

    fn value_clone(&self, id: usize) -> Tensor<T> {
        self.inner.borrow().nodes[id].value.clone()
    }

    /// Gradient of the last `backward` with respect to a node, if one was
    /// accumulated there.
    pub fn grad(&self, v: Var<'_, T>) -> Option<Tensor<T>> {
        self.grad_by_id(v.id)
    }

    pub(crate) fn grad_by_id(&self, id: usize) -> Option<Tensor<T>> {
        self.inner.borrow().nodes[id].grad.clone()
    }

    pub(crate) fn var_from_id(&self, id: usize) -> Var<'_, T> {
        debug_assert!(id < self.node_count());
        Var { graph: self, id }
    }

    /// Reverse pass from a scalar loss. Fails if the graph saw a non-finite
    /// value, the target is not scalar, or backward already ran.
    pub fn backward(&self, loss: Var<'_, T>) -> Result<(), TensorError> {
        let mut inner = self.inner.borrow_mut();
        if let Some((node, op)) = inner.poisoned {
            return Err(TensorError::NonFinite { op, node });
        }
        if inner.backward_done {
            return Err(TensorError::BackwardTwice);
        }
        if inner.nodes[loss.id].value.numel() != 1 {
            return Err(TensorError::NotScalar(format!(
                "{:?}",
                inner.nodes[loss.id].value.shape()
            )));
        }
        inner.backward_done = true;
        let seed_shape = inner.nodes[loss.id].value.shape().to_vec();
        inner.nodes[loss.id].grad = Some(Tensor::ones(seed_shape));

        for id in (0..=loss.id).rev() {
            let (before, rest) = inner.nodes.split_at_mut(id);
            let node = &mut rest[0];
            if !node.needs_grad || node.grad.is_none() {
                continue;
            }
            let g = node.grad.as_ref().unwrap();
            match &node.op {
                Op::Leaf => {}
                Op::Add(a, b) => {
                    accum_reduced(before, *a, g, T::one());
                    accum_reduced(before, *b, g, T::one());
                }
                Op::Sub(a, b) => {
                    accum_reduced(before, *a, g, T::one());
                    accum_reduced(before, *b, g, -T::one());
                }
                Op::Mul(a, b) => {
                    if before[*a].needs_grad {
                        let ca = k::zip_broadcast(g, &before[*b].value, |gv, bv| gv * bv);
                        accum_reduced(before, *a, &ca, T::one());
                    }
                    if before[*b].needs_grad {
                        let cb = k::zip_broadcast(g, &before[*a].value, |gv, av| gv * av);
                        accum_reduced(before, *b, &cb, T::one());
                    }
                }
                Op::Div(a, b) => {
                    // y = a / b: da = g / b, db = -g * y / b.
                    if before[*a].needs_grad {
                        let ca = k::zip_broadcast(g, &before[*b].value, |gv, bv| gv / bv);
                        accum_reduced(before, *a, &ca, T::one());
                    }
                    if before[*b].needs_grad {
                        let gy = k::zip_broadcast(g, &node.value, |gv, yv| gv * yv);
                        let cb = k::zip_broadcast(&gy, &before[*b].value, |t, bv| t / bv);
                        accum_reduced(before, *b, &cb, -T::one());
                    }
                }
                Op::Scale(a, s) => {
                    accum_reduced(before, *a, g, *s);
                }
                Op::AddScalar(a) => {
                    accum_reduced(before, *a, g, T::one());
                }
                Op::Sqrt(a) => {
                    // d sqrt(x) = g / (2 sqrt(x)).
                    let half = lit::<T>(0.5);
                    let c = k::zip_broadcast(g, &node.value, |gv, yv| gv * half / yv);
                    accum_reduced(before, *a, &c, T::one());
                }
                Op::Relu(a) => {
                    let c = k::zip_broadcast(g, &before[*a].value, |gv, xv| {
                        if xv > T::zero() {
                            gv
                        } else {
                            T::zero()
                        }
                    });
                    accum_reduced(before, *a, &c, T::one());
                }
                Op::Exp(a) => {
                    let c = k::zip_broadcast(g, &node.value, |gv, yv| gv * yv);
                    accum_reduced(before, *a, &c, T::one());
                }
                Op::Matmul(a, b) => {
                    matmul_backward(before, *a, *b, g);
                }
                Op::SwapAxes(a, x, y) => {
                    let c = k::swap_axes_copy(g, *x, *y);
                    accum_reduced(before, *a, &c, T::one());
                }
                Op::Reshape(a) => {
                    let target = before[*a].value.shape().to_vec();
                    let c = g.reshaped(target);
                    accum_reduced(before, *a, &c, T::one());
                }
                Op::Sum { input, axes, keepdim } => {
                    if before[*input].needs_grad {
                        let gk = if *keepdim {
                            g.clone()
                        } else {
                            let mut keep = before[*input].value.shape().to_vec();
                            for &ax in axes {
                                keep[ax] = 1;
                            }
                            g.reshaped(keep)
                        };
                        let dst = ensure_grad(&mut before[*input]);
                        k::add_broadcast(&gk, dst);
                    }
                }
                Op::Softmax { input, axis } => {
                    if before[*input].needs_grad {
                        let c = k::softmax_backward_lanes(&node.value, g, *axis);
                        accum_reduced(before, *input, &c, T::one());
                    }
                }
                Op::GatherRows { table, ids } => {
                    if before[*table].needs_grad {
                        let width = before[*table].value.shape()[1];
                        let dst = ensure_grad(&mut before[*table]);
                        let dd = dst.data_mut();
                        for (pos, &row) in ids.iter().enumerate() {
                            let gslice = &g.data()[pos * width..(pos + 1) * width];
                            let drow = &mut dd[row * width..(row + 1) * width];
                            for (dv, &gv) in drow.iter_mut().zip(gslice) {
                                *dv += gv;
                            }
                        }
                    }
                }
                Op::CrossEntropy { logits, targets, weights } => {
                    if before[*logits].needs_grad {
                        let gs = g.item();
                        let probs = k::softmax_lanes(&before[*logits].value, 1);
                        let classes = before[*logits].value.shape()[1];
                        let wsum: T = weights.iter().copied().sum();
                        let dst = ensure_grad(&mut before[*logits]);
                        let dd = dst.data_mut();
                        for (row, (&t, &w)) in targets.iter().zip(weights.iter()).enumerate() {
                            if w == T::zero() {
                                continue;
                            }
                            let scale = gs * w / wsum;
                            let prow = &probs.data()[row * classes..(row + 1) * classes];
                            let drow = &mut dd[row * classes..(row + 1) * classes];
                            for (c, (dv, &pv)) in drow.iter_mut().zip(prow).enumerate() {
                                let ind = if c == t { T::one() } else { T::zero() };
                                *dv += scale * (pv - ind);
                            }
                        }
                    }
                }
            }
        }
        Ok(())
    }
}

fn ensure_grad<T: Scalar>(node: &mut Node<T>) -> &mut Tensor<T> {
    if node.grad.is_none() {
        node.grad = Some(Tensor::zeros(node.value.shape().to_vec()));
    }
    node.grad.as_mut().unwrap()
}

/// Accumulates `sign * contribution` into `nodes[idx]`'s gradient, reducing
/// over broadcast axes as needed.
fn accum_reduced<T: Scalar>(nodes: &mut [Node<T>], idx: usize, contribution: &Tensor<T>, sign: T) {
    if !nodes[idx].needs_grad {
        return;
    }
    let dst = ensure_grad(&mut nodes[idx]);
    k::add_reduced(contribution, sign, dst);
}

fn matmul_backward<T: Scalar>(nodes: &mut [Node<T>], a: usize, b: usize, g: &Tensor<T>) {
    let ash = nodes[a].value.shape().to_vec();
    let bsh = nodes[b].value.shape().to_vec();
    let (m, kk) = (ash[ash.len() - 2], ash[ash.len() - 1]);
    let n = bsh[bsh.len() - 1];
    let alead: usize = ash[..ash.len() - 2].iter().product();
    let blead: usize = bsh[..bsh.len() - 2].iter().product();
    let batch = alead.max(blead);
    let (sa, sb, so) = (m * kk, kk * n, m * n);

    if nodes[a].needs_grad {
        // da = g @ b^T, accumulated over batch when a is unbatched.
        let bval = nodes[b].value.clone();
        let dst = ensure_grad(&mut nodes[a]);
        for s in 0..batch {
            let gslice = &g.data()[s * so..(s + 1) * so];
            let bslice = if bsh.len() == 2 { bval.data() } else { &bval.data()[s * sb..(s + 1) * sb] };
            let drange = if ash.len() == 2 { 0..sa } else { s * sa..(s + 1) * sa };
            k::gemm_nt(gslice, bslice, &mut dst.data_mut()[drange], m, n, kk);
        }
    }
    if nodes[b].needs_grad {
        // db = a^T @ g, accumulated over batch when b is unbatched.
        let aval = nodes[a].value.clone();
        let dst = ensure_grad(&mut nodes[b]);
        for s in 0..batch {
            let gslice = &g.data()[s * so..(s + 1) * so];
            let aslice = if ash.len() == 2 { aval.data() } else { &aval.data()[s * sa..(s + 1) * sa] };
            let drange = if bsh.len() == 2 { 0..sb } else { s * sb..(s + 1) * sb };
            k::gemm_tn(aslice, gslice, &mut dst.data_mut()[drange], kk, m, n);
        }
    }
}

impl<'g, T: Scalar> Var<'g, T> {
    pub fn id(self) -> usize {
        self.id
    }

    /// The graph this handle belongs to.
    pub fn graph(self) -> &'g Graph<T> {
        self.graph
    }

    pub fn value(self) -> Tensor<T> {
        self.graph.value_clone(self.id)
    }

    pub fn shape(self) -> Vec<usize> {
        self.graph.inner.borrow().nodes[self.id].value.shape().to_vec()
    }

    /// Value of a one-element node.
    pub fn item(self) -> T {
        self.graph.inner.borrow().nodes[self.id].value.item()
    }

    fn binary(self, other: Var<'g, T>, make: impl FnOnce(usize, usize) -> Op<T>, f: impl Fn(T, T) -> T) -> Var<'g, T> {
        assert!(std::ptr::eq(self.graph, other.graph), "vars belong to different graphs");
        let value = {
            let inner = self.graph.inner.borrow();
            k::zip_broadcast(&inner.nodes[self.id].value, &inner.nodes[other.id].value, f)
        };
        let needs = self.graph.needs(self.id) || self.graph.needs(other.id);
        self.graph.push(make(self.id, other.id), value, needs)
    }

    fn unary(self, op: Op<T>, value: Tensor<T>) -> Var<'g, T> {
        let needs = self.graph.needs(self.id);
        self.graph.push(op, value, needs)
    }

    pub fn sqrt(self) -> Var<'g, T> {
        let value = self.graph.inner.borrow().nodes[self.id].value.map(|v| v.sqrt());
        self.unary(Op::Sqrt(self.id), value)
    }

    pub fn relu(self) -> Var<'g, T> {
        let value = self.graph.inner.borrow().nodes[self.id]
            .value
            .map(|v| if v > T::zero() { v } else { T::zero() });
        self.unary(Op::Relu(self.id), value)
    }

    pub fn exp(self) -> Var<'g, T> {
        let value = self.graph.inner.borrow().nodes[self.id].value.map(|v| v.exp());
        self.unary(Op::Exp(self.id), value)
    }

    pub fn scale(self, s: T) -> Var<'g, T> {
        let value = self.graph.inner.borrow().nodes[self.id].value.map(|v| v * s);
        self.unary(Op::Scale(self.id, s), value)
    }

    pub fn add_scalar(self, s: T) -> Var<'g, T> {
        let value = self.graph.inner.borrow().nodes[self.id].value.map(|v| v + s);
        self.unary(Op::AddScalar(self.id), value)
    }

    pub fn square(self) -> Var<'g, T> {
        self * self
    }

    pub fn matmul(self, other: Var<'g, T>) -> Var<'g, T> {
        assert!(std::ptr::eq(self.graph, other.graph), "vars belong to different graphs");
        let value = {
            let inner = self.graph.inner.borrow();
            k::matmul(&inner.nodes[self.id].value, &inner.nodes[other.id].value)
        };
        let needs = self.graph.needs(self.id) || self.graph.needs(other.id);
        self.graph.push(Op::Matmul(self.id, other.id), value, needs)
    }

    pub fn swap_axes(self, a: usize, b: usize) -> Var<'g, T> {
        let value = {
            let inner = self.graph.inner.borrow();
            k::swap_axes_copy(&inner.nodes[self.id].value, a, b)
        };
        self.unary(Op::SwapAxes(self.id, a, b), value)
    }

    /// Swaps the last two axes (matrix transpose across the batch).
    pub fn transpose_last(self) -> Var<'g, T> {
        let r = self.shape().len();
        assert!(r >= 2, "transpose_last on rank-{r} tensor");
        self.swap_axes(r - 2, r - 1)
    }

    pub fn reshape(self, shape: &[usize]) -> Var<'g, T> {
        let value = self.graph.inner.borrow().nodes[self.id].value.reshaped(shape.to_vec());
        self.unary(Op::Reshape(self.id), value)
    }

    /// Sum over `axes`; with `keepdim` the reduced axes stay as extent 1.
    pub fn sum(self, axes: &[usize], keepdim: bool) -> Var<'g, T> {
        assert!(!axes.is_empty(), "sum: empty axis list");
        let value = {
            let inner = self.graph.inner.borrow();
            let kept = k::sum_axes_keepdim(&inner.nodes[self.id].value, axes);
            if keepdim {
                kept
            } else {
                let squeezed: Vec<usize> = kept
                    .shape()
                    .iter()
                    .enumerate()
                    .filter(|(i, _)| !axes.contains(i))
                    .map(|(_, &e)| e)
                    .collect();
                kept.reshaped(squeezed)
            }
        };
        self.unary(Op::Sum { input: self.id, axes: axes.to_vec(), keepdim }, value)
    }

    /// Full reduction to a rank-0 scalar.
    pub fn sum_all(self) -> Var<'g, T> {
        let rank = self.shape().len();
        if rank == 0 {
            return self.reshape(&[]);
        }
        let axes: Vec<usize> = (0..rank).collect();
        self.sum(&axes, false)
    }

    /// Mean and biased variance over `axes` (population convention, 1/m).
    /// Panics on an empty axis list.
    pub fn moments(self, axes: &[usize], keepdim: bool) -> (Var<'g, T>, Var<'g, T>) {
        assert!(!axes.is_empty(), "moments: empty reduction");
        let shape = self.shape();
        let m: usize = axes.iter().map(|&ax| shape[ax]).product();
        assert!(m > 0, "moments over zero elements");
        let inv = T::one() / lit::<T>(m as f64);
        let mean_k = self.sum(axes, true).scale(inv);
        let diff = self - mean_k;
        let var_k = (diff * diff).sum(axes, true).scale(inv);
        if keepdim {
            (mean_k, var_k)
        } else {
            let squeezed: Vec<usize> = shape
                .iter()
                .enumerate()
                .filter(|(i, _)| !axes.contains(i))
                .map(|(_, &e)| e)
                .collect();
            (mean_k.reshape(&squeezed), var_k.reshape(&squeezed))
        }
    }

    pub fn softmax(self, axis: usize) -> Var<'g, T> {
        let value = {
            let inner = self.graph.inner.borrow();
            k::softmax_lanes(&inner.nodes[self.id].value, axis)
        };
        self.unary(Op::Softmax { input: self.id, axis }, value)
    }

    /// Gathers rows of a `[rows, width]` table; result is `prefix ++ [width]`.
    pub fn gather_rows(self, ids: &[usize], prefix: &[usize]) -> Var<'g, T> {
        let (rows, width) = {
            let sh = self.shape();
            assert_eq!(sh.len(), 2, "gather_rows table must be rank 2, got {sh:?}");
            (sh[0], sh[1])
        };
        let count: usize = prefix.iter().product();
        assert_eq!(count, ids.len(), "gather_rows: {} ids for prefix {prefix:?}", ids.len());
        let value = {
            let inner = self.graph.inner.borrow();
            let table = &inner.nodes[self.id].value;
            let mut data = Vec::with_capacity(ids.len() * width);
            for &row in ids {
                assert!(row < rows, "gather_rows: id {row} out of range ({rows} rows)");
                data.extend_from_slice(&table.data()[row * width..(row + 1) * width]);
            }
            let mut shape = prefix.to_vec();
            shape.push(width);
            Tensor::new(shape, data)
        };
        self.unary(Op::GatherRows { table: self.id, ids: Rc::new(ids.to_vec()) }, value)
    }

    /// Weighted mean cross entropy: `logits` is `[rows, classes]`; rows with
    /// zero weight are ignored. Stable log-sum-exp evaluation.
    pub fn cross_entropy(self, targets: &[usize], weights: &[T]) -> Var<'g, T> {
        let (rows, classes) = {
            let sh = self.shape();
            assert_eq!(sh.len(), 2, "cross_entropy logits must be rank 2, got {sh:?}");
            (sh[0], sh[1])
        };
        assert_eq!(targets.len(), rows, "cross_entropy: {} targets for {rows} rows", targets.len());
        assert_eq!(weights.len(), rows, "cross_entropy: {} weights for {rows} rows", weights.len());
        let value = {
            let inner = self.graph.inner.borrow();
            let ld = inner.nodes[self.id].value.data();
            let mut wsum = T::zero();
            let mut acc = T::zero();
            for (row, (&t, &w)) in targets.iter().zip(weights).enumerate() {
                wsum += w;
                if w == T::zero() {
                    continue;
                }
                assert!(t < classes, "cross_entropy: target {t} out of range ({classes} classes)");
                let lrow = &ld[row * classes..(row + 1) * classes];
                let mx = lrow.iter().copied().fold(T::neg_infinity(), T::max);
                let lse = lrow.iter().map(|&v| (v - mx).exp()).sum::<T>().ln() + mx;
                acc += w * (lse - lrow[t]);
            }
            assert!(wsum > T::zero(), "cross_entropy: all weights are zero");
            Tensor::scalar(acc / wsum)
        };
        self.unary(
            Op::CrossEntropy {
                logits: self.id,
                targets: Rc::new(targets.to_vec()),
                weights: Rc::new(weights.to_vec()),
            },
            value,
        )
    }
}

impl<'g, T: Scalar> std::ops::Add for Var<'g, T> {
    type Output = Var<'g, T>;
    fn add(self, o: Var<'g, T>) -> Var<'g, T> {
        self.binary(o, Op::Add, |x, y| x + y)
    }
}

impl<'g, T: Scalar> std::ops::Sub for Var<'g, T> {
    type Output = Var<'g, T>;
    fn sub(self, o: Var<'g, T>) -> Var<'g, T> {
        self.binary(o, Op::Sub, |x, y| x - y)
    }
}

impl<'g, T: Scalar> std::ops::Mul for Var<'g, T> {
    type Output = Var<'g, T>;
    fn mul(self, o: Var<'g, T>) -> Var<'g, T> {
        self.binary(o, Op::Mul, |x, y| x * y)
    }
}

impl<'g, T: Scalar> std::ops::Div for Var<'g, T> {
    type Output = Var<'g, T>;
    fn div(self, o: Var<'g, T>) -> Var<'g, T> {
        self.binary(o, Op::Div, |x, y| x / y)
    }
}

impl<'g, T: Scalar> std::ops::Neg for Var<'g, T> {
    type Output = Var<'g, T>;
    fn neg(self) -> Var<'g, T> {
        self.scale(-T::one())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t64(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::new(shape.to_vec(), data.to_vec())
    }

    #[test]
    fn matmul_known_product() {
        let g = Graph::new();
        let a = g.leaf(t64(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let b = g.leaf(t64(&[2, 2], &[5.0, 6.0, 7.0, 8.0]));
        let c = a.matmul(b);
        assert_eq!(c.value().data(), &[19.0, 22.0, 43.0, 50.0]);
    }

    #[test]
    fn matmul_identity_is_noop() {
        let g = Graph::new();
        let a = g.leaf(t64(&[2, 2], &[1.5, -2.0, 0.25, 4.0]));
        let eye = g.leaf(t64(&[2, 2], &[1.0, 0.0, 0.0, 1.0]));
        assert_eq!(a.matmul(eye).value().data(), a.value().data());
    }

    #[test]
    fn matmul_backward_pattern() {
        // loss = sum(A @ B) => dA[i,p] = sum_j B[p,j].
        let g = Graph::new();
        let a = g.leaf(t64(&[2, 3], &[0.0; 6]).with_grad());
        let b = g.leaf(t64(&[3, 2], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]));
        let loss = a.matmul(b).sum_all();
        g.backward(loss).unwrap();
        let da = g.grad(a).unwrap();
        assert_eq!(da.data(), &[3.0, 7.0, 11.0, 3.0, 7.0, 11.0]);
    }

    #[test]
    fn moments_match_hand_values() {
        let g = Graph::new();
        let x = g.leaf(t64(&[2], &[1.0, 3.0]));
        let (m, v) = x.moments(&[0], false);
        assert_eq!(m.value().data(), &[2.0]);
        assert_eq!(v.value().data(), &[1.0]);
    }

    #[test]
    fn moments_of_constant_input() {
        let g = Graph::new();
        let x = g.leaf(Tensor::full([4, 3], 2.5f64));
        let (m, v) = x.moments(&[0, 1], false);
        assert!((m.value().item() - 2.5).abs() < 1e-15);
        assert_eq!(v.value().item(), 0.0);
    }

    #[test]
    fn mean_gradient_is_uniform() {
        let g = Graph::new();
        let x = g.leaf(t64(&[4], &[1.0, 2.0, 3.0, 4.0]).with_grad());
        let (m, _) = x.moments(&[0], false);
        g.backward(m.sum_all()).unwrap();
        let dx = g.grad(x).unwrap();
        for &v in dx.data() {
            assert!((v - 0.25).abs() < 1e-15, "mean grad should be 1/m, got {v}");
        }
    }

    #[test]
    fn sum_backward_is_ones() {
        let g = Graph::new();
        let x = g.leaf(t64(&[2, 3], &[0.5; 6]).with_grad());
        g.backward(x.sum_all()).unwrap();
        assert_eq!(g.grad(x).unwrap().data(), &[1.0; 6]);
    }

    #[test]
    fn square_sum_backward() {
        let g = Graph::new();
        let x = g.leaf(t64(&[1], &[3.0]).with_grad());
        g.backward((x * x).sum_all()).unwrap();
        assert_eq!(g.grad(x).unwrap().data(), &[6.0]);
    }

    #[test]
    fn softmax_shift_invariance() {
        let g = Graph::new();
        let x = g.leaf(t64(&[1, 4], &[0.1, -2.0, 3.0, 0.7]));
        let y = x.softmax(1).value();
        let xs = g.leaf(t64(&[1, 4], &[100.1, 98.0, 103.0, 100.7]));
        let ys = xs.softmax(1).value();
        for (a, b) in y.data().iter().zip(ys.data()) {
            assert!((a - b).abs() < 1e-12, "softmax must be shift invariant");
        }
        let total: f64 = y.data().iter().sum();
        assert!((total - 1.0).abs() < 1e-12);
    }

    #[test]
    fn non_finite_forward_poisons_backward() {
        let g = Graph::new();
        let x = g.leaf(t64(&[1], &[-1.0]).with_grad());
        let y = x.sqrt(); // NaN
        let loss = y.sum_all();
        let err = g.backward(loss).unwrap_err();
        match err {
            TensorError::NonFinite { op, .. } => assert_eq!(op, "sqrt"),
            other => panic!("expected NonFinite, got {other:?}"),
        }
    }

    #[test]
    fn backward_twice_is_an_error() {
        let g = Graph::new();
        let x = g.leaf(t64(&[1], &[2.0]).with_grad());
        let loss = (x * x).sum_all();
        g.backward(loss).unwrap();
        assert_eq!(g.backward(loss).unwrap_err(), TensorError::BackwardTwice);
    }

    #[test]
    fn backward_needs_scalar() {
        let g = Graph::new();
        let x = g.leaf(t64(&[2], &[1.0, 2.0]).with_grad());
        let y = x * x;
        assert!(matches!(g.backward(y).unwrap_err(), TensorError::NotScalar(_)));
    }

    #[test]
    fn constants_collect_no_gradient() {
        let g = Graph::new();
        let x = g.leaf(t64(&[2], &[1.0, 2.0]).with_grad());
        let c = g.constant(t64(&[2], &[3.0, 4.0]));
        let loss = (x * c).sum_all();
        g.backward(loss).unwrap();
        assert_eq!(g.grad(x).unwrap().data(), &[3.0, 4.0]);
        assert!(g.grad(c).is_none(), "constants must not accumulate gradients");
    }

    #[test]
    fn cross_entropy_uniform_logits() {
        let g = Graph::new();
        let logits = g.leaf(Tensor::zeros([3, 4]));
        let ce = logits.cross_entropy(&[0, 1, 2], &[1.0, 1.0, 1.0]);
        assert!((ce.item() - (4.0f64).ln()).abs() < 1e-12);
    }

    #[test]
    fn cross_entropy_ignores_zero_weight_rows() {
        let g = Graph::new();
        let mut lt = Tensor::zeros([2, 3]);
        lt.data_mut()[0] = 5.0; // row 0 strongly predicts class 0
        lt.data_mut()[3 + 1] = 9.0; // row 1 strongly predicts class 1
        let logits = g.leaf(lt.with_grad());
        let ce = logits.cross_entropy(&[0, 0], &[1.0, 0.0]);
        let full = g.leaf(logits.value()).cross_entropy(&[0, 0], &[1.0, 1.0]);
        assert!(ce.item() < full.item(), "masked row should not contribute loss");
        g.backward(ce.sum_all()).unwrap();
        let dl = g.grad(logits).unwrap();
        assert_eq!(&dl.data()[3..6], &[0.0, 0.0, 0.0], "masked row must get zero grad");
    }

    #[test]
    fn gather_rows_scatter_adds() {
        let g = Graph::new();
        let table = g.leaf(t64(&[3, 2], &[0.0; 6]).with_grad());
        let rows = table.gather_rows(&[1, 1, 2], &[3]);
        g.backward(rows.sum_all()).unwrap();
        let dt = g.grad(table).unwrap();
        assert_eq!(dt.data(), &[0.0, 0.0, 2.0, 2.0, 1.0, 1.0]);
    }

    #[test]
    fn broadcast_add_reduces_gradient() {
        let g = Graph::new();
        let x = g.leaf(t64(&[2, 3], &[0.0; 6]));
        let b = g.leaf(t64(&[3], &[0.0; 3]).with_grad());
        let loss = (x + b).sum_all();
        g.backward(loss).unwrap();
        assert_eq!(g.grad(b).unwrap().data(), &[2.0, 2.0, 2.0]);
    }
}
