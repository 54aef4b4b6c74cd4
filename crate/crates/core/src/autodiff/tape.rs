//! Reverse-mode automatic differentiation on a dynamic tape.
//!
//! Every forward pass builds a fresh [`Tape`]; operations append nodes in
//! execution order, which is by construction a topological order of the
//! dataflow DAG. [`Tape::backward`] replays the node list once in reverse,
//! accumulating vector-Jacobian products into per-node gradient buffers in
//! deterministic (node-index) order.
//!
//! Shape errors in operators are programming errors and panic with the
//! offending shapes; fallible entry points (`backward`) return `Result`.

use std::cell::RefCell;
use std::rc::Rc;

use super::kernels;
use super::tensor::Tensor;

#[derive(Debug, thiserror::Error)]
pub enum GradError {
    #[error("loss must be a scalar, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("tape already consumed by a previous backward pass")]
    Consumed,
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Neg(usize),
    AddConst(usize),
    MulConst(usize, f64),
    /// a: [m,k] @ b: [k,n] (or [k], treated as n=1)
    Matmul { a: usize, b: usize, m: usize, k: usize, n: usize },
    /// Shape-preserving cross-correlation, reflect padding.
    Conv2d { x: usize, kern: usize, h: usize, w: usize, kh: usize, kw: usize },
    AvgPool { x: usize, h: usize, w: usize, factor: usize },
    Tanh(usize),
    Relu(usize),
    Sigmoid(usize),
    Exp(usize),
    Log(usize),
    Sin(usize),
    Cos(usize),
    Square(usize),
    Sqrt(usize),
    Sum(usize),
    Mean(usize),
    /// Scalar broadcast to a shape.
    Broadcast { s: usize },
    Concat { parts: Vec<usize> },
    Slice { x: usize, start: usize, len: usize },
    Reshape { x: usize },
}

struct Node {
    value: Tensor,
    op: Op,
    /// Gradient can flow from a differentiable leaf to this node.
    needs_grad: bool,
}

struct TapeInner {
    nodes: Vec<Node>,
    consumed: bool,
}

/// Recording context for one forward pass.
#[derive(Clone)]
pub struct Tape {
    inner: Rc<RefCell<TapeInner>>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

/// Handle to one node of a [`Tape`]. Cheap to clone.
#[derive(Clone)]
pub struct Var {
    tape: Tape,
    id: usize,
}

impl Tape {
    pub fn new() -> Self {
        Tape { inner: Rc::new(RefCell::new(TapeInner { nodes: Vec::new(), consumed: false })) }
    }

    pub fn len(&self) -> usize {
        self.inner.borrow().nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Differentiable leaf: gradients are computed with respect to it.
    pub fn leaf(&self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Detached constant: participates in the forward values, contributes
    /// zero gradient.
    pub fn constant(&self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    fn push(&self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        let mut inner = self.inner.borrow_mut();
        assert!(!inner.consumed, "recording on a consumed tape");
        inner.nodes.push(Node { value, op, needs_grad });
        Var { tape: self.clone(), id: inner.nodes.len() - 1 }
    }

    fn same_tape(&self, other: &Tape) -> bool {
        Rc::ptr_eq(&self.inner, &other.inner)
    }

    /// Reverse pass: d(loss)/d(wrt_i) for every requested handle.
    ///
    /// `loss` must be scalar. Handles unreachable from the loss get a zero
    /// gradient of their own shape. The tape is consumed afterwards; further
    /// recording or a second backward is an error.
    pub fn backward(&self, loss: &Var, wrt: &[&Var]) -> Result<Vec<Tensor>, GradError> {
        assert!(self.same_tape(&loss.tape), "loss from a different tape");
        for v in wrt {
            assert!(self.same_tape(&v.tape), "wrt var from a different tape");
        }
        let mut inner = self.inner.borrow_mut();
        if inner.consumed {
            return Err(GradError::Consumed);
        }
        inner.consumed = true;
        let nodes = &inner.nodes;
        if !nodes[loss.id].value.is_scalar() {
            return Err(GradError::NonScalarLoss(nodes[loss.id].value.shape().to_vec()));
        }

        let mut grads: Vec<Option<Vec<f64>>> = vec![None; nodes.len()];
        grads[loss.id] = Some(vec![1.0]);

        for id in (0..=loss.id).rev() {
            if !nodes[id].needs_grad {
                continue;
            }
            let g = match grads[id].take() {
                Some(g) => g,
                None => continue,
            };
            backward_op(nodes, id, &g, &mut grads);
            // Leaves requested by the caller still need their buffer.
            if wrt.iter().any(|v| v.id == id) {
                grads[id] = Some(g);
            }
        }

        Ok(wrt
            .iter()
            .map(|v| {
                let shape = nodes[v.id].value.shape().to_vec();
                match grads[v.id].take() {
                    Some(g) => Tensor::new(g, shape),
                    None => Tensor::zeros(&shape),
                }
            })
            .collect())
    }
}

/// Accumulate `delta` into the gradient buffer of node `id`.
fn accumulate(grads: &mut [Option<Vec<f64>>], nodes: &[Node], id: usize, delta: &[f64]) {
    if !nodes[id].needs_grad {
        return;
    }
    match &mut grads[id] {
        Some(buf) => {
            for (b, d) in buf.iter_mut().zip(delta.iter()) {
                *b += d;
            }
        }
        None => grads[id] = Some(delta.to_vec()),
    }
}

fn backward_op(nodes: &[Node], id: usize, g: &[f64], grads: &mut Vec<Option<Vec<f64>>>) {
    match &nodes[id].op {
        Op::Leaf => {}
        Op::Add(a, b) => {
            accumulate(grads, nodes, *a, g);
            accumulate(grads, nodes, *b, g);
        }
        Op::Sub(a, b) => {
            accumulate(grads, nodes, *a, g);
            let neg: Vec<f64> = g.iter().map(|v| -v).collect();
            accumulate(grads, nodes, *b, &neg);
        }
        Op::Mul(a, b) => {
            let da: Vec<f64> =
                g.iter().zip(nodes[*b].value.data().iter()).map(|(g, b)| g * b).collect();
            accumulate(grads, nodes, *a, &da);
            let db: Vec<f64> =
                g.iter().zip(nodes[*a].value.data().iter()).map(|(g, a)| g * a).collect();
            accumulate(grads, nodes, *b, &db);
        }
        Op::Neg(x) => {
            let dx: Vec<f64> = g.iter().map(|v| -v).collect();
            accumulate(grads, nodes, *x, &dx);
        }
        Op::AddConst(x) => accumulate(grads, nodes, *x, g),
        Op::MulConst(x, c) => {
            let dx: Vec<f64> = g.iter().map(|v| v * c).collect();
            accumulate(grads, nodes, *x, &dx);
        }
        Op::Matmul { a, b, m, k, n } => {
            if nodes[*a].needs_grad {
                let mut da = vec![0.0; m * k];
                kernels::matmul_grad_lhs(g, nodes[*b].value.data(), *m, *k, *n, &mut da);
                accumulate(grads, nodes, *a, &da);
            }
            if nodes[*b].needs_grad {
                let mut db = vec![0.0; k * n];
                kernels::matmul_grad_rhs(nodes[*a].value.data(), g, *m, *k, *n, &mut db);
                accumulate(grads, nodes, *b, &db);
            }
        }
        Op::Conv2d { x, kern, h, w, kh, kw } => {
            if nodes[*x].needs_grad {
                let mut dx = vec![0.0; h * w];
                kernels::conv2d_reflect_grad_input(
                    g,
                    *h,
                    *w,
                    nodes[*kern].value.data(),
                    *kh,
                    *kw,
                    &mut dx,
                );
                accumulate(grads, nodes, *x, &dx);
            }
            if nodes[*kern].needs_grad {
                let mut dk = vec![0.0; kh * kw];
                kernels::conv2d_reflect_grad_kernel(
                    g,
                    nodes[*x].value.data(),
                    *h,
                    *w,
                    *kh,
                    *kw,
                    &mut dk,
                );
                accumulate(grads, nodes, *kern, &dk);
            }
        }
        Op::AvgPool { x, h, w, factor } => {
            let mut dx = vec![0.0; h * w];
            kernels::avg_pool_grad_input(g, *h, *w, *factor, &mut dx);
            accumulate(grads, nodes, *x, &dx);
        }
        Op::Tanh(x) => {
            let y = nodes[id].value.data();
            let dx: Vec<f64> = g.iter().zip(y.iter()).map(|(g, y)| g * (1.0 - y * y)).collect();
            accumulate(grads, nodes, *x, &dx);
        }
        Op::Relu(x) => {
            let input = nodes[*x].value.data();
            let dx: Vec<f64> =
                g.iter().zip(input.iter()).map(|(g, x)| if *x > 0.0 { *g } else { 0.0 }).collect();
            accumulate(grads, nodes, *x, &dx);
        }
        Op::Sigmoid(x) => {
            let y = nodes[id].value.data();
            let dx: Vec<f64> = g.iter().zip(y.iter()).map(|(g, y)| g * y * (1.0 - y)).collect();
            accumulate(grads, nodes, *x, &dx);
        }
        Op::Exp(x) => {
            let y = nodes[id].value.data();
            let dx: Vec<f64> = g.iter().zip(y.iter()).map(|(g, y)| g * y).collect();
            accumulate(grads, nodes, *x, &dx);
        }
        Op::Log(x) => {
            let input = nodes[*x].value.data();
            let dx: Vec<f64> = g.iter().zip(input.iter()).map(|(g, x)| g / x).collect();
            accumulate(grads, nodes, *x, &dx);
        }
        Op::Sin(x) => {
            let input = nodes[*x].value.data();
            let dx: Vec<f64> = g.iter().zip(input.iter()).map(|(g, x)| g * x.cos()).collect();
            accumulate(grads, nodes, *x, &dx);
        }
        Op::Cos(x) => {
            let input = nodes[*x].value.data();
            let dx: Vec<f64> = g.iter().zip(input.iter()).map(|(g, x)| -g * x.sin()).collect();
            accumulate(grads, nodes, *x, &dx);
        }
        Op::Square(x) => {
            let input = nodes[*x].value.data();
            let dx: Vec<f64> = g.iter().zip(input.iter()).map(|(g, x)| 2.0 * x * g).collect();
            accumulate(grads, nodes, *x, &dx);
        }
        Op::Sqrt(x) => {
            let y = nodes[id].value.data();
            let dx: Vec<f64> = g.iter().zip(y.iter()).map(|(g, y)| g / (2.0 * y)).collect();
            accumulate(grads, nodes, *x, &dx);
        }
        Op::Sum(x) => {
            let dx = vec![g[0]; nodes[*x].value.numel()];
            accumulate(grads, nodes, *x, &dx);
        }
        Op::Mean(x) => {
            let n = nodes[*x].value.numel();
            let dx = vec![g[0] / n as f64; n];
            accumulate(grads, nodes, *x, &dx);
        }
        Op::Broadcast { s, .. } => {
            let total: f64 = g.iter().sum();
            accumulate(grads, nodes, *s, &[total]);
        }
        Op::Concat { parts } => {
            let mut offset = 0;
            for p in parts {
                let len = nodes[*p].value.numel();
                accumulate(grads, nodes, *p, &g[offset..offset + len]);
                offset += len;
            }
        }
        Op::Slice { x, start, len } => {
            let mut dx = vec![0.0; nodes[*x].value.numel()];
            dx[*start..*start + *len].copy_from_slice(&g[..*len]);
            accumulate(grads, nodes, *x, &dx);
        }
        Op::Reshape { x } => accumulate(grads, nodes, *x, g),
    }
}

// ── Var operations ───────────────────────────────────────────────────────

impl Var {
    pub fn value(&self) -> Tensor {
        self.tape.inner.borrow().nodes[self.id].value.clone()
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.inner.borrow().nodes[self.id].value.shape().to_vec()
    }

    pub fn tape(&self) -> &Tape {
        &self.tape
    }

    /// Stop gradient: same value re-entered as a constant.
    pub fn detach(&self) -> Var {
        self.tape.constant(self.value())
    }

    fn unary(&self, op: impl FnOnce(usize) -> Op, value: Tensor) -> Var {
        let needs = self.tape.inner.borrow().nodes[self.id].needs_grad;
        self.tape.push(value, op(self.id), needs)
    }

    fn binary(&self, rhs: &Var, make: impl FnOnce(usize, usize) -> Op, value: Tensor) -> Var {
        assert!(self.tape.same_tape(&rhs.tape), "operands recorded on different tapes");
        let needs = {
            let inner = self.tape.inner.borrow();
            inner.nodes[self.id].needs_grad || inner.nodes[rhs.id].needs_grad
        };
        self.tape.push(value, make(self.id, rhs.id), needs)
    }

    fn zip_same_shape(&self, rhs: &Var, name: &str, f: impl Fn(f64, f64) -> f64) -> Tensor {
        let a = self.value();
        let b = rhs.value();
        assert_eq!(
            a.shape(),
            b.shape(),
            "{name}: shape mismatch {:?} vs {:?}",
            a.shape(),
            b.shape()
        );
        Tensor::new(
            a.data().iter().zip(b.data().iter()).map(|(x, y)| f(*x, *y)).collect(),
            a.shape().to_vec(),
        )
    }

    pub fn add(&self, rhs: &Var) -> Var {
        let value = self.zip_same_shape(rhs, "add", |a, b| a + b);
        self.binary(rhs, Op::Add, value)
    }

    pub fn sub(&self, rhs: &Var) -> Var {
        let value = self.zip_same_shape(rhs, "sub", |a, b| a - b);
        self.binary(rhs, Op::Sub, value)
    }

    pub fn mul(&self, rhs: &Var) -> Var {
        let value = self.zip_same_shape(rhs, "mul", |a, b| a * b);
        self.binary(rhs, Op::Mul, value)
    }

    pub fn neg(&self) -> Var {
        let value = self.value().map(|v| -v);
        self.unary(Op::Neg, value)
    }

    pub fn add_scalar(&self, c: f64) -> Var {
        let value = self.value().map(|v| v + c);
        self.unary(Op::AddConst, value)
    }

    pub fn scale(&self, c: f64) -> Var {
        let value = self.value().map(|v| v * c);
        self.unary(|x| Op::MulConst(x, c), value)
    }

    /// a: [m,k] @ b: [k,n] or [k]; a 1-D lhs is treated as [1,k].
    pub fn matmul(&self, rhs: &Var) -> Var {
        let av = self.value();
        let bv = rhs.value();
        let (m, k) = match av.shape() {
            [m, k] => (*m, *k),
            [k] => (1, *k),
            s => panic!("matmul lhs must be rank 1 or 2, got {s:?}"),
        };
        let (k2, n, out_shape) = match bv.shape() {
            [k2, n] => (*k2, *n, if av.shape().len() == 1 { vec![*n] } else { vec![m, *n] }),
            [k2] => (*k2, 1, if av.shape().len() == 1 { vec![] } else { vec![m] }),
            s => panic!("matmul rhs must be rank 1 or 2, got {s:?}"),
        };
        assert_eq!(
            k, k2,
            "matmul inner dimensions differ: {:?} @ {:?}",
            av.shape(),
            bv.shape()
        );
        let mut out = vec![0.0; m * n];
        kernels::matmul(av.data(), bv.data(), m, k, n, &mut out);
        let value = Tensor::new(out, out_shape);
        self.binary(rhs, |a, b| Op::Matmul { a, b, m, k, n }, value)
    }

    /// Shape-preserving 2-D cross-correlation with reflect padding.
    /// self: [h,w], kernel: [kh,kw] with odd extents, kh/2 < h, kw/2 < w.
    pub fn conv2d_reflect(&self, kern: &Var) -> Var {
        let xv = self.value();
        let kv = kern.value();
        let (h, w) = match xv.shape() {
            [h, w] => (*h, *w),
            s => panic!("conv2d input must be 2-D, got {s:?}"),
        };
        let (kh, kw) = match kv.shape() {
            [kh, kw] => (*kh, *kw),
            s => panic!("conv2d kernel must be 2-D, got {s:?}"),
        };
        assert!(kh % 2 == 1 && kw % 2 == 1, "conv2d kernel extents must be odd, got {kh}x{kw}");
        assert!(
            kh / 2 < h && kw / 2 < w,
            "conv2d kernel {kh}x{kw} does not fit image {h}x{w} with reflect padding"
        );
        let mut out = vec![0.0; h * w];
        kernels::conv2d_reflect(xv.data(), h, w, kv.data(), kh, kw, &mut out);
        let value = Tensor::new(out, vec![h, w]);
        self.binary(kern, |x, kern| Op::Conv2d { x, kern, h, w, kh, kw }, value)
    }

    /// Non-overlapping block average by `factor` in each direction.
    pub fn avg_pool(&self, factor: usize) -> Var {
        let xv = self.value();
        let (h, w) = match xv.shape() {
            [h, w] => (*h, *w),
            s => panic!("avg_pool input must be 2-D, got {s:?}"),
        };
        assert!(factor >= 1 && h % factor == 0 && w % factor == 0,
            "avg_pool factor {factor} must divide image extents {h}x{w}");
        let mut out = vec![0.0; (h / factor) * (w / factor)];
        kernels::avg_pool(xv.data(), h, w, factor, &mut out);
        let value = Tensor::new(out, vec![h / factor, w / factor]);
        self.unary(|x| Op::AvgPool { x, h, w, factor }, value)
    }

    pub fn tanh(&self) -> Var {
        let value = self.value().map(f64::tanh);
        self.unary(Op::Tanh, value)
    }

    pub fn relu(&self) -> Var {
        let value = self.value().map(|v| if v > 0.0 { v } else { 0.0 });
        self.unary(Op::Relu, value)
    }

    pub fn sigmoid(&self) -> Var {
        let value = self.value().map(|v| 1.0 / (1.0 + (-v).exp()));
        self.unary(Op::Sigmoid, value)
    }

    pub fn exp(&self) -> Var {
        let value = self.value().map(f64::exp);
        self.unary(Op::Exp, value)
    }

    pub fn log(&self) -> Var {
        let value = self.value().map(f64::ln);
        self.unary(Op::Log, value)
    }

    pub fn sin(&self) -> Var {
        let value = self.value().map(f64::sin);
        self.unary(Op::Sin, value)
    }

    pub fn cos(&self) -> Var {
        let value = self.value().map(f64::cos);
        self.unary(Op::Cos, value)
    }

    pub fn square(&self) -> Var {
        let value = self.value().map(|v| v * v);
        self.unary(Op::Square, value)
    }

    pub fn sqrt(&self) -> Var {
        let value = self.value().map(f64::sqrt);
        self.unary(Op::Sqrt, value)
    }

    /// Sum of all elements -> scalar.
    pub fn sum(&self) -> Var {
        let value = Tensor::scalar(self.value().data().iter().sum());
        self.unary(Op::Sum, value)
    }

    /// Mean of all elements -> scalar.
    pub fn mean(&self) -> Var {
        let v = self.value();
        let value = Tensor::scalar(v.data().iter().sum::<f64>() / v.numel() as f64);
        self.unary(Op::Mean, value)
    }

    /// Euclidean norm -> scalar. Composition of square/sum/sqrt.
    pub fn l2_norm(&self) -> Var {
        self.square().sum().sqrt()
    }

    /// Broadcast a scalar to `shape`.
    pub fn broadcast_to(&self, shape: &[usize]) -> Var {
        let v = self.value();
        assert!(v.is_scalar(), "broadcast_to requires a scalar, got shape {:?}", v.shape());
        let value = Tensor::filled(shape, v.item());
        self.unary(|s| Op::Broadcast { s }, value)
    }

    /// Elementwise product with a broadcast scalar: `s * self`.
    pub fn scale_by(&self, s: &Var) -> Var {
        s.broadcast_to(&self.shape()).mul(self)
    }

    /// Concatenate flat buffers; result is 1-D.
    pub fn concat(parts: &[Var]) -> Var {
        assert!(!parts.is_empty(), "concat of zero tensors");
        let tape = parts[0].tape.clone();
        let mut data = Vec::new();
        let mut needs = false;
        {
            let inner = tape.inner.borrow();
            for p in parts {
                assert!(tape.same_tape(&p.tape), "operands recorded on different tapes");
                data.extend_from_slice(inner.nodes[p.id].value.data());
                needs |= inner.nodes[p.id].needs_grad;
            }
        }
        let value = Tensor::from_vec(data);
        let ids: Vec<usize> = parts.iter().map(|p| p.id).collect();
        tape.push(value, Op::Concat { parts: ids }, needs)
    }

    /// Contiguous 1-D slice of the flat buffer.
    pub fn slice(&self, start: usize, len: usize) -> Var {
        let v = self.value();
        assert!(
            start + len <= v.numel(),
            "slice {}..{} out of bounds for {} elements",
            start,
            start + len,
            v.numel()
        );
        let value = Tensor::from_vec(v.data()[start..start + len].to_vec());
        self.unary(|x| Op::Slice { x, start, len }, value)
    }

    pub fn reshape(&self, shape: &[usize]) -> Var {
        let value = self.value().reshaped(shape.to_vec());
        self.unary(|x| Op::Reshape { x }, value)
    }
}

macro_rules! impl_binop {
    ($trait:ident, $method:ident) => {
        impl std::ops::$trait<&Var> for &Var {
            type Output = Var;
            fn $method(self, rhs: &Var) -> Var {
                Var::$method(self, rhs)
            }
        }
        impl std::ops::$trait<Var> for Var {
            type Output = Var;
            fn $method(self, rhs: Var) -> Var {
                Var::$method(&self, &rhs)
            }
        }
        impl std::ops::$trait<&Var> for Var {
            type Output = Var;
            fn $method(self, rhs: &Var) -> Var {
                Var::$method(&self, rhs)
            }
        }
        impl std::ops::$trait<Var> for &Var {
            type Output = Var;
            fn $method(self, rhs: Var) -> Var {
                Var::$method(self, &rhs)
            }
        }
    };
}

impl_binop!(Add, add);
impl_binop!(Sub, sub);
impl_binop!(Mul, mul);
