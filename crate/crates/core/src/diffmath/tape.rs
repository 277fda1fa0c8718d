//! Define-by-run reverse-mode differentiation.
//!
//! Every operation appends a node holding its forward value and enough saved
//! state to apply its vector-Jacobian product. [`Tape::backward`] walks the
//! nodes once in reverse. A tape is single-use: build a new one per forward
//! pass.

use ndarray::linalg::general_mat_mul;
use ndarray::{ArrayView2, ArrayViewMut2};

use super::tensor::{numel, Real, Tensor};
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BinaryOp {
    Add,
    Sub,
    Mul,
    Div,
    Pow,
}

impl BinaryOp {
    fn name(self) -> &'static str {
        match self {
            BinaryOp::Add => "add",
            BinaryOp::Sub => "sub",
            BinaryOp::Mul => "mul",
            BinaryOp::Div => "div",
            BinaryOp::Pow => "pow",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum UnaryOp {
    Neg,
    Exp,
    Log,
    Sqrt,
    Relu,
    /// Tanh approximation.
    Gelu,
}

impl UnaryOp {
    fn name(self) -> &'static str {
        match self {
            UnaryOp::Neg => "neg",
            UnaryOp::Exp => "exp",
            UnaryOp::Log => "log",
            UnaryOp::Sqrt => "sqrt",
            UnaryOp::Relu => "relu",
            UnaryOp::Gelu => "gelu",
        }
    }
}

/// Maps an output element of a broadcast op back to an operand element.
#[derive(Clone, Debug)]
enum IndexMap {
    Same,
    Modulo(usize),
    Table(Vec<usize>),
}

impl IndexMap {
    #[inline]
    fn get(&self, i: usize) -> usize {
        match self {
            IndexMap::Same => i,
            IndexMap::Modulo(n) => i % n,
            IndexMap::Table(t) => t[i],
        }
    }

    fn build(out: &[usize], src: &[usize]) -> IndexMap {
        if out == src {
            return IndexMap::Same;
        }
        let k = src.len();
        if out.len() >= k && out[out.len() - k..] == *src {
            return IndexMap::Modulo(numel(src).max(1));
        }
        // Right-aligned strides with zero for broadcast dimensions.
        let pad = out.len() - k;
        let mut strides = vec![0usize; out.len()];
        let mut s = 1;
        for d in (0..k).rev() {
            strides[pad + d] = if src[d] == 1 { 0 } else { s };
            s *= src[d];
        }
        IndexMap::Table(strided_offsets(out, &strides))
    }
}

/// For every element of an array with shape `shape` (row-major), the offset
/// `sum(index[d] * strides[d])`.
fn strided_offsets(shape: &[usize], strides: &[usize]) -> Vec<usize> {
    let n = numel(shape);
    let mut out = Vec::with_capacity(n);
    let mut idx = vec![0usize; shape.len()];
    let mut off = 0usize;
    for _ in 0..n {
        out.push(off);
        for d in (0..shape.len()).rev() {
            idx[d] += 1;
            off += strides[d];
            if idx[d] < shape[d] {
                break;
            }
            off -= strides[d] * shape[d];
            idx[d] = 0;
        }
    }
    out
}

fn broadcast_shape(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let n = a.len().max(b.len());
    let mut out = vec![0; n];
    for i in 0..n {
        let da = if i < n - a.len() { 1 } else { a[i - (n - a.len())] };
        let db = if i < n - b.len() { 1 } else { b[i - (n - b.len())] };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return None,
        };
    }
    Some(out)
}

/// Splits `shape` around `axis` into (outer, len, inner) extents.
fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    (
        numel(&shape[..axis]),
        shape[axis],
        numel(&shape[axis + 1..]),
    )
}

#[inline]
fn gelu<T: Real>(x: T) -> (T, T) {
    // 0.5 x (1 + tanh(c (x + 0.044715 x^3))), with derivative.
    let c = T::from_f64_lossy((2.0 / std::f64::consts::PI).sqrt());
    let k = T::from_f64_lossy(0.044715);
    let half = T::from_f64_lossy(0.5);
    let three = T::from_f64_lossy(3.0);
    let inner = c * (x + k * x * x * x);
    let t = inner.tanh();
    let y = half * x * (T::one() + t);
    let dinner = c * (T::one() + three * k * x * x);
    let dy = half * (T::one() + t) + half * x * (T::one() - t * t) * dinner;
    (y, dy)
}

/// `c += op(a) * op(b)` for row-major slices, `op` optionally transposing.
#[allow(clippy::too_many_arguments)]
fn gemm_acc<T: Real>(
    m: usize,
    k: usize,
    n: usize,
    a: &[T],
    a_t: bool,
    b: &[T],
    b_t: bool,
    c: &mut [T],
) {
    let av = if a_t {
        ArrayView2::from_shape((k, m), a).expect("lhs").reversed_axes()
    } else {
        ArrayView2::from_shape((m, k), a).expect("lhs")
    };
    let bv = if b_t {
        ArrayView2::from_shape((n, k), b).expect("rhs").reversed_axes()
    } else {
        ArrayView2::from_shape((k, n), b).expect("rhs")
    };
    let mut cv = ArrayViewMut2::from_shape((m, n), c).expect("out");
    general_mat_mul(T::one(), &av, &bv, T::one(), &mut cv);
}

enum Op<T> {
    Leaf,
    Binary {
        op: BinaryOp,
        a: Var,
        b: Var,
        map_a: IndexMap,
        map_b: IndexMap,
    },
    Unary {
        op: UnaryOp,
        x: Var,
    },
    MatMul {
        a: Var,
        b: Var,
        batch: usize,
        m: usize,
        k: usize,
        n: usize,
        shared_rhs: bool,
    },
    Softmax {
        x: Var,
        outer: usize,
        len: usize,
        inner: usize,
    },
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        rstd: Vec<T>,
        dim: usize,
    },
    Reduce {
        x: Var,
        outer: usize,
        len: usize,
        inner: usize,
        scale: T,
    },
    Max {
        x: Var,
        argmax: Vec<usize>,
    },
    Reshape {
        x: Var,
    },
    Permute {
        x: Var,
        offsets: Vec<usize>,
    },
    Concat {
        parts: Vec<(Var, usize)>,
        outer: usize,
        inner: usize,
    },
    Narrow {
        x: Var,
        outer: usize,
        len_in: usize,
        start: usize,
        len: usize,
        inner: usize,
    },
    CrossEntropy {
        logits: Var,
        probs: Vec<T>,
        labels: Vec<usize>,
        classes: usize,
    },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Real> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

pub struct Tape<T: Real> {
    nodes: Vec<Node<T>>,
    differentiated: bool,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn ensure_finite<T: Real>(op: &'static str, data: &[T]) -> Result<()> {
    if data.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite { op })
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            differentiated: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
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

    /// A leaf whose gradient is tracked.
    pub fn param(&mut self, t: Tensor<T>) -> Var {
        self.push_raw(t, Op::Leaf, true)
    }

    /// A leaf with no gradient.
    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.push_raw(t, Op::Leaf, false)
    }

    fn push_raw(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn push(
        &mut self,
        name: &'static str,
        shape: Vec<usize>,
        data: Vec<T>,
        op: Op<T>,
        parents: &[Var],
    ) -> Result<Var> {
        ensure_finite(name, &data)?;
        let rg = parents.iter().any(|p| self.nodes[p.0].requires_grad);
        Ok(self.push_raw(Tensor::from_parts(shape, data), op, rg))
    }

    // ---- elementwise -------------------------------------------------

    pub fn binary(&mut self, op: BinaryOp, a: Var, b: Var) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        let out = broadcast_shape(&sa, &sb).ok_or_else(|| Error::Shape {
            op: op.name(),
            lhs: sa.clone(),
            rhs: sb.clone(),
        })?;
        let map_a = IndexMap::build(&out, &sa);
        let map_b = IndexMap::build(&out, &sb);
        let av = self.value(a).data();
        let bv = self.value(b).data();
        let n = numel(&out);
        if op == BinaryOp::Div && bv.iter().any(|v| *v == T::zero()) {
            return Err(Error::domain("div", "division by zero"));
        }
        let f: fn(T, T) -> T = match op {
            BinaryOp::Add => |x, y| x + y,
            BinaryOp::Sub => |x, y| x - y,
            BinaryOp::Mul => |x, y| x * y,
            BinaryOp::Div => |x, y| x / y,
            BinaryOp::Pow => |x, y| x.powf(y),
        };
        let data: Vec<T> = (0..n)
            .map(|i| f(av[map_a.get(i)], bv[map_b.get(i)]))
            .collect();
        self.push(
            op.name(),
            out,
            data,
            Op::Binary {
                op,
                a,
                b,
                map_a,
                map_b,
            },
            &[a, b],
        )
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryOp::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryOp::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryOp::Mul, a, b)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryOp::Div, a, b)
    }

    pub fn pow(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryOp::Pow, a, b)
    }

    pub fn binary_scalar(&mut self, op: BinaryOp, a: Var, s: T) -> Result<Var> {
        let c = self.constant(Tensor::scalar(s));
        self.binary(op, a, c)
    }

    pub fn add_scalar(&mut self, a: Var, s: T) -> Result<Var> {
        self.binary_scalar(BinaryOp::Add, a, s)
    }

    pub fn mul_scalar(&mut self, a: Var, s: T) -> Result<Var> {
        self.binary_scalar(BinaryOp::Mul, a, s)
    }

    pub fn div_scalar(&mut self, a: Var, s: T) -> Result<Var> {
        self.binary_scalar(BinaryOp::Div, a, s)
    }

    pub fn unary(&mut self, op: UnaryOp, x: Var) -> Result<Var> {
        let xv = self.value(x);
        let shape = xv.shape().to_vec();
        match op {
            UnaryOp::Log if xv.data().iter().any(|v| *v < T::zero()) => {
                return Err(Error::domain("log", "negative input"));
            }
            UnaryOp::Sqrt if xv.data().iter().any(|v| *v < T::zero()) => {
                return Err(Error::domain("sqrt", "negative input"));
            }
            _ => {}
        }
        let data: Vec<T> = xv
            .data()
            .iter()
            .map(|&v| match op {
                UnaryOp::Neg => -v,
                UnaryOp::Exp => v.exp(),
                UnaryOp::Log => v.ln(),
                UnaryOp::Sqrt => v.sqrt(),
                UnaryOp::Relu => v.max(T::zero()),
                UnaryOp::Gelu => gelu(v).0,
            })
            .collect();
        self.push(op.name(), shape, data, Op::Unary { op, x }, &[x])
    }

    pub fn neg(&mut self, x: Var) -> Result<Var> {
        self.unary(UnaryOp::Neg, x)
    }

    pub fn exp(&mut self, x: Var) -> Result<Var> {
        self.unary(UnaryOp::Exp, x)
    }

    pub fn log(&mut self, x: Var) -> Result<Var> {
        self.unary(UnaryOp::Log, x)
    }

    pub fn sqrt(&mut self, x: Var) -> Result<Var> {
        self.unary(UnaryOp::Sqrt, x)
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.unary(UnaryOp::Relu, x)
    }

    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        self.unary(UnaryOp::Gelu, x)
    }

    // ---- linear algebra ------------------------------------------------

    /// `[.., m, k] x [.., k, n]`; a rank-2 right operand is shared by every
    /// leading batch of the left operand.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        let err = || Error::Shape {
            op: "matmul",
            lhs: sa.clone(),
            rhs: sb.clone(),
        };
        if sa.len() < 2 || sb.len() < 2 {
            return Err(err());
        }
        let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
        let (k2, n) = (sb[sb.len() - 2], sb[sb.len() - 1]);
        if k != k2 {
            return Err(err());
        }
        let lead = &sa[..sa.len() - 2];
        let shared_rhs = sb.len() == 2;
        if !shared_rhs && sb[..sb.len() - 2] != *lead {
            return Err(err());
        }
        let batch = numel(lead);
        let mut out_shape = lead.to_vec();
        out_shape.extend([m, n]);
        let mut data = vec![T::zero(); batch * m * n];
        let av = self.value(a).data();
        let bv = self.value(b).data();
        for i in 0..batch {
            let bo = if shared_rhs { 0 } else { i * k * n };
            gemm_acc(
                m,
                k,
                n,
                &av[i * m * k..(i + 1) * m * k],
                false,
                &bv[bo..bo + k * n],
                false,
                &mut data[i * m * n..(i + 1) * m * n],
            );
        }
        self.push(
            "matmul",
            out_shape,
            data,
            Op::MatMul {
                a,
                b,
                batch,
                m,
                k,
                n,
                shared_rhs,
            },
            &[a, b],
        )
    }

    /// Max-stabilized softmax along `axis`.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(Error::domain("softmax", format!("axis {axis} out of range")));
        }
        let (outer, len, inner) = split_axis(&shape, axis);
        let xv = self.value(x).data();
        let mut data = vec![T::zero(); xv.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |l: usize| o * len * inner + l * inner + i;
                let mx = (0..len).map(|l| xv[at(l)]).fold(T::neg_infinity(), T::max);
                let mut sum = T::zero();
                for l in 0..len {
                    let e = (xv[at(l)] - mx).exp();
                    data[at(l)] = e;
                    sum = sum + e;
                }
                for l in 0..len {
                    data[at(l)] = data[at(l)] / sum;
                }
            }
        }
        self.push(
            "softmax",
            shape,
            data,
            Op::Softmax {
                x,
                outer,
                len,
                inner,
            },
            &[x],
        )
    }

    /// Normalizes over the last axis, then applies `gamma * xhat + beta`.
    pub fn layernorm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let dim = *shape.last().ok_or_else(|| Error::domain("layernorm", "rank-0 input"))?;
        if self.shape(gamma) != [dim] || self.shape(beta) != [dim] {
            return Err(Error::Shape {
                op: "layernorm",
                lhs: shape,
                rhs: self.shape(gamma).to_vec(),
            });
        }
        if eps <= 0.0 {
            return Err(Error::domain("layernorm", "eps must be positive"));
        }
        let eps = T::from_f64_lossy(eps);
        let xv = self.value(x).data();
        let g = self.value(gamma).data();
        let bt = self.value(beta).data();
        let rows = xv.len() / dim;
        let dt = T::from_usize(dim).unwrap();
        let mut xhat = vec![T::zero(); xv.len()];
        let mut rstd = vec![T::zero(); rows];
        let mut data = vec![T::zero(); xv.len()];
        for r in 0..rows {
            let row = &xv[r * dim..(r + 1) * dim];
            let mean = row.iter().copied().sum::<T>() / dt;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / dt;
            let rs = T::one() / (var + eps).sqrt();
            rstd[r] = rs;
            for j in 0..dim {
                let h = (row[j] - mean) * rs;
                xhat[r * dim + j] = h;
                data[r * dim + j] = h * g[j] + bt[j];
            }
        }
        self.push(
            "layernorm",
            shape,
            data,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
                dim,
            },
            &[x, gamma, beta],
        )
    }

    // ---- reductions ------------------------------------------------------

    fn reduce(&mut self, name: &'static str, x: Var, axis: usize, keepdim: bool, mean: bool) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(Error::domain(name, format!("axis {axis} out of range")));
        }
        let (outer, len, inner) = split_axis(&shape, axis);
        let xv = self.value(x).data();
        let scale = if mean {
            T::one() / T::from_usize(len).unwrap()
        } else {
            T::one()
        };
        let mut data = vec![T::zero(); outer * inner];
        for o in 0..outer {
            for l in 0..len {
                let src = &xv[o * len * inner + l * inner..o * len * inner + (l + 1) * inner];
                for (d, &s) in data[o * inner..(o + 1) * inner].iter_mut().zip(src) {
                    *d = *d + s;
                }
            }
        }
        if mean {
            data.iter_mut().for_each(|v| *v = *v * scale);
        }
        let mut out = shape.clone();
        if keepdim {
            out[axis] = 1;
        } else {
            out.remove(axis);
        }
        self.push(
            name,
            out,
            data,
            Op::Reduce {
                x,
                outer,
                len,
                inner,
                scale,
            },
            &[x],
        )
    }

    pub fn sum_axis(&mut self, x: Var, axis: usize, keepdim: bool) -> Result<Var> {
        self.reduce("sum", x, axis, keepdim, false)
    }

    pub fn mean_axis(&mut self, x: Var, axis: usize, keepdim: bool) -> Result<Var> {
        self.reduce("mean", x, axis, keepdim, true)
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let n = self.value(x).numel();
        let flat = self.reshape(x, &[n])?;
        self.sum_axis(flat, 0, false)
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let n = self.value(x).numel();
        let flat = self.reshape(x, &[n])?;
        self.mean_axis(flat, 0, false)
    }

    /// Maximum along `axis`; the gradient flows to the first maximal entry.
    pub fn max_axis(&mut self, x: Var, axis: usize, keepdim: bool) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(Error::domain("max", format!("axis {axis} out of range")));
        }
        let (outer, len, inner) = split_axis(&shape, axis);
        let xv = self.value(x).data();
        let mut data = Vec::with_capacity(outer * inner);
        let mut argmax = Vec::with_capacity(outer * inner);
        for o in 0..outer {
            for i in 0..inner {
                let mut best = o * len * inner + i;
                for l in 1..len {
                    let at = o * len * inner + l * inner + i;
                    if xv[at] > xv[best] {
                        best = at;
                    }
                }
                data.push(xv[best]);
                argmax.push(best);
            }
        }
        let mut out = shape.clone();
        if keepdim {
            out[axis] = 1;
        } else {
            out.remove(axis);
        }
        self.push("max", out, data, Op::Max { x, argmax }, &[x])
    }

    // ---- layout ------------------------------------------------------------

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let xv = self.value(x);
        if numel(shape) != xv.numel() || shape.contains(&0) {
            return Err(Error::Shape {
                op: "reshape",
                lhs: xv.shape().to_vec(),
                rhs: shape.to_vec(),
            });
        }
        let data = xv.data().to_vec();
        self.push("reshape", shape.to_vec(), data, Op::Reshape { x }, &[x])
    }

    /// Reorders axes: output axis `d` is input axis `perm[d]`.
    pub fn permute(&mut self, x: Var, perm: &[usize]) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let mut seen = vec![false; shape.len()];
        if perm.len() != shape.len() || perm.iter().any(|&p| p >= shape.len() || std::mem::replace(&mut seen[p], true)) {
            return Err(Error::domain("permute", format!("invalid permutation {perm:?}")));
        }
        let mut in_strides = vec![1usize; shape.len()];
        for d in (0..shape.len().saturating_sub(1)).rev() {
            in_strides[d] = in_strides[d + 1] * shape[d + 1];
        }
        let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
        let strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
        let offsets = strided_offsets(&out_shape, &strides);
        let xv = self.value(x).data();
        let data = offsets.iter().map(|&o| xv[o]).collect();
        self.push("permute", out_shape, data, Op::Permute { x, offsets }, &[x])
    }

    pub fn transpose_last2(&mut self, x: Var) -> Result<Var> {
        let r = self.shape(x).len();
        if r < 2 {
            return Err(Error::domain("transpose", "rank < 2"));
        }
        let mut perm: Vec<usize> = (0..r).collect();
        perm.swap(r - 2, r - 1);
        self.permute(x, &perm)
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = self
            .shape(*parts.first().ok_or_else(|| Error::domain("concat", "no inputs"))?)
            .to_vec();
        if axis >= first.len() {
            return Err(Error::domain("concat", format!("axis {axis} out of range")));
        }
        let (outer, _, inner) = split_axis(&first, axis);
        let mut total = 0;
        let mut meta = Vec::with_capacity(parts.len());
        for &p in parts {
            let s = self.shape(p);
            let ok = s.len() == first.len()
                && s.iter()
                    .zip(&first)
                    .enumerate()
                    .all(|(d, (a, b))| d == axis || a == b);
            if !ok {
                return Err(Error::Shape {
                    op: "concat",
                    lhs: first.clone(),
                    rhs: s.to_vec(),
                });
            }
            meta.push((p, s[axis]));
            total += s[axis];
        }
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &(p, len) in &meta {
                let v = self.value(p).data();
                data.extend_from_slice(&v[o * len * inner..(o + 1) * len * inner]);
            }
        }
        let mut out = first;
        out[axis] = total;
        self.push("concat", out, data, Op::Concat { parts: meta, outer, inner }, parts)
    }

    /// Slice `[start, start + len)` along `axis`.
    pub fn narrow(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() || len == 0 || start + len > shape[axis] {
            return Err(Error::domain(
                "narrow",
                format!("range {start}..{} invalid for axis {axis} of {shape:?}", start + len),
            ));
        }
        let (outer, len_in, inner) = split_axis(&shape, axis);
        let xv = self.value(x).data();
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = o * len_in * inner + start * inner;
            data.extend_from_slice(&xv[base..base + len * inner]);
        }
        let mut out = shape;
        out[axis] = len;
        self.push(
            "narrow",
            out,
            data,
            Op::Narrow {
                x,
                outer,
                len_in,
                start,
                len,
                inner,
            },
            &[x],
        )
    }

    // ---- losses -------------------------------------------------------------

    /// Mean softmax cross-entropy of `[B, C]` logits against class labels.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let shape = self.shape(logits).to_vec();
        if shape.len() != 2 || shape[0] != labels.len() {
            return Err(Error::Shape {
                op: "cross_entropy",
                lhs: shape,
                rhs: vec![labels.len()],
            });
        }
        let (b, c) = (shape[0], shape[1]);
        if let Some(&bad) = labels.iter().find(|&&l| l >= c) {
            return Err(Error::domain(
                "cross_entropy",
                format!("label {bad} out of range for {c} classes"),
            ));
        }
        let lv = self.value(logits).data();
        let mut probs = vec![T::zero(); b * c];
        let mut total = T::zero();
        for r in 0..b {
            let row = &lv[r * c..(r + 1) * c];
            let mx = row.iter().copied().fold(T::neg_infinity(), T::max);
            let sum: T = row.iter().map(|&v| (v - mx).exp()).sum();
            let lse = mx + sum.ln();
            for j in 0..c {
                probs[r * c + j] = (row[j] - lse).exp();
            }
            total = total + (lse - row[labels[r]]);
        }
        let loss = total / T::from_usize(b).unwrap();
        self.push(
            "cross_entropy",
            vec![],
            vec![loss],
            Op::CrossEntropy {
                logits,
                probs,
                labels: labels.to_vec(),
                classes: c,
            },
            &[logits],
        )
    }

    // ---- backward -------------------------------------------------------------

    /// Reverse-mode accumulation from a scalar `loss`.
    ///
    /// A tape can be differentiated once; a second call is an error.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients<T>> {
        if self.differentiated {
            return Err(Error::BackwardTwice);
        }
        let lv = self.value(loss);
        if lv.numel() != 1 {
            return Err(Error::NotScalar(lv.shape().to_vec()));
        }
        if !self.nodes[loss.0].requires_grad {
            return Err(Error::Detached);
        }
        self.differentiated = true;

        let mut grads: Vec<Option<Vec<T>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![T::one()]);

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            self.propagate(idx, &g, &mut grads)?;
            grads[idx] = Some(g);
        }

        let grads = grads
            .into_iter()
            .enumerate()
            .map(|(i, g)| {
                g.map(|d| Tensor::from_parts(self.nodes[i].value.shape().to_vec(), d))
            })
            .collect();
        Ok(Gradients { grads })
    }

    fn propagate(&self, idx: usize, g: &[T], grads: &mut [Option<Vec<T>>]) -> Result<()> {
        let nodes = &self.nodes;
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [T])| {
            if !nodes[v.0].requires_grad {
                return;
            }
            let slot = grads[v.0].get_or_insert_with(|| vec![T::zero(); nodes[v.0].value.numel()]);
            f(slot);
        };
        let out = nodes[idx].value.data();
        match &nodes[idx].op {
            Op::Leaf => {}
            Op::Binary {
                op,
                a,
                b,
                map_a,
                map_b,
            } => {
                let av = nodes[a.0].value.data();
                let bv = nodes[b.0].value.data();
                acc(*a, &mut |ga| {
                    for (i, &gi) in g.iter().enumerate() {
                        let (ia, ib) = (map_a.get(i), map_b.get(i));
                        let d = match op {
                            BinaryOp::Add | BinaryOp::Sub => gi,
                            BinaryOp::Mul => gi * bv[ib],
                            BinaryOp::Div => gi / bv[ib],
                            BinaryOp::Pow => gi * bv[ib] * av[ia].powf(bv[ib] - T::one()),
                        };
                        ga[ia] = ga[ia] + d;
                    }
                });
                acc(*b, &mut |gb| {
                    for (i, &gi) in g.iter().enumerate() {
                        let (ia, ib) = (map_a.get(i), map_b.get(i));
                        let d = match op {
                            BinaryOp::Add => gi,
                            BinaryOp::Sub => -gi,
                            BinaryOp::Mul => gi * av[ia],
                            BinaryOp::Div => -gi * av[ia] / (bv[ib] * bv[ib]),
                            BinaryOp::Pow => {
                                if av[ia] > T::zero() {
                                    gi * out[i] * av[ia].ln()
                                } else {
                                    T::zero()
                                }
                            }
                        };
                        gb[ib] = gb[ib] + d;
                    }
                });
            }
            Op::Unary { op, x } => {
                let xv = nodes[x.0].value.data();
                acc(*x, &mut |gx| {
                    for i in 0..g.len() {
                        let d = match op {
                            UnaryOp::Neg => -g[i],
                            UnaryOp::Exp => g[i] * out[i],
                            UnaryOp::Log => g[i] / xv[i],
                            UnaryOp::Sqrt => g[i] / (out[i] + out[i]),
                            UnaryOp::Relu => {
                                if xv[i] > T::zero() {
                                    g[i]
                                } else {
                                    T::zero()
                                }
                            }
                            UnaryOp::Gelu => g[i] * gelu(xv[i]).1,
                        };
                        gx[i] = gx[i] + d;
                    }
                });
            }
            Op::MatMul {
                a,
                b,
                batch,
                m,
                k,
                n,
                shared_rhs,
            } => {
                let (m, k, n) = (*m, *k, *n);
                let av = nodes[a.0].value.data();
                let bv = nodes[b.0].value.data();
                acc(*a, &mut |ga| {
                    for i in 0..*batch {
                        let bo = if *shared_rhs { 0 } else { i * k * n };
                        // dA = dC . B^T
                        gemm_acc(
                            m,
                            n,
                            k,
                            &g[i * m * n..(i + 1) * m * n],
                            false,
                            &bv[bo..bo + k * n],
                            true,
                            &mut ga[i * m * k..(i + 1) * m * k],
                        );
                    }
                });
                acc(*b, &mut |gb| {
                    for i in 0..*batch {
                        let bo = if *shared_rhs { 0 } else { i * k * n };
                        // dB = A^T . dC
                        gemm_acc(
                            k,
                            m,
                            n,
                            &av[i * m * k..(i + 1) * m * k],
                            true,
                            &g[i * m * n..(i + 1) * m * n],
                            false,
                            &mut gb[bo..bo + k * n],
                        );
                    }
                });
            }
            Op::Softmax {
                x,
                outer,
                len,
                inner,
            } => {
                let (outer, len, inner) = (*outer, *len, *inner);
                acc(*x, &mut |gx| {
                    for o in 0..outer {
                        for i in 0..inner {
                            let at = |l: usize| o * len * inner + l * inner + i;
                            let dot: T = (0..len).map(|l| g[at(l)] * out[at(l)]).sum();
                            for l in 0..len {
                                gx[at(l)] = gx[at(l)] + out[at(l)] * (g[at(l)] - dot);
                            }
                        }
                    }
                });
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
                dim,
            } => {
                let dim = *dim;
                let rows = g.len() / dim;
                let gam = nodes[gamma.0].value.data();
                acc(*gamma, &mut |gg| {
                    for r in 0..rows {
                        for j in 0..dim {
                            gg[j] = gg[j] + g[r * dim + j] * xhat[r * dim + j];
                        }
                    }
                });
                acc(*beta, &mut |gb| {
                    for r in 0..rows {
                        for j in 0..dim {
                            gb[j] = gb[j] + g[r * dim + j];
                        }
                    }
                });
                let dt = T::from_usize(dim).unwrap();
                acc(*x, &mut |gx| {
                    for r in 0..rows {
                        let s = r * dim;
                        let mut m1 = T::zero();
                        let mut m2 = T::zero();
                        for j in 0..dim {
                            let gh = g[s + j] * gam[j];
                            m1 = m1 + gh;
                            m2 = m2 + gh * xhat[s + j];
                        }
                        m1 = m1 / dt;
                        m2 = m2 / dt;
                        for j in 0..dim {
                            let gh = g[s + j] * gam[j];
                            gx[s + j] = gx[s + j] + rstd[r] * (gh - m1 - xhat[s + j] * m2);
                        }
                    }
                });
            }
            Op::Reduce {
                x,
                outer,
                len,
                inner,
                scale,
            } => {
                let (outer, len, inner) = (*outer, *len, *inner);
                acc(*x, &mut |gx| {
                    for o in 0..outer {
                        for l in 0..len {
                            for i in 0..inner {
                                let at = o * len * inner + l * inner + i;
                                gx[at] = gx[at] + g[o * inner + i] * *scale;
                            }
                        }
                    }
                });
            }
            Op::Max { x, argmax } => {
                acc(*x, &mut |gx| {
                    for (j, &a) in argmax.iter().enumerate() {
                        gx[a] = gx[a] + g[j];
                    }
                });
            }
            Op::Reshape { x } => {
                acc(*x, &mut |gx| {
                    for (d, &s) in gx.iter_mut().zip(g) {
                        *d = *d + s;
                    }
                });
            }
            Op::Permute { x, offsets } => {
                acc(*x, &mut |gx| {
                    for (j, &o) in offsets.iter().enumerate() {
                        gx[o] = gx[o] + g[j];
                    }
                });
            }
            Op::Concat {
                parts,
                outer,
                inner,
            } => {
                let total: usize = parts.iter().map(|p| p.1).sum();
                let mut before = 0;
                for &(p, len) in parts {
                    acc(p, &mut |gp| {
                        for o in 0..*outer {
                            let src = o * total * inner + before * inner;
                            for t in 0..len * inner {
                                gp[o * len * inner + t] = gp[o * len * inner + t] + g[src + t];
                            }
                        }
                    });
                    before += len;
                }
            }
            Op::Narrow {
                x,
                outer,
                len_in,
                start,
                len,
                inner,
            } => {
                acc(*x, &mut |gx| {
                    for o in 0..*outer {
                        let dst = o * len_in * inner + start * inner;
                        for t in 0..len * inner {
                            gx[dst + t] = gx[dst + t] + g[o * len * inner + t];
                        }
                    }
                });
            }
            Op::CrossEntropy {
                logits,
                probs,
                labels,
                classes,
            } => {
                let b = labels.len();
                let scale = g[0] / T::from_usize(b).unwrap();
                acc(*logits, &mut |gl| {
                    for r in 0..b {
                        for j in 0..*classes {
                            let y = if labels[r] == j { T::one() } else { T::zero() };
                            gl[r * classes + j] = gl[r * classes + j] + (probs[r * classes + j] - y) * scale;
                        }
                    }
                });
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], v: &[f64]) -> Tensor<f64> {
        Tensor::new(shape.to_vec(), v.to_vec()).unwrap()
    }

    #[test]
    fn add_componentwise() {
        let mut tp = Tape::new();
        let a = tp.constant(t(&[2], &[1.0, 2.0]));
        let b = tp.constant(t(&[2], &[3.0, 4.0]));
        let c = tp.add(a, b).unwrap();
        assert_eq!(tp.value(c).data(), &[4.0, 6.0]);
    }

    #[test]
    fn mul_by_zero_gives_zero_grad() {
        let mut tp = Tape::new();
        let x = tp.param(t(&[3], &[1.0, -2.0, 5.0]));
        let y = tp.mul_scalar(x, 0.0).unwrap();
        assert!(tp.value(y).data().iter().all(|&v| v == 0.0));
        let s = tp.sum(y).unwrap();
        let g = tp.backward(s).unwrap();
        assert!(g.get(x).unwrap().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn matmul_identity_and_hand_case() {
        let mut tp = Tape::new();
        let i3 = tp.constant(t(&[3, 3], &[1., 0., 0., 0., 1., 0., 0., 0., 1.]));
        let x = tp.constant(t(&[3, 2], &[1., 2., 3., 4., 5., 6.]));
        let y = tp.matmul(i3, x).unwrap();
        assert_eq!(tp.value(y), tp.value(x));

        let a = tp.constant(t(&[2, 2], &[1., 2., 3., 4.]));
        let b = tp.constant(t(&[2, 1], &[5., 6.]));
        let c = tp.matmul(a, b).unwrap();
        assert_eq!(tp.value(c).data(), &[17.0, 39.0]);
    }

    #[test]
    fn matmul_rejects_inner_mismatch() {
        let mut tp = Tape::<f64>::new();
        let a = tp.constant(Tensor::zeros(&[2, 3]));
        let b = tp.constant(Tensor::zeros(&[2, 3]));
        assert!(matches!(tp.matmul(a, b), Err(Error::Shape { .. })));
    }

    #[test]
    fn softmax_cases() {
        let mut tp = Tape::new();
        let x = tp.constant(t(&[3], &[0.0, 0.0, 0.0]));
        let s = tp.softmax(x, 0).unwrap();
        for &v in tp.value(s).data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
        let x = tp.constant(t(&[3], &[1000.0, 0.0, 0.0]));
        let s = tp.softmax(x, 0).unwrap();
        let v = tp.value(s).data();
        assert!((v[0] - 1.0).abs() < 1e-12 && v[1] < 1e-300 + 1e-12);
    }

    #[test]
    fn layernorm_cases() {
        let mut tp = Tape::new();
        let g = tp.constant(Tensor::ones(&[2]));
        let b = tp.constant(Tensor::zeros(&[2]));
        let x = tp.constant(t(&[2], &[1.0, 3.0]));
        let y = tp.layernorm(x, g, b, 1e-12).unwrap();
        let v = tp.value(y).data();
        assert!((v[0] + 1.0).abs() < 1e-9 && (v[1] - 1.0).abs() < 1e-9);

        let g = tp.constant(Tensor::ones(&[4]));
        let b = tp.constant(Tensor::zeros(&[4]));
        let x = tp.constant(t(&[4], &[2.5; 4]));
        let y = tp.layernorm(x, g, b, 1e-5).unwrap();
        assert!(tp.value(y).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn backward_simple() {
        let mut tp = Tape::new();
        let x = tp.param(t(&[2], &[1.0, 2.0]));
        let s = tp.sum(x).unwrap();
        let g = tp.backward(s).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[1.0, 1.0]);

        let mut tp = Tape::new();
        let x = tp.param(t(&[2], &[1.0, 2.0]));
        let sq = tp.mul(x, x).unwrap();
        let s = tp.sum(sq).unwrap();
        let g = tp.backward(s).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[2.0, 4.0]);
        assert!(matches!(tp.backward(s), Err(Error::BackwardTwice)));
    }

    #[test]
    fn backward_errors() {
        let mut tp = Tape::new();
        let x = tp.param(t(&[2], &[1.0, 2.0]));
        assert!(matches!(tp.backward(x), Err(Error::NotScalar(_))));
        let c = tp.constant(Tensor::scalar(1.0));
        assert!(matches!(tp.backward(c), Err(Error::Detached)));
    }

    #[test]
    fn domain_errors_name_the_op() {
        let mut tp = Tape::new();
        let x = tp.constant(t(&[2], &[-1.0, 2.0]));
        assert!(matches!(tp.log(x), Err(Error::Domain { op: "log", .. })));
        assert!(matches!(tp.sqrt(x), Err(Error::Domain { op: "sqrt", .. })));
        let z = tp.constant(t(&[2], &[0.0, 2.0]));
        assert!(matches!(tp.div(x, z), Err(Error::Domain { op: "div", .. })));
        let big = tp.constant(t(&[1], &[1000.0]));
        assert!(matches!(tp.exp(big), Err(Error::NonFinite { op: "exp" })));
        let zero = tp.constant(t(&[1], &[0.0]));
        assert!(matches!(tp.log(zero), Err(Error::NonFinite { op: "log" })));
    }

    #[test]
    fn broadcast_rules() {
        let mut tp = Tape::new();
        let a = tp.constant(t(&[2, 3], &[1., 2., 3., 4., 5., 6.]));
        let row = tp.constant(t(&[3], &[10., 20., 30.]));
        let col = tp.constant(t(&[2, 1], &[100., 200.]));
        let r = tp.add(a, row).unwrap();
        assert_eq!(tp.value(r).data(), &[11., 22., 33., 14., 25., 36.]);
        let c = tp.add(a, col).unwrap();
        assert_eq!(tp.value(c).data(), &[101., 102., 103., 204., 205., 206.]);
        let bad = tp.constant(t(&[2], &[1., 2.]));
        assert!(tp.add(a, bad).is_err());
    }

    #[test]
    fn permute_concat_narrow_roundtrip() {
        let mut tp = Tape::new();
        let x = tp.constant(Tensor::from_fn(&[2, 3, 4], |i| i as f64));
        let p = tp.permute(x, &[2, 0, 1]).unwrap();
        assert_eq!(tp.shape(p), &[4, 2, 3]);
        assert_eq!(tp.value(p).at(&[3, 1, 2]), tp.value(x).at(&[1, 2, 3]));
        let a = tp.narrow(x, 1, 0, 1).unwrap();
        let b = tp.narrow(x, 1, 1, 2).unwrap();
        let c = tp.concat(&[a, b], 1).unwrap();
        assert_eq!(tp.value(c), tp.value(x));
    }

    #[test]
    fn cross_entropy_uniform_is_log_c() {
        let mut tp = Tape::new();
        let l = tp.constant(Tensor::<f64>::zeros(&[2, 5]));
        let ce = tp.cross_entropy(l, &[0, 3]).unwrap();
        assert!((tp.value(ce).item().unwrap() - 5f64.ln()).abs() < 1e-12);
        assert!(tp.cross_entropy(l, &[0, 5]).is_err());
    }
}
