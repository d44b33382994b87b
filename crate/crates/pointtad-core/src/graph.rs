//! Reverse-mode automatic differentiation over dense tensors.
//!
//! Operations are recorded on a topologically ordered tape ([`Graph`]); each
//! node owns its forward value. [`Graph::backward`] replays the tape in
//! reverse, propagating vector-Jacobian products through a scratch buffer and
//! accumulating the result into the `grad` slot of every `requires_grad`
//! node. Repeated backward calls accumulate additively until
//! [`Graph::zero_grads`] is called.

use alloc::vec;
use alloc::vec::Vec;

use crate::tensor::{for_each_lane, Tensor, TensorError};

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Neg(Var),
    Scale(Var, f64),
    Offset(Var),
    Matmul(Var, Var),
    Transpose(Var),
    Relu(Var),
    Abs(Var),
    Clamp { x: Var, lo: f64, hi: f64 },
    Softmax { x: Var, axis: usize },
    LogSoftmax { x: Var, axis: usize },
    LayerNorm { x: Var, gain: Var, bias: Var, axis: usize, eps: f64 },
    Concat { xs: Vec<Var>, axis: usize },
    Gather { x: Var, indices: Vec<usize> },
    Reshape(Var),
    Sum(Var),
    Mean(Var),
    MinAll(Var),
    MaxAll(Var),
    Min2(Var, Var),
    Max2(Var, Var),
    MulScalar { x: Var, s: Var },
    BilinearInterp { x: Var, t: Var },
    AddRow { x: Var, row: Var },
    BceWithLogitsMean { logits: Var, targets: Vec<f64> },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
    grad: Option<Vec<f64>>,
}

/// Computation tape. Nodes are appended in forward order, so the insertion
/// order is already a topological order of the DAG.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

impl Graph {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node { value, op, requires_grad: false, grad: None });
        Var(self.nodes.len() - 1)
    }

    /// Registers an input tensor. Gradients are reported only for nodes
    /// created with `requires_grad = true`.
    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op: Op::Leaf, requires_grad, grad: None });
        Var(self.nodes.len() - 1)
    }

    /// Constant input (no gradient reporting).
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn scalar(&mut self, value: f64) -> Var {
        self.constant(Tensor::scalar(value))
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// Accumulated gradient of a `requires_grad` node, if backward has run.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].grad.as_deref()
    }

    pub fn zero_grads(&mut self) {
        for node in &mut self.nodes {
            node.grad = None;
        }
    }

    fn data(&self, v: Var) -> &[f64] {
        self.nodes[v.0].value.data()
    }

    fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<(), TensorError> {
        if self.shape(a) != self.shape(b) {
            return Err(TensorError::ShapeMismatch {
                op,
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(b).to_vec(),
            });
        }
        Ok(())
    }

    // ── Elementwise and scalar ops ──────────────────────────────────────

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.same_shape("add", a, b)?;
        let data: Vec<f64> =
            self.data(a).iter().zip(self.data(b)).map(|(x, y)| x + y).collect();
        let t = Tensor::from_vec(self.shape(a).to_vec(), data)?;
        Ok(self.push(t, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.same_shape("sub", a, b)?;
        let data: Vec<f64> =
            self.data(a).iter().zip(self.data(b)).map(|(x, y)| x - y).collect();
        let t = Tensor::from_vec(self.shape(a).to_vec(), data)?;
        Ok(self.push(t, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.same_shape("mul", a, b)?;
        let data: Vec<f64> =
            self.data(a).iter().zip(self.data(b)).map(|(x, y)| x * y).collect();
        let t = Tensor::from_vec(self.shape(a).to_vec(), data)?;
        Ok(self.push(t, Op::Mul(a, b)))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.same_shape("div", a, b)?;
        let data: Vec<f64> =
            self.data(a).iter().zip(self.data(b)).map(|(x, y)| x / y).collect();
        let t = Tensor::from_vec(self.shape(a).to_vec(), data)?;
        Ok(self.push(t, Op::Div(a, b)))
    }

    pub fn neg(&mut self, x: Var) -> Var {
        let data: Vec<f64> = self.data(x).iter().map(|v| -v).collect();
        let t = Tensor::from_vec(self.shape(x).to_vec(), data).expect("same shape");
        self.push(t, Op::Neg(x))
    }

    /// Multiplies by a compile-time constant.
    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let data: Vec<f64> = self.data(x).iter().map(|v| v * c).collect();
        let t = Tensor::from_vec(self.shape(x).to_vec(), data).expect("same shape");
        self.push(t, Op::Scale(x, c))
    }

    /// Adds a constant to every element.
    pub fn offset(&mut self, x: Var, c: f64) -> Var {
        let data: Vec<f64> = self.data(x).iter().map(|v| v + c).collect();
        let t = Tensor::from_vec(self.shape(x).to_vec(), data).expect("same shape");
        self.push(t, Op::Offset(x))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let data: Vec<f64> = self.data(x).iter().map(|v| v.max(0.0)).collect();
        let t = Tensor::from_vec(self.shape(x).to_vec(), data).expect("same shape");
        self.push(t, Op::Relu(x))
    }

    pub fn abs(&mut self, x: Var) -> Var {
        let data: Vec<f64> = self.data(x).iter().map(|v| if *v < 0.0 { -v } else { *v }).collect();
        let t = Tensor::from_vec(self.shape(x).to_vec(), data).expect("same shape");
        self.push(t, Op::Abs(x))
    }

    /// Clamps every element to `[lo, hi]`; gradient is zero outside.
    pub fn clamp(&mut self, x: Var, lo: f64, hi: f64) -> Var {
        let data: Vec<f64> = self.data(x).iter().map(|v| v.max(lo).min(hi)).collect();
        let t = Tensor::from_vec(self.shape(x).to_vec(), data).expect("same shape");
        self.push(t, Op::Clamp { x, lo, hi })
    }

    /// Elementwise minimum; ties route the gradient to the first operand.
    pub fn min2(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.same_shape("min2", a, b)?;
        let data: Vec<f64> =
            self.data(a).iter().zip(self.data(b)).map(|(x, y)| if x <= y { *x } else { *y }).collect();
        let t = Tensor::from_vec(self.shape(a).to_vec(), data)?;
        Ok(self.push(t, Op::Min2(a, b)))
    }

    /// Elementwise maximum; ties route the gradient to the first operand.
    pub fn max2(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.same_shape("max2", a, b)?;
        let data: Vec<f64> =
            self.data(a).iter().zip(self.data(b)).map(|(x, y)| if x >= y { *x } else { *y }).collect();
        let t = Tensor::from_vec(self.shape(a).to_vec(), data)?;
        Ok(self.push(t, Op::Max2(a, b)))
    }

    // ── Linear algebra ──────────────────────────────────────────────────

    /// 2-D matrix product `[m×k] × [k×n] → [m×n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(TensorError::ShapeMismatch {
                op: "matmul",
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            });
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let out = matmul_raw(self.data(a), self.data(b), m, k, n);
        let t = Tensor::from_vec(vec![m, n], out)?;
        Ok(self.push(t, Op::Matmul(a, b)))
    }

    /// 2-D transpose.
    pub fn transpose(&mut self, x: Var) -> Result<Var, TensorError> {
        let s = self.shape(x);
        if s.len() != 2 {
            return Err(TensorError::BadAxis { op: "transpose", axis: 1, rank: s.len() });
        }
        let (r, c) = (s[0], s[1]);
        let out = transpose_raw(self.data(x), r, c);
        let t = Tensor::from_vec(vec![c, r], out)?;
        Ok(self.push(t, Op::Transpose(x)))
    }

    // ── Normalizations ──────────────────────────────────────────────────

    /// Softmax along `axis`, numerically stabilized by max subtraction.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var, TensorError> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(TensorError::BadAxis { op: "softmax", axis, rank: shape.len() });
        }
        let src = self.data(x);
        let mut out = vec![0.0; src.len()];
        let extent = shape[axis];
        for_each_lane(&shape, axis, |start, stride| {
            let mut m = f64::NEG_INFINITY;
            for k in 0..extent {
                m = m.max(src[start + k * stride]);
            }
            let mut total = 0.0;
            for k in 0..extent {
                let e = libm::exp(src[start + k * stride] - m);
                out[start + k * stride] = e;
                total += e;
            }
            for k in 0..extent {
                out[start + k * stride] /= total;
            }
        });
        let t = Tensor::from_vec(shape, out)?;
        Ok(self.push(t, Op::Softmax { x, axis }))
    }

    /// Log-softmax along `axis` (stable; used for cross-entropy).
    pub fn log_softmax(&mut self, x: Var, axis: usize) -> Result<Var, TensorError> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(TensorError::BadAxis { op: "log_softmax", axis, rank: shape.len() });
        }
        let src = self.data(x);
        let mut out = vec![0.0; src.len()];
        let extent = shape[axis];
        for_each_lane(&shape, axis, |start, stride| {
            let mut m = f64::NEG_INFINITY;
            for k in 0..extent {
                m = m.max(src[start + k * stride]);
            }
            let mut total = 0.0;
            for k in 0..extent {
                total += libm::exp(src[start + k * stride] - m);
            }
            let lse = m + libm::log(total);
            for k in 0..extent {
                out[start + k * stride] = src[start + k * stride] - lse;
            }
        });
        let t = Tensor::from_vec(shape, out)?;
        Ok(self.push(t, Op::LogSoftmax { x, axis }))
    }

    /// Layer normalization along `axis` with learnable gain/bias vectors of
    /// length `shape[axis]`. Uses the biased variance and `eps` inside the
    /// square root.
    pub fn layer_norm(
        &mut self,
        x: Var,
        gain: Var,
        bias: Var,
        axis: usize,
        eps: f64,
    ) -> Result<Var, TensorError> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(TensorError::BadAxis { op: "layer_norm", axis, rank: shape.len() });
        }
        let extent = shape[axis];
        if self.data(gain).len() != extent {
            return Err(TensorError::ShapeMismatch {
                op: "layer_norm",
                lhs: shape,
                rhs: self.shape(gain).to_vec(),
            });
        }
        if self.data(bias).len() != extent {
            return Err(TensorError::ShapeMismatch {
                op: "layer_norm",
                lhs: shape,
                rhs: self.shape(bias).to_vec(),
            });
        }
        let src = self.data(x);
        let g = self.data(gain).to_vec();
        let b = self.data(bias).to_vec();
        let mut out = vec![0.0; src.len()];
        for_each_lane(&shape, axis, |start, stride| {
            let mut mean = 0.0;
            for k in 0..extent {
                mean += src[start + k * stride];
            }
            mean /= extent as f64;
            let mut var = 0.0;
            for k in 0..extent {
                let d = src[start + k * stride] - mean;
                var += d * d;
            }
            var /= extent as f64;
            let inv = 1.0 / libm::sqrt(var + eps);
            for k in 0..extent {
                let xh = (src[start + k * stride] - mean) * inv;
                out[start + k * stride] = xh * g[k] + b[k];
            }
        });
        let t = Tensor::from_vec(shape, out)?;
        Ok(self.push(t, Op::LayerNorm { x, gain, bias, axis, eps }))
    }

    // ── Shape manipulation ──────────────────────────────────────────────

    /// Concatenates tensors along `axis`; all other extents must match.
    pub fn concat(&mut self, xs: &[Var], axis: usize) -> Result<Var, TensorError> {
        if xs.is_empty() {
            return Err(TensorError::Empty { op: "concat" });
        }
        let first = self.shape(xs[0]).to_vec();
        if axis >= first.len() {
            return Err(TensorError::BadAxis { op: "concat", axis, rank: first.len() });
        }
        let mut axis_total = 0;
        for &v in xs {
            let s = self.shape(v);
            if s.len() != first.len()
                || s.iter().enumerate().any(|(d, &e)| d != axis && e != first[d])
            {
                return Err(TensorError::ShapeMismatch {
                    op: "concat",
                    lhs: first,
                    rhs: s.to_vec(),
                });
            }
            axis_total += s[axis];
        }
        let mut out_shape = first.clone();
        out_shape[axis] = axis_total;
        let outer: usize = first[..axis].iter().product();
        let inner: usize = first[axis + 1..].iter().product();
        let mut out = vec![0.0; out_shape.iter().product()];
        let mut offset = 0;
        for &v in xs {
            let e = self.shape(v)[axis];
            let src = self.data(v);
            for o in 0..outer {
                for k in 0..e {
                    let dst_base = (o * axis_total + offset + k) * inner;
                    let src_base = (o * e + k) * inner;
                    out[dst_base..dst_base + inner]
                        .copy_from_slice(&src[src_base..src_base + inner]);
                }
            }
            offset += e;
        }
        let t = Tensor::from_vec(out_shape, out)?;
        Ok(self.push(t, Op::Concat { xs: xs.to_vec(), axis }))
    }

    /// Picks flat elements by index into a 1-D tensor. Duplicate indices are
    /// allowed; their gradients accumulate.
    pub fn gather(&mut self, x: Var, indices: &[usize]) -> Result<Var, TensorError> {
        let src = self.data(x);
        let mut out = Vec::with_capacity(indices.len());
        for &i in indices {
            if i >= src.len() {
                return Err(TensorError::IndexOutOfBounds { index: i, len: src.len() });
            }
            out.push(src[i]);
        }
        let t = Tensor::from_vec(vec![indices.len()], out)?;
        Ok(self.push(t, Op::Gather { x, indices: indices.to_vec() }))
    }

    /// Reinterprets the buffer with a new shape of equal element count.
    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var, TensorError> {
        let expected: usize = shape.iter().product();
        if expected != self.data(x).len() {
            return Err(TensorError::LengthMismatch { expected, got: self.data(x).len() });
        }
        let t = Tensor::from_vec(shape.to_vec(), self.data(x).to_vec())?;
        Ok(self.push(t, Op::Reshape(x)))
    }

    // ── Reductions ──────────────────────────────────────────────────────

    pub fn sum(&mut self, x: Var) -> Var {
        let s: f64 = self.data(x).iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(x))
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.data(x).len().max(1) as f64;
        let s: f64 = self.data(x).iter().sum();
        self.push(Tensor::scalar(s / n), Op::Mean(x))
    }

    /// Minimum over all elements; subgradient flows to the first argmin.
    pub fn min_all(&mut self, x: Var) -> Result<Var, TensorError> {
        if self.data(x).is_empty() {
            return Err(TensorError::Empty { op: "min_all" });
        }
        let m = self.data(x).iter().cloned().fold(f64::INFINITY, f64::min);
        Ok(self.push(Tensor::scalar(m), Op::MinAll(x)))
    }

    /// Maximum over all elements; subgradient flows to the first argmax.
    pub fn max_all(&mut self, x: Var) -> Result<Var, TensorError> {
        if self.data(x).is_empty() {
            return Err(TensorError::Empty { op: "max_all" });
        }
        let m = self.data(x).iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        Ok(self.push(Tensor::scalar(m), Op::MaxAll(x)))
    }

    // ── Broadcast helpers ───────────────────────────────────────────────

    /// Multiplies every element of `x` by the scalar tensor `s`.
    pub fn mul_scalar(&mut self, x: Var, s: Var) -> Result<Var, TensorError> {
        if self.data(s).len() != 1 {
            return Err(TensorError::NotScalar { op: "mul_scalar", shape: self.shape(s).to_vec() });
        }
        let sv = self.data(s)[0];
        let data: Vec<f64> = self.data(x).iter().map(|v| v * sv).collect();
        let t = Tensor::from_vec(self.shape(x).to_vec(), data)?;
        Ok(self.push(t, Op::MulScalar { x, s }))
    }

    /// Adds a length-`n` row vector to every row of an `m×n` matrix.
    pub fn add_row(&mut self, x: Var, row: Var) -> Result<Var, TensorError> {
        let s = self.shape(x).to_vec();
        if s.len() != 2 || self.data(row).len() != s[1] {
            return Err(TensorError::ShapeMismatch {
                op: "add_row",
                lhs: s,
                rhs: self.shape(row).to_vec(),
            });
        }
        let (m, n) = (s[0], s[1]);
        let r = self.data(row).to_vec();
        let mut out = self.data(x).to_vec();
        for i in 0..m {
            for j in 0..n {
                out[i * n + j] += r[j];
            }
        }
        let t = Tensor::from_vec(vec![m, n], out)?;
        Ok(self.push(t, Op::AddRow { x, row }))
    }

    // ── Interpolation ───────────────────────────────────────────────────

    /// Linear interpolation between rows of a `[T×D]` tensor at fractional
    /// row position `t` (a scalar node). Positions are clamped to
    /// `[0, T-1]`; the gradient w.r.t. `t` is zero in the clamped region.
    pub fn bilinear_interp_1d(&mut self, x: Var, t: Var) -> Result<Var, TensorError> {
        let s = self.shape(x).to_vec();
        if s.len() != 2 || s[0] == 0 {
            return Err(TensorError::ShapeMismatch {
                op: "bilinear_interp_1d",
                lhs: s,
                rhs: vec![],
            });
        }
        if self.data(t).len() != 1 {
            return Err(TensorError::NotScalar {
                op: "bilinear_interp_1d",
                shape: self.shape(t).to_vec(),
            });
        }
        let (rows, cols) = (s[0], s[1]);
        let tv = self.data(t)[0];
        let tc = tv.max(0.0).min((rows - 1) as f64);
        let i0 = libm::floor(tc) as usize;
        let i1 = (i0 + 1).min(rows - 1);
        let f = tc - i0 as f64;
        let src = self.data(x);
        let mut out = Vec::with_capacity(cols);
        for d in 0..cols {
            out.push((1.0 - f) * src[i0 * cols + d] + f * src[i1 * cols + d]);
        }
        let t_out = Tensor::from_vec(vec![cols], out)?;
        Ok(self.push(t_out, Op::BilinearInterp { x, t }))
    }

    // ── Fused losses ────────────────────────────────────────────────────

    /// Mean binary cross-entropy between `sigmoid(logits)` and constant
    /// targets, computed in the numerically stable logit form.
    pub fn bce_with_logits_mean(
        &mut self,
        logits: Var,
        targets: &Tensor,
    ) -> Result<Var, TensorError> {
        if self.shape(logits) != targets.shape() {
            return Err(TensorError::ShapeMismatch {
                op: "bce_with_logits_mean",
                lhs: self.shape(logits).to_vec(),
                rhs: targets.shape().to_vec(),
            });
        }
        let z = self.data(logits);
        let y = targets.data();
        let n = z.len().max(1) as f64;
        let mut total = 0.0;
        for (zi, yi) in z.iter().zip(y) {
            // softplus(z) - z*y, with softplus in overflow-safe form
            total += zi.max(0.0) - zi * yi + libm::log(1.0 + libm::exp(-libm::fabs(*zi)));
        }
        let out = Tensor::scalar(total / n);
        Ok(self.push(out, Op::BceWithLogitsMean { logits, targets: y.to_vec() }))
    }

    // ── Backward pass ───────────────────────────────────────────────────

    /// Reverse sweep from a scalar loss. Accumulates into the `grad` buffer
    /// of every reachable `requires_grad` node; intermediate gradients are
    /// scratch and discarded.
    pub fn backward(&mut self, loss: Var) -> Result<(), TensorError> {
        if self.data(loss).len() != 1 {
            return Err(TensorError::NotScalar {
                op: "backward",
                shape: self.shape(loss).to_vec(),
            });
        }
        let n = self.nodes.len();
        let mut pass: Vec<Option<Vec<f64>>> = vec![None; n];
        pass[loss.0] = Some(vec![1.0]);

        for i in (0..n).rev() {
            let Some(g) = pass[i].take() else { continue };
            if self.nodes[i].requires_grad {
                match &mut self.nodes[i].grad {
                    Some(acc) => {
                        for (a, b) in acc.iter_mut().zip(&g) {
                            *a += b;
                        }
                    }
                    None => self.nodes[i].grad = Some(g.clone()),
                }
            }
            let op = self.nodes[i].op.clone();
            self.backward_op(i, &op, &g, &mut pass);
        }
        Ok(())
    }

    fn accum(&self, pass: &mut [Option<Vec<f64>>], v: Var, contrib: &[f64]) {
        match &mut pass[v.0] {
            Some(acc) => {
                for (a, b) in acc.iter_mut().zip(contrib) {
                    *a += b;
                }
            }
            None => pass[v.0] = Some(contrib.to_vec()),
        }
    }

    fn backward_op(&mut self, out_idx: usize, op: &Op, g: &[f64], pass: &mut [Option<Vec<f64>>]) {
        match op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.accum(pass, *a, g);
                self.accum(pass, *b, g);
            }
            Op::Sub(a, b) => {
                self.accum(pass, *a, g);
                let neg: Vec<f64> = g.iter().map(|v| -v).collect();
                self.accum(pass, *b, &neg);
            }
            Op::Mul(a, b) => {
                let da: Vec<f64> = g.iter().zip(self.data(*b)).map(|(gi, bv)| gi * bv).collect();
                let db: Vec<f64> = g.iter().zip(self.data(*a)).map(|(gi, av)| gi * av).collect();
                self.accum(pass, *a, &da);
                self.accum(pass, *b, &db);
            }
            Op::Div(a, b) => {
                let bd = self.data(*b);
                let ad = self.data(*a);
                let da: Vec<f64> = g.iter().zip(bd).map(|(gi, bv)| gi / bv).collect();
                let db: Vec<f64> = g
                    .iter()
                    .zip(ad.iter().zip(bd))
                    .map(|(gi, (av, bv))| -gi * av / (bv * bv))
                    .collect();
                self.accum(pass, *a, &da);
                self.accum(pass, *b, &db);
            }
            Op::Neg(x) => {
                let dx: Vec<f64> = g.iter().map(|v| -v).collect();
                self.accum(pass, *x, &dx);
            }
            Op::Scale(x, c) => {
                let dx: Vec<f64> = g.iter().map(|v| v * c).collect();
                self.accum(pass, *x, &dx);
            }
            Op::Offset(x) => {
                self.accum(pass, *x, g);
            }
            Op::Matmul(a, b) => {
                let (m, k) = (self.shape(*a)[0], self.shape(*a)[1]);
                let n2 = self.shape(*b)[1];
                // dA = g · Bᵀ ; dB = Aᵀ · g
                let bt = transpose_raw(self.data(*b), k, n2);
                let da = matmul_raw(g, &bt, m, n2, k);
                let at = transpose_raw(self.data(*a), m, k);
                let db = matmul_raw(&at, g, k, m, n2);
                self.accum(pass, *a, &da);
                self.accum(pass, *b, &db);
            }
            Op::Transpose(x) => {
                let s = self.shape(*x);
                let dx = transpose_raw(g, s[1], s[0]);
                self.accum(pass, *x, &dx);
            }
            Op::Relu(x) => {
                let dx: Vec<f64> = g
                    .iter()
                    .zip(self.data(*x))
                    .map(|(gi, xv)| if *xv > 0.0 { *gi } else { 0.0 })
                    .collect();
                self.accum(pass, *x, &dx);
            }
            Op::Abs(x) => {
                let dx: Vec<f64> = g
                    .iter()
                    .zip(self.data(*x))
                    .map(|(gi, xv)| {
                        if *xv > 0.0 {
                            *gi
                        } else if *xv < 0.0 {
                            -gi
                        } else {
                            0.0
                        }
                    })
                    .collect();
                self.accum(pass, *x, &dx);
            }
            Op::Clamp { x, lo, hi } => {
                let dx: Vec<f64> = g
                    .iter()
                    .zip(self.data(*x))
                    .map(|(gi, xv)| if *xv >= *lo && *xv <= *hi { *gi } else { 0.0 })
                    .collect();
                self.accum(pass, *x, &dx);
            }
            Op::Softmax { x, axis } => {
                let shape = self.shape(*x).to_vec();
                let y = self.nodes[out_idx].value.data().to_vec();
                let extent = shape[*axis];
                let mut dx = vec![0.0; y.len()];
                for_each_lane(&shape, *axis, |start, stride| {
                    let mut dot = 0.0;
                    for k in 0..extent {
                        let idx = start + k * stride;
                        dot += g[idx] * y[idx];
                    }
                    for k in 0..extent {
                        let idx = start + k * stride;
                        dx[idx] = y[idx] * (g[idx] - dot);
                    }
                });
                self.accum(pass, *x, &dx);
            }
            Op::LogSoftmax { x, axis } => {
                let shape = self.shape(*x).to_vec();
                let y = self.nodes[out_idx].value.data().to_vec();
                let extent = shape[*axis];
                let mut dx = vec![0.0; y.len()];
                for_each_lane(&shape, *axis, |start, stride| {
                    let mut gsum = 0.0;
                    for k in 0..extent {
                        gsum += g[start + k * stride];
                    }
                    for k in 0..extent {
                        let idx = start + k * stride;
                        dx[idx] = g[idx] - libm::exp(y[idx]) * gsum;
                    }
                });
                self.accum(pass, *x, &dx);
            }
            Op::LayerNorm { x, gain, bias, axis, eps } => {
                let shape = self.shape(*x).to_vec();
                let extent = shape[*axis];
                let src = self.data(*x).to_vec();
                let gv = self.data(*gain).to_vec();
                let mut dx = vec![0.0; src.len()];
                let mut dgain = vec![0.0; extent];
                let mut dbias = vec![0.0; extent];
                for_each_lane(&shape, *axis, |start, stride| {
                    let mut mean = 0.0;
                    for k in 0..extent {
                        mean += src[start + k * stride];
                    }
                    mean /= extent as f64;
                    let mut var = 0.0;
                    for k in 0..extent {
                        let d = src[start + k * stride] - mean;
                        var += d * d;
                    }
                    var /= extent as f64;
                    let inv = 1.0 / libm::sqrt(var + eps);
                    // xh = normalized input; dxh = upstream through the gain
                    let mut dxh = vec![0.0; extent];
                    let mut xh = vec![0.0; extent];
                    let mut m_dxh = 0.0;
                    let mut m_dxh_xh = 0.0;
                    for k in 0..extent {
                        let idx = start + k * stride;
                        xh[k] = (src[idx] - mean) * inv;
                        dxh[k] = g[idx] * gv[k];
                        dgain[k] += g[idx] * xh[k];
                        dbias[k] += g[idx];
                        m_dxh += dxh[k];
                        m_dxh_xh += dxh[k] * xh[k];
                    }
                    m_dxh /= extent as f64;
                    m_dxh_xh /= extent as f64;
                    for k in 0..extent {
                        dx[start + k * stride] = inv * (dxh[k] - m_dxh - xh[k] * m_dxh_xh);
                    }
                });
                self.accum(pass, *x, &dx);
                self.accum(pass, *gain, &dgain);
                self.accum(pass, *bias, &dbias);
            }
            Op::Concat { xs, axis } => {
                let out_shape = self.nodes[out_idx].value.shape().to_vec();
                let outer: usize = out_shape[..*axis].iter().product();
                let inner: usize = out_shape[*axis + 1..].iter().product();
                let axis_total = out_shape[*axis];
                let mut offset = 0;
                for &v in xs {
                    let e = self.shape(v)[*axis];
                    let mut dv = vec![0.0; self.data(v).len()];
                    for o in 0..outer {
                        for k in 0..e {
                            let src_base = (o * axis_total + offset + k) * inner;
                            let dst_base = (o * e + k) * inner;
                            dv[dst_base..dst_base + inner]
                                .copy_from_slice(&g[src_base..src_base + inner]);
                        }
                    }
                    self.accum(pass, v, &dv);
                    offset += e;
                }
            }
            Op::Gather { x, indices } => {
                let mut dx = vec![0.0; self.data(*x).len()];
                for (k, &i) in indices.iter().enumerate() {
                    dx[i] += g[k];
                }
                self.accum(pass, *x, &dx);
            }
            Op::Reshape(x) => {
                self.accum(pass, *x, g);
            }
            Op::Sum(x) => {
                let dx = vec![g[0]; self.data(*x).len()];
                self.accum(pass, *x, &dx);
            }
            Op::Mean(x) => {
                let n = self.data(*x).len().max(1) as f64;
                let dx = vec![g[0] / n; self.data(*x).len()];
                self.accum(pass, *x, &dx);
            }
            Op::MinAll(x) => {
                let src = self.data(*x);
                let mut best = 0;
                for (k, v) in src.iter().enumerate() {
                    if *v < src[best] {
                        best = k;
                    }
                }
                let mut dx = vec![0.0; src.len()];
                dx[best] = g[0];
                self.accum(pass, *x, &dx);
            }
            Op::MaxAll(x) => {
                let src = self.data(*x);
                let mut best = 0;
                for (k, v) in src.iter().enumerate() {
                    if *v > src[best] {
                        best = k;
                    }
                }
                let mut dx = vec![0.0; src.len()];
                dx[best] = g[0];
                self.accum(pass, *x, &dx);
            }
            Op::Min2(a, b) => {
                let (ad, bd) = (self.data(*a), self.data(*b));
                let mut da = vec![0.0; ad.len()];
                let mut db = vec![0.0; bd.len()];
                for k in 0..ad.len() {
                    if ad[k] <= bd[k] {
                        da[k] = g[k];
                    } else {
                        db[k] = g[k];
                    }
                }
                self.accum(pass, *a, &da);
                self.accum(pass, *b, &db);
            }
            Op::Max2(a, b) => {
                let (ad, bd) = (self.data(*a), self.data(*b));
                let mut da = vec![0.0; ad.len()];
                let mut db = vec![0.0; bd.len()];
                for k in 0..ad.len() {
                    if ad[k] >= bd[k] {
                        da[k] = g[k];
                    } else {
                        db[k] = g[k];
                    }
                }
                self.accum(pass, *a, &da);
                self.accum(pass, *b, &db);
            }
            Op::MulScalar { x, s } => {
                let sv = self.data(*s)[0];
                let dx: Vec<f64> = g.iter().map(|v| v * sv).collect();
                let ds: f64 = g.iter().zip(self.data(*x)).map(|(gi, xv)| gi * xv).sum();
                self.accum(pass, *x, &dx);
                self.accum(pass, *s, &[ds]);
            }
            Op::BilinearInterp { x, t } => {
                let s = self.shape(*x);
                let (rows, cols) = (s[0], s[1]);
                let tv = self.data(*t)[0];
                let tc = tv.max(0.0).min((rows - 1) as f64);
                let i0 = libm::floor(tc) as usize;
                let i1 = (i0 + 1).min(rows - 1);
                let f = tc - i0 as f64;
                let mut dx = vec![0.0; rows * cols];
                for d in 0..cols {
                    dx[i0 * cols + d] += (1.0 - f) * g[d];
                    dx[i1 * cols + d] += f * g[d];
                }
                let clamped = tv < 0.0 || tv > (rows - 1) as f64;
                let dt = if clamped {
                    0.0
                } else {
                    let src = self.data(*x);
                    let mut acc = 0.0;
                    for d in 0..cols {
                        acc += (src[i1 * cols + d] - src[i0 * cols + d]) * g[d];
                    }
                    acc
                };
                self.accum(pass, *x, &dx);
                self.accum(pass, *t, &[dt]);
            }
            Op::AddRow { x, row } => {
                let s = self.shape(*x);
                let (m, n2) = (s[0], s[1]);
                let mut drow = vec![0.0; n2];
                for i in 0..m {
                    for j in 0..n2 {
                        drow[j] += g[i * n2 + j];
                    }
                }
                self.accum(pass, *x, g);
                self.accum(pass, *row, &drow);
            }
            Op::BceWithLogitsMean { logits, targets } => {
                let z = self.data(*logits);
                let n = z.len().max(1) as f64;
                let dz: Vec<f64> = z
                    .iter()
                    .zip(targets)
                    .map(|(zi, yi)| {
                        let sig = 1.0 / (1.0 + libm::exp(-zi));
                        g[0] * (sig - yi) / n
                    })
                    .collect();
                self.accum(pass, *logits, &dz);
            }
        }
    }
}

/// Row-major matrix product used by forward and backward paths.
pub(crate) fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            let orow = &mut out[i * n..(i + 1) * n];
            for j in 0..n {
                orow[j] += av * brow[j];
            }
        }
    }
    out
}

pub(crate) fn transpose_raw(x: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; rows * cols];
    for i in 0..rows {
        for j in 0..cols {
            out[j * rows + i] = x[i * cols + j];
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    #[test]
    fn matmul_identity() {
        let mut g = Graph::new();
        let i2 = g.constant(Tensor::matrix(&[&[1.0, 0.0], &[0.0, 1.0]]).unwrap());
        let out = g.matmul(i2, i2).unwrap();
        assert_eq!(g.value(out).data(), &[1.0, 0.0, 0.0, 1.0]);
    }

    #[test]
    fn matmul_hand_computed() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::matrix(&[&[1.0, 2.0], &[3.0, 4.0]]).unwrap());
        let b = g.constant(Tensor::matrix(&[&[1.0], &[1.0]]).unwrap());
        let out = g.matmul(a, b).unwrap();
        assert_eq!(g.value(out).shape(), &[2, 1]);
        assert_eq!(g.value(out).data(), &[3.0, 7.0]);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::zeros(&[2, 3]));
        let b = g.constant(Tensor::zeros(&[2, 3]));
        let err = g.matmul(a, b).unwrap_err();
        match err {
            TensorError::ShapeMismatch { lhs, rhs, .. } => {
                assert_eq!(lhs, vec![2, 3]);
                assert_eq!(rhs, vec![2, 3]);
            }
            other => panic!("unexpected error {other:?}"),
        }
    }

    #[test]
    fn softmax_symmetry_and_hand_value() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::vector(&[0.0, 0.0, 0.0, 0.0]));
        let y = g.softmax(x, 0).unwrap();
        for v in g.value(y).data() {
            assert!((v - 0.25).abs() < 1e-15);
        }
        let x2 = g.constant(Tensor::vector(&[0.0, libm::log(3.0)]));
        let y2 = g.softmax(x2, 0).unwrap();
        assert!((g.value(y2).data()[0] - 0.25).abs() < 1e-12);
        assert!((g.value(y2).data()[1] - 0.75).abs() < 1e-12);
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let mut g = Graph::new();
        let x = g.constant(
            Tensor::matrix(&[&[3.0, -1.0, 0.5], &[10.0, 10.0, -30.0]]).unwrap(),
        );
        let y = g.softmax(x, 1).unwrap();
        for i in 0..2 {
            let s: f64 = g.value(y).row(i).iter().sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn layer_norm_constant_vector_is_zero() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::vector(&[4.0, 4.0, 4.0]));
        let gain = g.constant(Tensor::vector(&[1.0, 1.0, 1.0]));
        let bias = g.constant(Tensor::vector(&[0.0, 0.0, 0.0]));
        let y = g.layer_norm(x, gain, bias, 0, 1e-6).unwrap();
        for v in g.value(y).data() {
            assert!(v.abs() < 1e-9);
        }
    }

    #[test]
    fn layer_norm_two_point_lane() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::vector(&[1.0, 3.0]));
        let gain = g.constant(Tensor::vector(&[1.0, 1.0]));
        let bias = g.constant(Tensor::vector(&[0.0, 0.0]));
        let y = g.layer_norm(x, gain, bias, 0, 1e-12).unwrap();
        assert!((g.value(y).data()[0] + 1.0).abs() < 1e-6);
        assert!((g.value(y).data()[1] - 1.0).abs() < 1e-6);
    }

    #[test]
    fn relu_and_linear_zero_weight() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::vector(&[-1.0, 2.0]));
        let y = g.relu(x);
        assert_eq!(g.value(y).data(), &[0.0, 2.0]);

        // linear with zero weights returns the broadcast bias
        let xm = g.constant(Tensor::matrix(&[&[1.0, 2.0], &[3.0, 4.0]]).unwrap());
        let w = g.constant(Tensor::zeros(&[2, 3]));
        let b = g.constant(Tensor::vector(&[5.0, 6.0, 7.0]));
        let mm = g.matmul(xm, w).unwrap();
        let out = g.add_row(mm, b).unwrap();
        assert_eq!(g.value(out).data(), &[5.0, 6.0, 7.0, 5.0, 6.0, 7.0]);
    }

    #[test]
    fn concat_shapes() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::zeros(&[2, 3]));
        let b = g.constant(Tensor::zeros(&[2, 5]));
        let out = g.concat(&[a, b], 1).unwrap();
        assert_eq!(g.value(out).shape(), &[2, 8]);
    }

    #[test]
    fn bilinear_interp_examples() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::matrix(&[&[0.0], &[10.0], &[20.0]]).unwrap());
        // lattice point
        let t2 = g.scalar(2.0);
        let y2 = g.bilinear_interp_1d(x, t2).unwrap();
        assert_eq!(g.value(y2).data(), &[20.0]);
        // interpolated point between rows 0 and 1
        let t03 = g.scalar(0.3);
        let y03 = g.bilinear_interp_1d(x, t03).unwrap();
        assert!((g.value(y03).data()[0] - 3.0).abs() < 1e-12);
        // clamped below
        let tneg = g.scalar(-5.0);
        let yneg = g.bilinear_interp_1d(x, tneg).unwrap();
        assert_eq!(g.value(yneg).data(), &[0.0]);
    }

    #[test]
    fn backward_sum_is_ones() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::vector(&[1.0, -2.0, 3.0]), true);
        let loss = g.sum(x);
        g.backward(loss).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn backward_sum_of_squares() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::vector(&[1.0, 2.0]), true);
        let sq = g.mul(x, x).unwrap();
        let loss = g.sum(sq);
        g.backward(loss).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[2.0, 4.0]);
    }

    #[test]
    fn backward_requires_scalar_loss() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::vector(&[1.0, 2.0]), true);
        assert!(matches!(g.backward(x), Err(TensorError::NotScalar { .. })));
    }

    #[test]
    fn repeated_backward_accumulates() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::vector(&[1.0, 2.0]), true);
        let loss = g.sum(x);
        g.backward(loss).unwrap();
        g.backward(loss).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[2.0, 2.0]);
        g.zero_grads();
        assert!(g.grad(x).is_none());
    }

    #[test]
    fn shared_subexpression_matches_expanded_graph() {
        // loss = (x*x) + (x*x) via a shared node
        let mut g = Graph::new();
        let x = g.leaf(Tensor::vector(&[3.0]), true);
        let sq = g.mul(x, x).unwrap();
        let twice = g.add(sq, sq).unwrap();
        let loss = g.sum(twice);
        g.backward(loss).unwrap();
        let shared = g.grad(x).unwrap()[0];

        // same loss with the square built twice
        let mut g2 = Graph::new();
        let x2 = g2.leaf(Tensor::vector(&[3.0]), true);
        let sq_a = g2.mul(x2, x2).unwrap();
        let sq_b = g2.mul(x2, x2).unwrap();
        let twice2 = g2.add(sq_a, sq_b).unwrap();
        let loss2 = g2.sum(twice2);
        g2.backward(loss2).unwrap();
        assert_eq!(shared, g2.grad(x2).unwrap()[0]);
        assert_eq!(shared, 12.0);
    }

    #[test]
    fn bce_with_logits_at_zero_is_ln2() {
        let mut g = Graph::new();
        let z = g.constant(Tensor::zeros(&[2, 3]));
        let y = Tensor::zeros(&[2, 3]);
        let loss = g.bce_with_logits_mean(z, &y).unwrap();
        assert!((g.value(loss).item().unwrap() - libm::log(2.0)).abs() < 1e-12);
    }
}
