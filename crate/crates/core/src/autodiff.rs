//! Reverse-mode automatic differentiation over a dynamically recorded tape.
//!
//! A [`Graph`] owns every value computed during a forward pass. Operations
//! append nodes, so node order is a topological order and `backward` is a
//! single reverse sweep that visits each node once. Precision is fixed by the
//! element type chosen when the graph is built.

use crate::error::{Error, Result};
use crate::tensor::{matmul_kernel, transpose_kernel, Real, Tensor};

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_K: f64 = 0.044_715;

#[derive(Debug)]
enum Op<T> {
    Leaf,
    Add(Var, Var),
    AddBias(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    MatMul(Var, Var),
    /// a · bᵀ
    MatMulT(Var, Var),
    Transpose(Var),
    Reshape(Var),
    Slice { x: Var, axis: usize, start: usize },
    Concat { xs: Vec<Var>, axis: usize },
    SelectRows { x: Var, rows: Vec<usize> },
    Sum(Var),
    Mean(Var),
    Softmax { x: Var, axis: usize },
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        rstd: Vec<T>,
    },
    Gelu(Var),
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        probs: Vec<T>,
    },
}

impl<T> Op<T> {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Add(..) => "add",
            Op::AddBias(..) => "add_bias",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::MatMul(..) => "matmul",
            Op::MatMulT(..) => "matmul_t",
            Op::Transpose(..) => "transpose",
            Op::Reshape(..) => "reshape",
            Op::Slice { .. } => "slice",
            Op::Concat { .. } => "concat",
            Op::SelectRows { .. } => "select_rows",
            Op::Sum(..) => "sum",
            Op::Mean(..) => "mean",
            Op::Softmax { .. } => "softmax",
            Op::LayerNorm { .. } => "layernorm",
            Op::Gelu(..) => "gelu",
            Op::CrossEntropy { .. } => "cross_entropy",
        }
    }

    fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Leaf => vec![],
            Op::Add(a, b) | Op::AddBias(a, b) | Op::Mul(a, b) | Op::MatMul(a, b) | Op::MatMulT(a, b) => {
                vec![*a, *b]
            }
            Op::Scale(a, _) | Op::Transpose(a) | Op::Reshape(a) | Op::Sum(a) | Op::Mean(a) | Op::Gelu(a) => {
                vec![*a]
            }
            Op::Slice { x, .. } | Op::SelectRows { x, .. } | Op::Softmax { x, .. } => vec![*x],
            Op::Concat { xs, .. } => xs.clone(),
            Op::LayerNorm { x, gamma, beta, .. } => vec![*x, *gamma, *beta],
            Op::CrossEntropy { logits, .. } => vec![*logits],
        }
    }
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

#[derive(Debug, Default)]
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
}

/// Leaf gradients produced by [`Graph::backward`].
#[derive(Debug)]
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Real> Gradients<T> {
    /// Gradient of `v`, or `None` when the root does not depend on it.
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradient of `v` with zeros standing in for "no dependence".
    pub fn wrt(&self, v: Var, shape: &[usize]) -> Tensor<T> {
        self.get(v).cloned().unwrap_or_else(|| Tensor::zeros(shape))
    }
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
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

    /// Trainable leaf.
    pub fn param(&mut self, t: Tensor<T>) -> Var {
        self.leaf(t, true)
    }

    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.leaf(t, false)
    }

    fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>) -> Result<Var> {
        if !value.all_finite() {
            return Err(Error::NonFinite { op: op.name() });
        }
        let requires_grad = op.inputs().iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(Error::Shape {
                op,
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            });
        }
        Ok(())
    }

    fn matrix_dims(&self, op: &'static str, v: Var) -> Result<(usize, usize)> {
        match self.shape(v) {
            [r, c] => Ok((*r, *c)),
            s => Err(Error::Shape {
                op,
                lhs: s.to_vec(),
                rhs: vec![],
            }),
        }
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let (x, y) = (self.value(a), self.value(b));
        let data = x.data().iter().zip(y.data()).map(|(&p, &q)| p + q).collect();
        let out = Tensor::from_parts(x.shape().to_vec(), data);
        self.push(out, Op::Add(a, b))
    }

    /// `x + bias` with `bias` broadcast over every leading index of `x`.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let n = *self.shape(x).last().unwrap_or(&0);
        if self.shape(bias) != [n] {
            return Err(Error::Shape {
                op: "add_bias",
                lhs: self.shape(x).to_vec(),
                rhs: self.shape(bias).to_vec(),
            });
        }
        let b = self.value(bias).data();
        let xv = self.value(x);
        let data = xv
            .data()
            .iter()
            .enumerate()
            .map(|(i, &v)| v + b[i % n])
            .collect();
        let out = Tensor::from_parts(xv.shape().to_vec(), data);
        self.push(out, Op::AddBias(x, bias))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let (x, y) = (self.value(a), self.value(b));
        let data = x.data().iter().zip(y.data()).map(|(&p, &q)| p * q).collect();
        let out = Tensor::from_parts(x.shape().to_vec(), data);
        self.push(out, Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: Var, s: T) -> Result<Var> {
        let out = self.value(a).map(|v| v * s);
        self.push(out, Op::Scale(a, s))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.matrix_dims("matmul", a)?;
        let (k2, n) = self.matrix_dims("matmul", b)?;
        if k != k2 {
            return Err(Error::Shape {
                op: "matmul",
                lhs: vec![m, k],
                rhs: vec![k2, n],
            });
        }
        let c = matmul_kernel(self.value(a).data(), self.value(b).data(), m, k, n);
        self.push(Tensor::from_parts(vec![m, n], c), Op::MatMul(a, b))
    }

    /// `a · bᵀ` for a (m×k) and b (n×k); the shape of a linear layer with
    /// weights stored as (out × in).
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.matrix_dims("matmul_t", a)?;
        let (n, k2) = self.matrix_dims("matmul_t", b)?;
        if k != k2 {
            return Err(Error::Shape {
                op: "matmul_t",
                lhs: vec![m, k],
                rhs: vec![n, k2],
            });
        }
        let (av, bv) = (self.value(a).data(), self.value(b).data());
        let mut c = vec![T::zero(); m * n];
        for i in 0..m {
            let arow = &av[i * k..(i + 1) * k];
            for j in 0..n {
                let brow = &bv[j * k..(j + 1) * k];
                c[i * n + j] = arow.iter().zip(brow).fold(T::zero(), |s, (&p, &q)| s + p * q);
            }
        }
        self.push(Tensor::from_parts(vec![m, n], c), Op::MatMulT(a, b))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let (r, c) = self.matrix_dims("transpose", a)?;
        let data = transpose_kernel(self.value(a).data(), r, c);
        self.push(Tensor::from_parts(vec![c, r], data), Op::Transpose(a))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(a).reshaped(shape)?;
        self.push(out, Op::Reshape(a))
    }

    /// Contiguous range `[start, start+len)` along `axis`.
    pub fn slice(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let t = self.value(x);
        if axis >= t.shape().len() || len == 0 || start + len > t.shape()[axis] {
            return Err(Error::invalid(format!(
                "slice [{start}, {}) on axis {axis} of {:?}",
                start + len,
                t.shape()
            )));
        }
        let (outer, extent, inner) = t.axis_split(axis);
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = o * extent * inner + start * inner;
            data.extend_from_slice(&t.data()[base..base + len * inner]);
        }
        let mut shape = t.shape().to_vec();
        shape[axis] = len;
        self.push(Tensor::from_parts(shape, data), Op::Slice { x, axis, start })
    }

    pub fn concat(&mut self, xs: &[Var], axis: usize) -> Result<Var> {
        let first = *xs.first().ok_or_else(|| Error::invalid("concat of nothing"))?;
        let base_shape = self.shape(first).to_vec();
        if axis >= base_shape.len() {
            return Err(Error::invalid(format!("concat axis {axis} of {base_shape:?}")));
        }
        let mut total = 0;
        for &v in xs {
            let s = self.shape(v);
            let compatible = s.len() == base_shape.len()
                && s.iter()
                    .zip(&base_shape)
                    .enumerate()
                    .all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                return Err(Error::Shape {
                    op: "concat",
                    lhs: base_shape,
                    rhs: s.to_vec(),
                });
            }
            total += s[axis];
        }
        let outer: usize = base_shape[..axis].iter().product();
        let inner: usize = base_shape[axis + 1..].iter().product();
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &v in xs {
                let t = self.value(v);
                let chunk = t.shape()[axis] * inner;
                data.extend_from_slice(&t.data()[o * chunk..(o + 1) * chunk]);
            }
        }
        let mut shape = base_shape;
        shape[axis] = total;
        self.push(
            Tensor::from_parts(shape, data),
            Op::Concat {
                xs: xs.to_vec(),
                axis,
            },
        )
    }

    /// Gathers rows (first-axis entries) of `x`; indices may repeat.
    pub fn select_rows(&mut self, x: Var, rows: &[usize]) -> Result<Var> {
        let t = self.value(x);
        let n = t.shape()[0];
        if rows.is_empty() || rows.iter().any(|&r| r >= n) {
            return Err(Error::invalid(format!("select_rows {rows:?} from {n} rows")));
        }
        let width = t.len() / n;
        let mut data = Vec::with_capacity(rows.len() * width);
        for &r in rows {
            data.extend_from_slice(&t.data()[r * width..(r + 1) * width]);
        }
        let mut shape = t.shape().to_vec();
        shape[0] = rows.len();
        self.push(
            Tensor::from_parts(shape, data),
            Op::SelectRows {
                x,
                rows: rows.to_vec(),
            },
        )
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s = self.value(a).sum_all();
        self.push(Tensor::scalar(s), Op::Sum(a))
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        let m = t.sum_all() / T::of(t.len() as f64);
        self.push(Tensor::scalar(m), Op::Mean(a))
    }

    /// Softmax along `axis`, computed with max subtraction.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let t = self.value(x);
        if axis >= t.shape().len() {
            return Err(Error::invalid(format!("softmax axis {axis} of {:?}", t.shape())));
        }
        let out = softmax_along(t, axis);
        self.push(out, Op::Softmax { x, axis })
    }

    /// Layer normalization over the last axis with biased variance.
    pub fn layernorm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        if eps <= 0.0 {
            return Err(Error::invalid("layernorm eps must be positive"));
        }
        let t = self.value(x);
        let d = t.cols();
        if self.shape(gamma) != [d] || self.shape(beta) != [d] {
            return Err(Error::Shape {
                op: "layernorm",
                lhs: t.shape().to_vec(),
                rhs: self.shape(gamma).to_vec(),
            });
        }
        let (g, b) = (self.value(gamma).data(), self.value(beta).data());
        let rows = t.len() / d;
        let dn = T::of(d as f64);
        let eps = T::of(eps);
        let mut xhat = Vec::with_capacity(t.len());
        let mut rstd = Vec::with_capacity(rows);
        let mut out = Vec::with_capacity(t.len());
        for r in 0..rows {
            let row = &t.data()[r * d..(r + 1) * d];
            let mu = row.iter().copied().sum::<T>() / dn;
            let var = row.iter().map(|&v| (v - mu) * (v - mu)).sum::<T>() / dn;
            let rs = T::one() / (var + eps).sqrt();
            rstd.push(rs);
            for (j, &v) in row.iter().enumerate() {
                let h = (v - mu) * rs;
                xhat.push(h);
                out.push(g[j] * h + b[j]);
            }
        }
        let value = Tensor::from_parts(t.shape().to_vec(), out);
        self.push(
            value,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
        )
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).map(gelu_scalar);
        self.push(out, Op::Gelu(x))
    }

    /// Mean cross-entropy of `logits` (B×K) against class indices.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let (b, k) = self.matrix_dims("cross_entropy", logits)?;
        if targets.len() != b {
            return Err(Error::Shape {
                op: "cross_entropy",
                lhs: vec![b, k],
                rhs: vec![targets.len()],
            });
        }
        if let Some(&bad) = targets.iter().find(|&&t| t >= k) {
            return Err(Error::invalid(format!("target {bad} out of range for {k} classes")));
        }
        let probs = softmax_along(self.value(logits), 1).into_data();
        let t = self.value(logits).data();
        let mut total = T::zero();
        for (i, &c) in targets.iter().enumerate() {
            let row = &t[i * k..(i + 1) * k];
            let m = row.iter().copied().fold(T::neg_infinity(), T::max);
            let lse = m + row.iter().map(|&v| (v - m).exp()).sum::<T>().ln();
            total = total + (lse - row[c]);
        }
        let loss = total / T::of(b as f64);
        self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
            },
        )
    }

    /// Gradients of a scalar `root` with respect to every trainable leaf.
    pub fn backward(&self, root: Var) -> Result<Gradients<T>> {
        if !self.value(root).is_scalar() {
            return Err(Error::invalid(format!(
                "backward root must be scalar, got shape {:?}",
                self.shape(root)
            )));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(Tensor::ones(self.shape(root)));

        for i in (0..=root.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            for (input, contrib) in self.local_grads(node, &g) {
                if !self.nodes[input.0].requires_grad {
                    continue;
                }
                match &mut grads[input.0] {
                    Some(acc) => acc.add_assign(&contrib),
                    slot @ None => *slot = Some(contrib),
                }
            }
        }
        Ok(Gradients { grads })
    }

    /// Vector-Jacobian products for each input of `node` given its output gradient.
    fn local_grads(&self, node: &Node<T>, g: &Tensor<T>) -> Vec<(Var, Tensor<T>)> {
        let val = |v: Var| &self.nodes[v.0].value;
        let wants = |v: Var| self.nodes[v.0].requires_grad;
        match &node.op {
            Op::Leaf => vec![],
            Op::Add(a, b) => vec![(*a, g.clone()), (*b, g.clone())],
            Op::AddBias(x, bias) => {
                let n = val(*bias).len();
                let mut gb = vec![T::zero(); n];
                for (i, &v) in g.data().iter().enumerate() {
                    gb[i % n] = gb[i % n] + v;
                }
                vec![(*x, g.clone()), (*bias, Tensor::from_parts(vec![n], gb))]
            }
            Op::Mul(a, b) => {
                let ga = zip_map(g, val(*b), |p, q| p * q);
                let gb = zip_map(g, val(*a), |p, q| p * q);
                vec![(*a, ga), (*b, gb)]
            }
            Op::Scale(a, s) => vec![(*a, g.map(|v| v * *s))],
            Op::MatMul(a, b) => {
                let (m, k) = (val(*a).rows(), val(*a).cols());
                let n = val(*b).cols();
                let mut out = Vec::new();
                if wants(*a) {
                    let bt = transpose_kernel(val(*b).data(), k, n);
                    out.push((*a, Tensor::from_parts(vec![m, k], matmul_kernel(g.data(), &bt, m, n, k))));
                }
                if wants(*b) {
                    let at = transpose_kernel(val(*a).data(), m, k);
                    out.push((*b, Tensor::from_parts(vec![k, n], matmul_kernel(&at, g.data(), k, m, n))));
                }
                out
            }
            Op::MatMulT(a, b) => {
                // C = A·Bᵀ: dA = dC·B, dB = dCᵀ·A
                let (m, k) = (val(*a).rows(), val(*a).cols());
                let n = val(*b).rows();
                let mut out = Vec::new();
                if wants(*a) {
                    out.push((*a, Tensor::from_parts(vec![m, k], matmul_kernel(g.data(), val(*b).data(), m, n, k))));
                }
                if wants(*b) {
                    let gt = transpose_kernel(g.data(), m, n);
                    out.push((*b, Tensor::from_parts(vec![n, k], matmul_kernel(&gt, val(*a).data(), n, m, k))));
                }
                out
            }
            Op::Transpose(a) => {
                let (r, c) = (g.rows(), g.cols());
                vec![(*a, Tensor::from_parts(vec![c, r], transpose_kernel(g.data(), r, c)))]
            }
            Op::Reshape(a) => {
                vec![(*a, Tensor::from_parts(val(*a).shape().to_vec(), g.data().to_vec()))]
            }
            Op::Slice { x, axis, start } => {
                let src = val(*x);
                let (outer, extent, inner) = src.axis_split(*axis);
                let len = g.shape()[*axis];
                let mut gx = vec![T::zero(); src.len()];
                for o in 0..outer {
                    let dst = o * extent * inner + start * inner;
                    let from = o * len * inner;
                    gx[dst..dst + len * inner].copy_from_slice(&g.data()[from..from + len * inner]);
                }
                vec![(*x, Tensor::from_parts(src.shape().to_vec(), gx))]
            }
            Op::Concat { xs, axis } => {
                let outer: usize = g.shape()[..*axis].iter().product();
                let inner: usize = g.shape()[*axis + 1..].iter().product();
                let total = g.shape()[*axis];
                let mut offset = 0;
                let mut out = Vec::with_capacity(xs.len());
                for &v in xs {
                    let t = val(v);
                    let len = t.shape()[*axis];
                    let mut gv = Vec::with_capacity(t.len());
                    for o in 0..outer {
                        let base = (o * total + offset) * inner;
                        gv.extend_from_slice(&g.data()[base..base + len * inner]);
                    }
                    offset += len;
                    out.push((v, Tensor::from_parts(t.shape().to_vec(), gv)));
                }
                out
            }
            Op::SelectRows { x, rows } => {
                let src = val(*x);
                let width = src.len() / src.shape()[0];
                let mut gx = vec![T::zero(); src.len()];
                for (i, &r) in rows.iter().enumerate() {
                    for j in 0..width {
                        gx[r * width + j] = gx[r * width + j] + g.data()[i * width + j];
                    }
                }
                vec![(*x, Tensor::from_parts(src.shape().to_vec(), gx))]
            }
            Op::Sum(a) => vec![(*a, Tensor::full(val(*a).shape(), g.item()))],
            Op::Mean(a) => {
                let n = T::of(val(*a).len() as f64);
                vec![(*a, Tensor::full(val(*a).shape(), g.item() / n))]
            }
            Op::Softmax { x, axis } => {
                let y = &node.value;
                let (outer, extent, inner) = y.axis_split(*axis);
                let mut gx = vec![T::zero(); y.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let idx = |t: usize| (o * extent + t) * inner + i;
                        let dot = (0..extent).fold(T::zero(), |s, t| s + g.data()[idx(t)] * y.data()[idx(t)]);
                        for t in 0..extent {
                            gx[idx(t)] = y.data()[idx(t)] * (g.data()[idx(t)] - dot);
                        }
                    }
                }
                vec![(*x, Tensor::from_parts(y.shape().to_vec(), gx))]
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let d = val(*gamma).len();
                let gam = val(*gamma).data();
                let rows = g.len() / d;
                let dn = T::of(d as f64);
                let mut gx = vec![T::zero(); g.len()];
                let mut gg = vec![T::zero(); d];
                let mut gb = vec![T::zero(); d];
                for r in 0..rows {
                    let gr = &g.data()[r * d..(r + 1) * d];
                    let hr = &xhat[r * d..(r + 1) * d];
                    let mut mean_dh = T::zero();
                    let mut mean_dh_h = T::zero();
                    for j in 0..d {
                        gg[j] = gg[j] + gr[j] * hr[j];
                        gb[j] = gb[j] + gr[j];
                        let dh = gr[j] * gam[j];
                        mean_dh = mean_dh + dh;
                        mean_dh_h = mean_dh_h + dh * hr[j];
                    }
                    mean_dh = mean_dh / dn;
                    mean_dh_h = mean_dh_h / dn;
                    for j in 0..d {
                        let dh = gr[j] * gam[j];
                        gx[r * d + j] = rstd[r] * (dh - mean_dh - hr[j] * mean_dh_h);
                    }
                }
                vec![
                    (*x, Tensor::from_parts(g.shape().to_vec(), gx)),
                    (*gamma, Tensor::from_parts(vec![d], gg)),
                    (*beta, Tensor::from_parts(vec![d], gb)),
                ]
            }
            Op::Gelu(x) => {
                let gx = zip_map(g, val(*x), |gv, xv| gv * gelu_grad_scalar(xv));
                vec![(*x, gx)]
            }
            Op::CrossEntropy {
                logits,
                targets,
                probs,
            } => {
                let shape = val(*logits).shape();
                let (b, k) = (shape[0], shape[1]);
                let scale = g.item() / T::of(b as f64);
                let mut gl: Vec<T> = probs.iter().map(|&p| p * scale).collect();
                for (i, &c) in targets.iter().enumerate() {
                    gl[i * k + c] = gl[i * k + c] - scale;
                }
                vec![(*logits, Tensor::from_parts(vec![b, k], gl))]
            }
        }
    }
}

fn zip_map<T: Real>(a: &Tensor<T>, b: &Tensor<T>, f: impl Fn(T, T) -> T) -> Tensor<T> {
    let data = a.data().iter().zip(b.data()).map(|(&p, &q)| f(p, q)).collect();
    Tensor::from_parts(a.shape().to_vec(), data)
}

pub fn gelu_scalar<T: Real>(x: T) -> T {
    let c = T::of(GELU_C);
    let k = T::of(GELU_K);
    let half = T::of(0.5);
    half * x * (T::one() + (c * (x + k * x * x * x)).tanh())
}

fn gelu_grad_scalar<T: Real>(x: T) -> T {
    let c = T::of(GELU_C);
    let k = T::of(GELU_K);
    let half = T::of(0.5);
    let th = (c * (x + k * x * x * x)).tanh();
    half * (T::one() + th) + half * x * (T::one() - th * th) * c * (T::one() + T::of(3.0) * k * x * x)
}

/// Numerically stable softmax along `axis` (plain function, no recording).
pub fn softmax_along<T: Real>(t: &Tensor<T>, axis: usize) -> Tensor<T> {
    let (outer, extent, inner) = t.axis_split(axis);
    let src = t.data();
    let mut out = vec![T::zero(); t.len()];
    for o in 0..outer {
        for i in 0..inner {
            let idx = |k: usize| (o * extent + k) * inner + i;
            let m = (0..extent).map(|k| src[idx(k)]).fold(T::neg_infinity(), T::max);
            let mut z = T::zero();
            for k in 0..extent {
                let e = (src[idx(k)] - m).exp();
                out[idx(k)] = e;
                z = z + e;
            }
            for k in 0..extent {
                out[idx(k)] = out[idx(k)] / z;
            }
        }
    }
    Tensor::from_parts(t.shape().to_vec(), out)
}
