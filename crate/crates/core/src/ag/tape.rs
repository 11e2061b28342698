use std::sync::Arc;

use super::edges::EdgeIndex;
use super::tensor::{gemm, Tensor};
use crate::error::{Error, Result};

/// Handle to a node recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    AddRow(Var, Var),
    Mul(Var, Var),
    Affine(Var, f64),
    MulScalar(Var, Var),
    MulCol(Var, Var),
    MulConst(Var, Arc<Tensor>),
    Concat(Vec<Var>),
    Gather(Var, Arc<Vec<usize>>),
    Relu(Var),
    LeakyRelu(Var, f64),
    Sigmoid(Var),
    SoftmaxGroup(Var, Arc<Vec<usize>>),
    LayerNorm {
        x: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Mse(Var, Arc<Tensor>),
    SumSq(Vec<Var>),
    Sum(Var),
    NeighborSum {
        values: Var,
        weights: Option<Var>,
        index: Arc<EdgeIndex>,
    },
    NeighborMix {
        values: Var,
        weights: Var,
        index: Arc<EdgeIndex>,
    },
    EdgeDot {
        q: Var,
        k: Var,
        index: Arc<EdgeIndex>,
    },
    PairwiseSqDist(Var, Var),
    DotConst(Var, Arc<Tensor>),
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Linear record of a forward computation for reverse-mode differentiation.
///
/// Nodes are appended in execution order, so a reverse sweep over the
/// record visits every node after all of its consumers. A tape supports a
/// single [`Tape::backward`] call.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    consumed: bool,
}

/// Gradients produced by [`Tape::backward`], indexed by node.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, var: Var) -> Option<&Tensor> {
        self.grads.get(var.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, var: Var) -> Option<Tensor> {
        self.grads.get_mut(var.0).and_then(Option::take)
    }
}

fn check_finite(op: &'static str, t: &Tensor) -> Result<()> {
    if t.is_finite() {
        Ok(())
    } else {
        Err(Error::NonFinite { op })
    }
}

fn shape_err(op: &'static str, a: &Tensor, b: &Tensor) -> Error {
    Error::Shape {
        op,
        lhs: a.shape().to_vec(),
        rhs: b.shape().to_vec(),
    }
}

fn grad_buf<'g>(grads: &'g mut [Option<Tensor>], var: Var, like: &Tensor) -> &'g mut [f64] {
    grads[var.0]
        .get_or_insert_with(|| Tensor::zeros(like.rows(), like.cols()))
        .data_mut()
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, op: &'static str, value: Tensor, node_op: Op, needs_grad: bool) -> Result<Var> {
        if self.consumed {
            return Err(Error::Usage(format!("{op} recorded after backward")));
        }
        check_finite(op, &value)?;
        self.nodes.push(Node {
            value,
            op: node_op,
            needs_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// A differentiable input (model parameter).
    pub fn variable(&mut self, t: Tensor) -> Result<Var> {
        self.push("variable", t, Op::Leaf, true)
    }

    /// A non-differentiable input.
    pub fn constant(&mut self, t: Tensor) -> Result<Var> {
        self.push("constant", t, Op::Leaf, false)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.cols() != tb.rows() {
            return Err(shape_err("matmul", ta, tb));
        }
        let (m, k, n) = (ta.rows(), ta.cols(), tb.cols());
        let mut out = vec![0.0; m * n];
        gemm(ta.data(), m, k, false, tb.data(), k, n, false, &mut out, false);
        let ng = self.ng(a) || self.ng(b);
        self.push("matmul", Tensor::matrix(m, n, out)?, Op::MatMul(a, b), ng)
    }

    fn zip_same(&mut self, op: &'static str, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        let (ta, tb) = (self.value(a), self.value(b));
        if !ta.same_shape(tb) {
            return Err(shape_err(op, ta, tb));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::matrix(ta.rows(), ta.cols(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip_same("add", a, b, |x, y| x + y)?;
        let ng = self.ng(a) || self.ng(b);
        self.push("add", out, Op::Add(a, b), ng)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip_same("sub", a, b, |x, y| x - y)?;
        let ng = self.ng(a) || self.ng(b);
        self.push("sub", out, Op::Sub(a, b), ng)
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip_same("mul", a, b, |x, y| x * y)?;
        let ng = self.ng(a) || self.ng(b);
        self.push("mul", out, Op::Mul(a, b), ng)
    }

    /// Adds a `1 x c` row to every row of an `n x c` matrix.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (ta, tr) = (self.value(a), self.value(row));
        if tr.rows() != 1 || tr.cols() != ta.cols() {
            return Err(shape_err("add_row", ta, tr));
        }
        let c = ta.cols();
        let mut data = ta.data().to_vec();
        for chunk in data.chunks_mut(c.max(1)) {
            for (v, b) in chunk.iter_mut().zip(tr.data()) {
                *v += b;
            }
        }
        let out = Tensor::matrix(ta.rows(), c, data)?;
        let ng = self.ng(a) || self.ng(row);
        self.push("add_row", out, Op::AddRow(a, row), ng)
    }

    /// `k * a + b` for constants `k` and `b`.
    pub fn affine(&mut self, a: Var, k: f64, b: f64) -> Result<Var> {
        let out = self.value(a).map(|x| k * x + b);
        let ng = self.ng(a);
        self.push("affine", out, Op::Affine(a, k), ng)
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Result<Var> {
        self.affine(a, k, 0.0)
    }

    /// Multiplies every entry by a `1 x 1` node.
    pub fn mul_scalar(&mut self, a: Var, s: Var) -> Result<Var> {
        let (ta, ts) = (self.value(a), self.value(s));
        if ts.len() != 1 {
            return Err(shape_err("mul_scalar", ta, ts));
        }
        let k = ts.item();
        let out = ta.map(|x| x * k);
        let ng = self.ng(a) || self.ng(s);
        self.push("mul_scalar", out, Op::MulScalar(a, s), ng)
    }

    /// Scales row `i` of an `n x c` matrix by entry `i` of an `n x 1` column.
    pub fn mul_col(&mut self, a: Var, col: Var) -> Result<Var> {
        let (ta, tc) = (self.value(a), self.value(col));
        if tc.cols() != 1 || tc.rows() != ta.rows() {
            return Err(shape_err("mul_col", ta, tc));
        }
        let c = ta.cols();
        let mut data = ta.data().to_vec();
        for (i, chunk) in data.chunks_mut(c.max(1)).enumerate() {
            let k = tc.data()[i];
            chunk.iter_mut().for_each(|v| *v *= k);
        }
        let out = Tensor::matrix(ta.rows(), c, data)?;
        let ng = self.ng(a) || self.ng(col);
        self.push("mul_col", out, Op::MulCol(a, col), ng)
    }

    /// Elementwise product with a constant tensor (masks, dropout).
    pub fn mul_const(&mut self, a: Var, c: Arc<Tensor>) -> Result<Var> {
        let ta = self.value(a);
        if !ta.same_shape(&c) {
            return Err(shape_err("mul_const", ta, &c));
        }
        let data = ta.data().iter().zip(c.data()).map(|(x, y)| x * y).collect();
        let out = Tensor::matrix(ta.rows(), ta.cols(), data)?;
        let ng = self.ng(a);
        self.push("mul_const", out, Op::MulConst(a, c), ng)
    }

    /// Column-wise concatenation of matrices with equal row counts.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let rows = parts
            .first()
            .map(|&p| self.value(p).rows())
            .ok_or_else(|| Error::Usage("concat of zero tensors".into()))?;
        for &p in parts {
            if self.value(p).rows() != rows {
                return Err(shape_err("concat_cols", self.value(parts[0]), self.value(p)));
            }
        }
        let total: usize = parts.iter().map(|&p| self.value(p).cols()).sum();
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for &p in parts {
                data.extend_from_slice(self.value(p).row(r));
            }
        }
        let ng = parts.iter().any(|&p| self.ng(p));
        let out = Tensor::matrix(rows, total, data)?;
        self.push("concat_cols", out, Op::Concat(parts.to_vec()), ng)
    }

    /// Rows of `a` selected by `idx` (repetition allowed).
    pub fn gather_rows(&mut self, a: Var, idx: Arc<Vec<usize>>) -> Result<Var> {
        let ta = self.value(a);
        if let Some(&bad) = idx.iter().find(|&&i| i >= ta.rows()) {
            return Err(Error::Shape {
                op: "gather_rows",
                lhs: ta.shape().to_vec(),
                rhs: vec![bad],
            });
        }
        let out = ta.select_rows(&idx);
        let ng = self.ng(a);
        self.push("gather_rows", out, Op::Gather(a, idx), ng)
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).map(|x| if x > 0.0 { x } else { 0.0 });
        let ng = self.ng(a);
        self.push("relu", out, Op::Relu(a), ng)
    }

    pub fn leaky_relu(&mut self, a: Var, slope: f64) -> Result<Var> {
        let out = self.value(a).map(|x| if x > 0.0 { x } else { slope * x });
        let ng = self.ng(a);
        self.push("leaky_relu", out, Op::LeakyRelu(a, slope), ng)
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).map(sigmoid);
        let ng = self.ng(a);
        self.push("sigmoid", out, Op::Sigmoid(a), ng)
    }

    /// Softmax of an `E x 1` column, normalized independently within each
    /// group. `groups[e]` is the group of element `e`.
    pub fn softmax_group(&mut self, a: Var, groups: Arc<Vec<usize>>, n_groups: usize) -> Result<Var> {
        let ta = self.value(a);
        if ta.cols() != 1 || groups.len() != ta.rows() {
            return Err(Error::Shape {
                op: "softmax_group",
                lhs: ta.shape().to_vec(),
                rhs: vec![groups.len()],
            });
        }
        let out = softmax_grouped(ta.data(), &groups, n_groups)?;
        let ng = self.ng(a);
        self.push("softmax_group", Tensor::column(out), Op::SoftmaxGroup(a, groups), ng)
    }

    /// Row-wise layer normalization without affine parameters.
    pub fn layer_norm(&mut self, a: Var, eps: f64) -> Result<Var> {
        let ta = self.value(a);
        let (n, c) = (ta.rows(), ta.cols());
        let mut xhat = vec![0.0; n * c];
        let mut inv_std = vec![0.0; n];
        for r in 0..n {
            let row = ta.row(r);
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
            let inv = 1.0 / (var + eps).sqrt();
            inv_std[r] = inv;
            for j in 0..c {
                xhat[r * c + j] = (row[j] - mean) * inv;
            }
        }
        let out = Tensor::matrix(n, c, xhat.clone())?;
        let ng = self.ng(a);
        self.push("layer_norm", out, Op::LayerNorm { x: a, xhat, inv_std }, ng)
    }

    /// Mean squared error against a constant target.
    pub fn mse(&mut self, pred: Var, target: Arc<Tensor>) -> Result<Var> {
        let tp = self.value(pred);
        if !tp.same_shape(&target) {
            return Err(shape_err("mse", tp, &target));
        }
        let n = tp.len().max(1) as f64;
        let v = tp
            .data()
            .iter()
            .zip(target.data())
            .map(|(p, t)| (p - t) * (p - t))
            .sum::<f64>()
            / n;
        let ng = self.ng(pred);
        self.push("mse", Tensor::scalar(v), Op::Mse(pred, target), ng)
    }

    /// Sum of squares over all entries of all inputs.
    pub fn l2_norm_sq(&mut self, parts: &[Var]) -> Result<Var> {
        let v: f64 = parts.iter().map(|&p| self.value(p).sum_sq()).sum();
        let ng = parts.iter().any(|&p| self.ng(p));
        self.push("l2_norm_sq", Tensor::scalar(v), Op::SumSq(parts.to_vec()), ng)
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let v: f64 = self.value(a).data().iter().sum();
        let ng = self.ng(a);
        self.push("sum", Tensor::scalar(v), Op::Sum(a), ng)
    }

    /// `out[i] = sum over edges e into i of w[e] * values[src[e]]`.
    /// Without weights every edge counts once.
    pub fn neighbor_sum(&mut self, values: Var, weights: Option<Var>, index: Arc<EdgeIndex>) -> Result<Var> {
        let tv = self.value(values);
        if tv.rows() != index.num_nodes() {
            return Err(Error::Shape {
                op: "neighbor_sum",
                lhs: tv.shape().to_vec(),
                rhs: vec![index.num_nodes()],
            });
        }
        let w = match weights {
            Some(w) => {
                let tw = self.value(w);
                if tw.cols() != 1 || tw.rows() != index.num_edges() {
                    return Err(Error::Shape {
                        op: "neighbor_sum",
                        lhs: tw.shape().to_vec(),
                        rhs: vec![index.num_edges(), 1],
                    });
                }
                Some(tw.data())
            }
            None => None,
        };
        let c = tv.cols();
        let mut out = vec![0.0; index.num_nodes() * c];
        for i in 0..index.num_nodes() {
            let acc = &mut out[i * c..(i + 1) * c];
            for e in index.incoming(i) {
                let we = w.map_or(1.0, |w| w[e]);
                for (o, v) in acc.iter_mut().zip(tv.row(index.src()[e])) {
                    *o += we * v;
                }
            }
        }
        let out = Tensor::matrix(index.num_nodes(), c, out)?;
        let ng = self.ng(values) || weights.is_some_and(|w| self.ng(w));
        self.push(
            "neighbor_sum",
            out,
            Op::NeighborSum {
                values,
                weights,
                index,
            },
            ng,
        )
    }

    /// Convex neighborhood mixing `out[i] = sum_e w[e] * values[src[e]]` for
    /// weights that sum to one over the edges into `i`, which must include
    /// the self edge `(i, i)`.
    ///
    /// Evaluated as `values[i] + sum_{e, src != i} w[e] * (values[src] - values[i])`,
    /// so a neighborhood whose members all carry the same vector reproduces
    /// that vector exactly, whatever its size.
    pub fn neighbor_mix(&mut self, values: Var, weights: Var, index: Arc<EdgeIndex>) -> Result<Var> {
        let (tv, tw) = (self.value(values), self.value(weights));
        if tv.rows() != index.num_nodes() || tw.cols() != 1 || tw.rows() != index.num_edges() {
            return Err(shape_err("neighbor_mix", tv, tw));
        }
        if !index.has_all_self_edges() {
            return Err(Error::Graph("neighbor_mix requires a self edge on every node".into()));
        }
        let c = tv.cols();
        let w = tw.data();
        let mut out = tv.data().to_vec();
        for i in 0..index.num_nodes() {
            let own = tv.row(i);
            let acc = &mut out[i * c..(i + 1) * c];
            for e in index.incoming(i) {
                let s = index.src()[e];
                if s == i {
                    continue;
                }
                for ((o, v), x) in acc.iter_mut().zip(tv.row(s)).zip(own) {
                    *o += w[e] * (v - x);
                }
            }
        }
        let out = Tensor::matrix(index.num_nodes(), c, out)?;
        let ng = self.ng(values) || self.ng(weights);
        self.push(
            "neighbor_mix",
            out,
            Op::NeighborMix {
                values,
                weights,
                index,
            },
            ng,
        )
    }

    /// Per-edge dot product `q[dst[e]] . k[src[e]]` as an `E x 1` column.
    pub fn edge_dot(&mut self, q: Var, k: Var, index: Arc<EdgeIndex>) -> Result<Var> {
        let (tq, tk) = (self.value(q), self.value(k));
        if !tq.same_shape(tk) || tq.rows() != index.num_nodes() {
            return Err(shape_err("edge_dot", tq, tk));
        }
        let out: Vec<f64> = (0..index.num_edges())
            .map(|e| {
                tq.row(index.dst()[e])
                    .iter()
                    .zip(tk.row(index.src()[e]))
                    .map(|(a, b)| a * b)
                    .sum()
            })
            .collect();
        let ng = self.ng(q) || self.ng(k);
        self.push("edge_dot", Tensor::column(out), Op::EdgeDot { q, k, index }, ng)
    }

    /// `out[i][j] = ||a_i - b_j||^2` for rows of `a` (`n1 x d`) and `b` (`n0 x d`).
    pub fn pairwise_sq_dist(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.cols() != tb.cols() {
            return Err(shape_err("pairwise_sq_dist", ta, tb));
        }
        let (n1, n0, d) = (ta.rows(), tb.rows(), ta.cols());
        // ||a||^2 + ||b||^2 - 2 a.b, clamped against cancellation
        let sq = |t: &Tensor, i: usize| t.row(i).iter().map(|v| v * v).sum::<f64>();
        let na: Vec<f64> = (0..n1).map(|i| sq(ta, i)).collect();
        let nb: Vec<f64> = (0..n0).map(|j| sq(tb, j)).collect();
        let mut out = vec![0.0; n1 * n0];
        gemm(ta.data(), n1, d, false, tb.data(), n0, d, true, &mut out, false);
        for i in 0..n1 {
            for j in 0..n0 {
                let v = &mut out[i * n0 + j];
                *v = (na[i] + nb[j] - 2.0 * *v).max(0.0);
            }
        }
        let ng = self.ng(a) || self.ng(b);
        self.push("pairwise_sq_dist", Tensor::matrix(n1, n0, out)?, Op::PairwiseSqDist(a, b), ng)
    }

    /// Frobenius inner product with a constant matrix.
    pub fn dot_const(&mut self, a: Var, c: Arc<Tensor>) -> Result<Var> {
        let ta = self.value(a);
        if !ta.same_shape(&c) {
            return Err(shape_err("dot_const", ta, &c));
        }
        let v: f64 = ta.data().iter().zip(c.data()).map(|(x, y)| x * y).sum();
        let ng = self.ng(a);
        self.push("dot_const", Tensor::scalar(v), Op::DotConst(a, c), ng)
    }

    /// Reverse sweep from a scalar loss. Can be called once per tape.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients> {
        if self.consumed {
            return Err(Error::Usage("backward called twice on one tape".into()));
        }
        if loss.0 >= self.nodes.len() {
            return Err(Error::Usage("loss is not on this tape".into()));
        }
        if self.value(loss).len() != 1 {
            return Err(Error::Usage(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        self.consumed = true;
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::scalar(1.0));
        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            if !self.nodes[idx].needs_grad {
                continue;
            }
            self.backward_node(idx, &g, &mut grads)?;
            grads[idx] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn backward_node(&self, idx: usize, g: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        let node = &self.nodes[idx];
        let out = &node.value;
        let gd = g.data();
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (m, k, n) = (ta.rows(), ta.cols(), tb.cols());
                if self.ng(*a) {
                    let buf = grad_buf(grads, *a, ta);
                    gemm(gd, m, n, false, tb.data(), k, n, true, buf, true);
                }
                if self.ng(*b) {
                    let buf = grad_buf(grads, *b, tb);
                    gemm(ta.data(), m, k, true, gd, m, n, false, buf, true);
                }
            }
            Op::Add(a, b) | Op::Sub(a, b) => {
                let sign = if matches!(node.op, Op::Sub(..)) { -1.0 } else { 1.0 };
                if self.ng(*a) {
                    let buf = grad_buf(grads, *a, out);
                    buf.iter_mut().zip(gd).for_each(|(d, g)| *d += g);
                }
                if self.ng(*b) {
                    let buf = grad_buf(grads, *b, out);
                    buf.iter_mut().zip(gd).for_each(|(d, g)| *d += sign * g);
                }
            }
            Op::AddRow(a, row) => {
                if self.ng(*a) {
                    let buf = grad_buf(grads, *a, out);
                    buf.iter_mut().zip(gd).for_each(|(d, g)| *d += g);
                }
                if self.ng(*row) {
                    let tr = self.value(*row);
                    let c = tr.cols();
                    let buf = grad_buf(grads, *row, tr);
                    for chunk in gd.chunks(c.max(1)) {
                        buf.iter_mut().zip(chunk).for_each(|(d, g)| *d += g);
                    }
                }
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                if self.ng(*a) {
                    let buf = grad_buf(grads, *a, ta);
                    for ((d, g), y) in buf.iter_mut().zip(gd).zip(tb.data()) {
                        *d += g * y;
                    }
                }
                if self.ng(*b) {
                    let buf = grad_buf(grads, *b, tb);
                    for ((d, g), x) in buf.iter_mut().zip(gd).zip(ta.data()) {
                        *d += g * x;
                    }
                }
            }
            Op::Affine(a, k) => {
                let buf = grad_buf(grads, *a, out);
                buf.iter_mut().zip(gd).for_each(|(d, g)| *d += k * g);
            }
            Op::MulScalar(a, s) => {
                let (ta, ts) = (self.value(*a), self.value(*s));
                if self.ng(*a) {
                    let k = ts.item();
                    let buf = grad_buf(grads, *a, ta);
                    buf.iter_mut().zip(gd).for_each(|(d, g)| *d += k * g);
                }
                if self.ng(*s) {
                    let v: f64 = gd.iter().zip(ta.data()).map(|(g, x)| g * x).sum();
                    grad_buf(grads, *s, ts)[0] += v;
                }
            }
            Op::MulCol(a, col) => {
                let (ta, tc) = (self.value(*a), self.value(*col));
                let c = ta.cols().max(1);
                if self.ng(*a) {
                    let buf = grad_buf(grads, *a, ta);
                    for (i, (dchunk, gchunk)) in buf.chunks_mut(c).zip(gd.chunks(c)).enumerate() {
                        let k = tc.data()[i];
                        dchunk.iter_mut().zip(gchunk).for_each(|(d, g)| *d += k * g);
                    }
                }
                if self.ng(*col) {
                    let buf = grad_buf(grads, *col, tc);
                    for (i, (gchunk, xchunk)) in gd.chunks(c).zip(ta.data().chunks(c)).enumerate() {
                        buf[i] += gchunk.iter().zip(xchunk).map(|(g, x)| g * x).sum::<f64>();
                    }
                }
            }
            Op::MulConst(a, c) => {
                let buf = grad_buf(grads, *a, out);
                for ((d, g), k) in buf.iter_mut().zip(gd).zip(c.data()) {
                    *d += g * k;
                }
            }
            Op::Concat(parts) => {
                let total = out.cols();
                let mut offset = 0;
                for &p in parts {
                    let tp = self.value(p);
                    let w = tp.cols();
                    if self.ng(p) {
                        let buf = grad_buf(grads, p, tp);
                        for r in 0..tp.rows() {
                            let src = &gd[r * total + offset..r * total + offset + w];
                            buf[r * w..(r + 1) * w]
                                .iter_mut()
                                .zip(src)
                                .for_each(|(d, g)| *d += g);
                        }
                    }
                    offset += w;
                }
            }
            Op::Gather(a, idx) => {
                let ta = self.value(*a);
                let c = ta.cols();
                let buf = grad_buf(grads, *a, ta);
                for (r, &i) in idx.iter().enumerate() {
                    buf[i * c..(i + 1) * c]
                        .iter_mut()
                        .zip(&gd[r * c..(r + 1) * c])
                        .for_each(|(d, g)| *d += g);
                }
            }
            Op::Relu(a) => {
                let ta = self.value(*a);
                let buf = grad_buf(grads, *a, ta);
                for ((d, g), x) in buf.iter_mut().zip(gd).zip(ta.data()) {
                    if *x > 0.0 {
                        *d += g;
                    }
                }
            }
            Op::LeakyRelu(a, slope) => {
                let ta = self.value(*a);
                let buf = grad_buf(grads, *a, ta);
                for ((d, g), x) in buf.iter_mut().zip(gd).zip(ta.data()) {
                    *d += if *x > 0.0 { *g } else { slope * g };
                }
            }
            Op::Sigmoid(a) => {
                let buf = grad_buf(grads, *a, out);
                for ((d, g), y) in buf.iter_mut().zip(gd).zip(out.data()) {
                    *d += g * y * (1.0 - y);
                }
            }
            Op::SoftmaxGroup(a, groups) => {
                let y = out.data();
                let n_groups = groups.iter().max().map_or(0, |m| m + 1);
                let mut dot = vec![0.0; n_groups];
                for (e, &grp) in groups.iter().enumerate() {
                    dot[grp] += gd[e] * y[e];
                }
                let buf = grad_buf(grads, *a, out);
                for (e, &grp) in groups.iter().enumerate() {
                    buf[e] += y[e] * (gd[e] - dot[grp]);
                }
            }
            Op::LayerNorm { x, xhat, inv_std } => {
                let c = out.cols();
                let buf = grad_buf(grads, *x, out);
                for (r, &inv) in inv_std.iter().enumerate() {
                    let gr = &gd[r * c..(r + 1) * c];
                    let xr = &xhat[r * c..(r + 1) * c];
                    let mean_g = gr.iter().sum::<f64>() / c as f64;
                    let mean_gx = gr.iter().zip(xr).map(|(g, x)| g * x).sum::<f64>() / c as f64;
                    for j in 0..c {
                        buf[r * c + j] += inv * (gr[j] - mean_g - xr[j] * mean_gx);
                    }
                }
            }
            Op::Mse(pred, target) => {
                let tp = self.value(*pred);
                let k = 2.0 * gd[0] / tp.len().max(1) as f64;
                let buf = grad_buf(grads, *pred, tp);
                for ((d, p), t) in buf.iter_mut().zip(tp.data()).zip(target.data()) {
                    *d += k * (p - t);
                }
            }
            Op::SumSq(parts) => {
                for &p in parts {
                    if self.ng(p) {
                        let tp = self.value(p);
                        let buf = grad_buf(grads, p, tp);
                        for (d, x) in buf.iter_mut().zip(tp.data()) {
                            *d += 2.0 * gd[0] * x;
                        }
                    }
                }
            }
            Op::Sum(a) => {
                let ta = self.value(*a);
                let buf = grad_buf(grads, *a, ta);
                buf.iter_mut().for_each(|d| *d += gd[0]);
            }
            Op::NeighborSum {
                values,
                weights,
                index,
            } => {
                let tv = self.value(*values);
                let c = tv.cols();
                let w = weights.map(|w| self.value(w).data());
                if self.ng(*values) {
                    let buf = grad_buf(grads, *values, tv);
                    for i in 0..index.num_nodes() {
                        let gi = &gd[i * c..(i + 1) * c];
                        for e in index.incoming(i) {
                            let we = w.map_or(1.0, |w| w[e]);
                            let s = index.src()[e];
                            buf[s * c..(s + 1) * c]
                                .iter_mut()
                                .zip(gi)
                                .for_each(|(d, g)| *d += we * g);
                        }
                    }
                }
                if let Some(wv) = weights.filter(|&w| self.ng(w)) {
                    let tw = self.value(wv);
                    let buf = grad_buf(grads, wv, tw);
                    for i in 0..index.num_nodes() {
                        let gi = &gd[i * c..(i + 1) * c];
                        for e in index.incoming(i) {
                            buf[e] += gi.iter().zip(tv.row(index.src()[e])).map(|(g, v)| g * v).sum::<f64>();
                        }
                    }
                }
            }
            Op::NeighborMix {
                values,
                weights,
                index,
            } => {
                let (tv, tw) = (self.value(*values), self.value(*weights));
                let c = tv.cols();
                let w = tw.data();
                if self.ng(*values) {
                    let buf = grad_buf(grads, *values, tv);
                    for i in 0..index.num_nodes() {
                        let gi = &gd[i * c..(i + 1) * c];
                        let mut own = 1.0;
                        for e in index.incoming(i) {
                            let s = index.src()[e];
                            if s == i {
                                continue;
                            }
                            own -= w[e];
                            buf[s * c..(s + 1) * c]
                                .iter_mut()
                                .zip(gi)
                                .for_each(|(d, g)| *d += w[e] * g);
                        }
                        buf[i * c..(i + 1) * c]
                            .iter_mut()
                            .zip(gi)
                            .for_each(|(d, g)| *d += own * g);
                    }
                }
                if self.ng(*weights) {
                    let buf = grad_buf(grads, *weights, tw);
                    for i in 0..index.num_nodes() {
                        let gi = &gd[i * c..(i + 1) * c];
                        let own = tv.row(i);
                        for e in index.incoming(i) {
                            let s = index.src()[e];
                            if s == i {
                                continue;
                            }
                            buf[e] += gi
                                .iter()
                                .zip(tv.row(s))
                                .zip(own)
                                .map(|((g, v), x)| g * (v - x))
                                .sum::<f64>();
                        }
                    }
                }
            }
            Op::EdgeDot { q, k, index } => {
                let (tq, tk) = (self.value(*q), self.value(*k));
                let c = tq.cols();
                if self.ng(*q) {
                    let buf = grad_buf(grads, *q, tq);
                    for e in 0..index.num_edges() {
                        let d = index.dst()[e];
                        buf[d * c..(d + 1) * c]
                            .iter_mut()
                            .zip(tk.row(index.src()[e]))
                            .for_each(|(b, kv)| *b += gd[e] * kv);
                    }
                }
                if self.ng(*k) {
                    let buf = grad_buf(grads, *k, tk);
                    for e in 0..index.num_edges() {
                        let s = index.src()[e];
                        buf[s * c..(s + 1) * c]
                            .iter_mut()
                            .zip(tq.row(index.dst()[e]))
                            .for_each(|(b, qv)| *b += gd[e] * qv);
                    }
                }
            }
            Op::PairwiseSqDist(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (n1, n0, d) = (ta.rows(), tb.rows(), ta.cols());
                if self.ng(*a) {
                    // dA = 2 (diag(rowsum G) A - G B)
                    let mut tmp = vec![0.0; n1 * d];
                    gemm(gd, n1, n0, false, tb.data(), n0, d, false, &mut tmp, false);
                    let buf = grad_buf(grads, *a, ta);
                    for i in 0..n1 {
                        let rs: f64 = gd[i * n0..(i + 1) * n0].iter().sum();
                        for j in 0..d {
                            buf[i * d + j] += 2.0 * (rs * ta.data()[i * d + j] - tmp[i * d + j]);
                        }
                    }
                }
                if self.ng(*b) {
                    let mut tmp = vec![0.0; n0 * d];
                    gemm(gd, n1, n0, true, ta.data(), n1, d, false, &mut tmp, false);
                    let mut colsum = vec![0.0; n0];
                    for i in 0..n1 {
                        for j in 0..n0 {
                            colsum[j] += gd[i * n0 + j];
                        }
                    }
                    let buf = grad_buf(grads, *b, tb);
                    for j in 0..n0 {
                        for k in 0..d {
                            buf[j * d + k] += 2.0 * (colsum[j] * tb.data()[j * d + k] - tmp[j * d + k]);
                        }
                    }
                }
            }
            Op::DotConst(a, c) => {
                let buf = grad_buf(grads, *a, c);
                for (d, k) in buf.iter_mut().zip(c.data()) {
                    *d += gd[0] * k;
                }
            }
        }
        Ok(())
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Group-wise softmax with the per-group maximum subtracted first.
pub fn softmax_grouped(values: &[f64], groups: &[usize], n_groups: usize) -> Result<Vec<f64>> {
    let mut max = vec![f64::NEG_INFINITY; n_groups];
    for (&v, &g) in values.iter().zip(groups) {
        if g >= n_groups {
            return Err(Error::Usage(format!("group {g} out of range {n_groups}")));
        }
        if v > max[g] {
            max[g] = v;
        }
    }
    let mut out: Vec<f64> = values.iter().zip(groups).map(|(&v, &g)| (v - max[g]).exp()).collect();
    let mut total = vec![0.0; n_groups];
    for (&e, &g) in out.iter().zip(groups) {
        total[g] += e;
    }
    for (o, &g) in out.iter_mut().zip(groups) {
        *o /= total[g];
    }
    Ok(out)
}
