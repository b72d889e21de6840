//! A small reverse-mode tape over [`Matrix`] values.
//!
//! A [`Graph`] borrows a parameter list, records the forward computation as a
//! flat list of nodes, and [`Graph::backward`] accumulates parameter gradients
//! by walking the list in reverse. Only the operations the transformer blocks
//! need are provided.

use crate::tensor::{dot, Matrix, Scalar};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId(usize);

/// Key validity plus optional causal masking for a square score matrix.
#[derive(Debug, Clone)]
pub struct AttnMask {
    pub key_valid: Vec<bool>,
    pub causal: bool,
}

impl AttnMask {
    pub fn all(n: usize, causal: bool) -> Self {
        Self {
            key_valid: vec![true; n],
            causal,
        }
    }

    pub fn allows(&self, query: usize, key: usize) -> bool {
        self.key_valid[key] && (!self.causal || key <= query)
    }
}

enum Op<T> {
    Param(usize),
    Const,
    Gather { param: usize, ids: Vec<usize> },
    Add(NodeId, NodeId),
    AddRow(NodeId, NodeId),
    MatMul(NodeId, NodeId),
    MatMulT(NodeId, NodeId),
    Scale(NodeId, T),
    MulConst(NodeId, Matrix<T>),
    Softmax(NodeId),
    LayerNorm { x: NodeId, gamma: NodeId, beta: NodeId, xhat: Matrix<T>, inv_std: Vec<T> },
    Gelu(NodeId),
    SliceCols { x: NodeId, start: usize },
    ConcatCols(Vec<NodeId>),
    SelectRows { x: NodeId, rows: Vec<usize> },
    CrossEntropy { logits: NodeId, targets: Vec<Option<usize>>, probs: Matrix<T> },
}

struct Node<T> {
    op: Op<T>,
    value: Option<Matrix<T>>,
}

pub struct Graph<'p, T: Scalar> {
    params: &'p [Matrix<T>],
    nodes: Vec<Node<T>>,
}

const GELU_C: f64 = 0.044_715;

fn gelu<T: Scalar>(x: T) -> T {
    let k = T::of((2.0 / std::f64::consts::PI).sqrt());
    let half = T::of(0.5);
    let u = k * (x + T::of(GELU_C) * x * x * x);
    half * x * (T::one() + u.tanh())
}

fn gelu_grad<T: Scalar>(x: T) -> T {
    let k = T::of((2.0 / std::f64::consts::PI).sqrt());
    let half = T::of(0.5);
    let c = T::of(GELU_C);
    let t = (k * (x + c * x * x * x)).tanh();
    half * (T::one() + t) + half * x * (T::one() - t * t) * k * (T::one() + T::of(3.0) * c * x * x)
}

/// Row-wise softmax of `scores`, with disallowed entries exactly zero.
pub fn masked_softmax<T: Scalar>(scores: &Matrix<T>, mask: &AttnMask) -> Matrix<T> {
    masked_softmax_by(scores, |i, j| mask.allows(i, j))
}

/// As [`masked_softmax`], with an arbitrary `(query, key)` predicate. Rows
/// with no allowed entry are all zero.
pub fn masked_softmax_by<T: Scalar>(scores: &Matrix<T>, allows: impl Fn(usize, usize) -> bool) -> Matrix<T> {
    let (n, m) = scores.shape();
    let mut out = Matrix::zeros(n, m);
    for i in 0..n {
        let row = scores.row(i);
        let mut max = T::neg_infinity();
        for (j, &s) in row.iter().enumerate() {
            if allows(i, j) && s > max {
                max = s;
            }
        }
        if max == T::neg_infinity() {
            continue;
        }
        let mut total = T::zero();
        let o = out.row_mut(i);
        for (j, &s) in row.iter().enumerate() {
            if allows(i, j) {
                let e = (s - max).exp();
                o[j] = e;
                total = total + e;
            }
        }
        for v in o.iter_mut() {
            *v = *v / total;
        }
    }
    out
}

impl<'p, T: Scalar> Graph<'p, T> {
    pub fn new(params: &'p [Matrix<T>]) -> Self {
        Self {
            params,
            nodes: Vec::new(),
        }
    }

    pub fn value(&self, id: NodeId) -> &Matrix<T> {
        let node = &self.nodes[id.0];
        match node.op {
            Op::Param(p) => &self.params[p],
            _ => node.value.as_ref().expect("node value"),
        }
    }

    fn push(&mut self, op: Op<T>, value: Option<Matrix<T>>) -> NodeId {
        self.nodes.push(Node { op, value });
        NodeId(self.nodes.len() - 1)
    }

    pub fn param(&mut self, index: usize) -> NodeId {
        self.push(Op::Param(index), None)
    }

    pub fn constant(&mut self, value: Matrix<T>) -> NodeId {
        self.push(Op::Const, Some(value))
    }

    /// Rows `ids` of parameter `param`, as an `ids.len() × cols` matrix.
    pub fn gather(&mut self, param: usize, ids: &[usize]) -> NodeId {
        let table = &self.params[param];
        let mut out = Matrix::zeros(ids.len(), table.cols());
        for (r, &id) in ids.iter().enumerate() {
            out.row_mut(r).copy_from_slice(table.row(id));
        }
        self.push(Op::Gather { param, ids: ids.to_vec() }, Some(out))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let mut v = self.value(a).clone();
        v.add_assign(self.value(b));
        self.push(Op::Add(a, b), Some(v))
    }

    /// Adds a `1 × cols` row to every row of `a`.
    pub fn add_row(&mut self, a: NodeId, row: NodeId) -> NodeId {
        let r = self.value(row);
        assert_eq!(r.rows(), 1, "add_row expects a single row");
        let r = r.row(0).to_vec();
        let mut v = self.value(a).clone();
        for i in 0..v.rows() {
            for (x, &b) in v.row_mut(i).iter_mut().zip(&r) {
                *x = *x + b;
            }
        }
        self.push(Op::AddRow(a, row), Some(v))
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.value(a).matmul(self.value(b));
        self.push(Op::MatMul(a, b), Some(v))
    }

    /// `a · bᵀ`.
    pub fn matmul_t(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.value(a).matmul_t(self.value(b));
        self.push(Op::MatMulT(a, b), Some(v))
    }

    pub fn scale(&mut self, a: NodeId, c: T) -> NodeId {
        let v = self.value(a).scale(c);
        self.push(Op::Scale(a, c), Some(v))
    }

    /// Elementwise product with a constant matrix (dropout masks).
    pub fn mul_const(&mut self, a: NodeId, c: Matrix<T>) -> NodeId {
        let av = self.value(a);
        assert_eq!(av.shape(), c.shape(), "mul_const shape");
        let data = av.as_slice().iter().zip(c.as_slice()).map(|(&x, &m)| x * m).collect();
        let v = Matrix::from_vec(c.rows(), c.cols(), data).unwrap();
        self.push(Op::MulConst(a, c), Some(v))
    }

    pub fn masked_softmax(&mut self, scores: NodeId, mask: &AttnMask) -> NodeId {
        let v = masked_softmax(self.value(scores), mask);
        self.push(Op::Softmax(scores), Some(v))
    }

    pub fn layer_norm(&mut self, x: NodeId, gamma: NodeId, beta: NodeId) -> NodeId {
        let eps = T::of(1e-5);
        let xv = self.value(x);
        let (n, d) = xv.shape();
        let g = self.value(gamma).row(0);
        let b = self.value(beta).row(0);
        let mut xhat = Matrix::zeros(n, d);
        let mut out = Matrix::zeros(n, d);
        let mut inv_std = Vec::with_capacity(n);
        let dt = T::of(d as f64);
        for i in 0..n {
            let row = xv.row(i);
            let mean = row.iter().copied().sum::<T>() / dt;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / dt;
            let inv = T::one() / (var + eps).sqrt();
            inv_std.push(inv);
            for j in 0..d {
                let h = (row[j] - mean) * inv;
                xhat[(i, j)] = h;
                out[(i, j)] = h * g[j] + b[j];
            }
        }
        self.push(Op::LayerNorm { x, gamma, beta, xhat, inv_std }, Some(out))
    }

    pub fn gelu(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).map(gelu);
        self.push(Op::Gelu(a), Some(v))
    }

    pub fn slice_cols(&mut self, x: NodeId, start: usize, width: usize) -> NodeId {
        let xv = self.value(x);
        let mut out = Matrix::zeros(xv.rows(), width);
        for i in 0..xv.rows() {
            out.row_mut(i).copy_from_slice(&xv.row(i)[start..start + width]);
        }
        self.push(Op::SliceCols { x, start }, Some(out))
    }

    pub fn concat_cols(&mut self, parts: &[NodeId]) -> NodeId {
        let rows = self.value(parts[0]).rows();
        let cols: usize = parts.iter().map(|&p| self.value(p).cols()).sum();
        let mut out = Matrix::zeros(rows, cols);
        let mut offset = 0;
        for &p in parts {
            let pv = self.value(p);
            for i in 0..rows {
                out.row_mut(i)[offset..offset + pv.cols()].copy_from_slice(pv.row(i));
            }
            offset += pv.cols();
        }
        self.push(Op::ConcatCols(parts.to_vec()), Some(out))
    }

    pub fn select_rows(&mut self, x: NodeId, rows: &[usize]) -> NodeId {
        let xv = self.value(x);
        let mut out = Matrix::zeros(rows.len(), xv.cols());
        for (r, &i) in rows.iter().enumerate() {
            out.row_mut(r).copy_from_slice(xv.row(i));
        }
        self.push(Op::SelectRows { x, rows: rows.to_vec() }, Some(out))
    }

    /// Mean token cross-entropy over rows that carry a target. Produces a
    /// `1 × 1` node.
    pub fn cross_entropy(&mut self, logits: NodeId, targets: &[Option<usize>]) -> NodeId {
        let lv = self.value(logits);
        assert_eq!(lv.rows(), targets.len(), "one target slot per row");
        let mut probs = Matrix::zeros(lv.rows(), lv.cols());
        let mut total = T::zero();
        let mut count = 0usize;
        for (i, target) in targets.iter().enumerate() {
            let row = lv.row(i);
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let sum_exp: T = row.iter().map(|&v| (v - max).exp()).sum();
            let log_z = max + sum_exp.ln();
            for (p, &v) in probs.row_mut(i).iter_mut().zip(row) {
                *p = (v - log_z).exp();
            }
            if let Some(t) = *target {
                total = total + (log_z - row[t]);
                count += 1;
            }
        }
        let loss = if count == 0 {
            T::zero()
        } else {
            total / T::of(count as f64)
        };
        let value = Matrix::filled(1, 1, loss);
        self.push(
            Op::CrossEntropy { logits, targets: targets.to_vec(), probs },
            Some(value),
        )
    }

    /// Accumulates d`output`/d`param` into `grads`, which must be shaped like
    /// the graph's parameter list. `output` must be a `1 × 1` node.
    pub fn backward(&self, output: NodeId, grads: &mut [Matrix<T>]) {
        assert_eq!(self.value(output).shape(), (1, 1), "backward from a scalar");
        assert_eq!(grads.len(), self.params.len(), "gradient buffer length");
        let mut node_grads: Vec<Option<Matrix<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        node_grads[output.0] = Some(Matrix::filled(1, 1, T::one()));

        for idx in (0..=output.0).rev() {
            let Some(g) = node_grads[idx].take() else {
                continue;
            };
            match &self.nodes[idx].op {
                Op::Param(p) => grads[*p].add_assign(&g),
                Op::Const => {}
                Op::Gather { param, ids } => {
                    let dst = &mut grads[*param];
                    for (r, &id) in ids.iter().enumerate() {
                        for (d, &s) in dst.row_mut(id).iter_mut().zip(g.row(r)) {
                            *d = *d + s;
                        }
                    }
                }
                Op::Add(a, b) => {
                    accumulate(&mut node_grads, *a, g.clone());
                    accumulate(&mut node_grads, *b, g);
                }
                Op::AddRow(a, row) => {
                    let sums = g.col_sums();
                    accumulate(&mut node_grads, *row, Matrix::from_vec(1, sums.len(), sums).unwrap());
                    accumulate(&mut node_grads, *a, g);
                }
                Op::MatMul(a, b) => {
                    let ga = g.matmul_t(self.value(*b));
                    let gb = self.value(*a).t_matmul(&g);
                    accumulate(&mut node_grads, *a, ga);
                    accumulate(&mut node_grads, *b, gb);
                }
                Op::MatMulT(a, b) => {
                    let ga = g.matmul(self.value(*b));
                    let gb = g.t_matmul(self.value(*a));
                    accumulate(&mut node_grads, *a, ga);
                    accumulate(&mut node_grads, *b, gb);
                }
                Op::Scale(a, c) => accumulate(&mut node_grads, *a, g.scale(*c)),
                Op::MulConst(a, c) => {
                    let mut ga = g;
                    for (o, &m) in ga.as_mut_slice().iter_mut().zip(c.as_slice()) {
                        *o = *o * m;
                    }
                    accumulate(&mut node_grads, *a, ga);
                }
                Op::Softmax(a) => {
                    let y = self.nodes[idx].value.as_ref().unwrap();
                    let mut ga = Matrix::zeros(y.rows(), y.cols());
                    for i in 0..y.rows() {
                        let yr = y.row(i);
                        let gr = g.row(i);
                        let inner = dot(yr, gr);
                        for ((o, &yv), &gv) in ga.row_mut(i).iter_mut().zip(yr).zip(gr) {
                            *o = yv * (gv - inner);
                        }
                    }
                    accumulate(&mut node_grads, *a, ga);
                }
                Op::LayerNorm { x, gamma, beta, xhat, inv_std } => {
                    let (n, d) = xhat.shape();
                    let gam = self.value(*gamma).row(0);
                    let mut g_gamma = Matrix::zeros(1, d);
                    let mut g_beta = Matrix::zeros(1, d);
                    let mut gx = Matrix::zeros(n, d);
                    let dt = T::of(d as f64);
                    for i in 0..n {
                        let gr = g.row(i);
                        let hr = xhat.row(i);
                        let mut sum_dh = T::zero();
                        let mut sum_dh_h = T::zero();
                        for j in 0..d {
                            g_beta[(0, j)] = g_beta[(0, j)] + gr[j];
                            g_gamma[(0, j)] = g_gamma[(0, j)] + gr[j] * hr[j];
                            let dh = gr[j] * gam[j];
                            sum_dh = sum_dh + dh;
                            sum_dh_h = sum_dh_h + dh * hr[j];
                        }
                        let scale = inv_std[i] / dt;
                        for j in 0..d {
                            let dh = gr[j] * gam[j];
                            gx[(i, j)] = scale * (dt * dh - sum_dh - hr[j] * sum_dh_h);
                        }
                    }
                    accumulate(&mut node_grads, *gamma, g_gamma);
                    accumulate(&mut node_grads, *beta, g_beta);
                    accumulate(&mut node_grads, *x, gx);
                }
                Op::Gelu(a) => {
                    let xv = self.value(*a);
                    let mut ga = g;
                    for (o, &x) in ga.as_mut_slice().iter_mut().zip(xv.as_slice()) {
                        *o = *o * gelu_grad(x);
                    }
                    accumulate(&mut node_grads, *a, ga);
                }
                Op::SliceCols { x, start } => {
                    let (rows, cols) = self.value(*x).shape();
                    let mut gx = Matrix::zeros(rows, cols);
                    for i in 0..rows {
                        gx.row_mut(i)[*start..*start + g.cols()].copy_from_slice(g.row(i));
                    }
                    accumulate(&mut node_grads, *x, gx);
                }
                Op::ConcatCols(parts) => {
                    let mut offset = 0;
                    for &p in parts {
                        let w = self.value(p).cols();
                        let mut gp = Matrix::zeros(g.rows(), w);
                        for i in 0..g.rows() {
                            gp.row_mut(i).copy_from_slice(&g.row(i)[offset..offset + w]);
                        }
                        offset += w;
                        accumulate(&mut node_grads, p, gp);
                    }
                }
                Op::SelectRows { x, rows } => {
                    let (r, c) = self.value(*x).shape();
                    let mut gx = Matrix::zeros(r, c);
                    for (k, &i) in rows.iter().enumerate() {
                        for (d, &s) in gx.row_mut(i).iter_mut().zip(g.row(k)) {
                            *d = *d + s;
                        }
                    }
                    accumulate(&mut node_grads, *x, gx);
                }
                Op::CrossEntropy { logits, targets, probs } => {
                    let count = targets.iter().filter(|t| t.is_some()).count();
                    let mut gl = Matrix::zeros(probs.rows(), probs.cols());
                    if count > 0 {
                        let s = g[(0, 0)] / T::of(count as f64);
                        for (i, target) in targets.iter().enumerate() {
                            if let Some(t) = *target {
                                let row = gl.row_mut(i);
                                row.copy_from_slice(probs.row(i));
                                row[t] = row[t] - T::one();
                                for v in row.iter_mut() {
                                    *v = *v * s;
                                }
                            }
                        }
                    }
                    accumulate(&mut node_grads, *logits, gl);
                }
            }
        }
    }
}

fn accumulate<T: Scalar>(grads: &mut [Option<Matrix<T>>], id: NodeId, g: Matrix<T>) {
    match &mut grads[id.0] {
        Some(existing) => existing.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}
