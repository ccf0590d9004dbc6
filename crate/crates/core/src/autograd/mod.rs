//! Tape-based reverse-mode automatic differentiation over row-major matrices.
//!
//! Every value in a [`Graph`] is a 2-D matrix. Higher-rank data (batches of
//! sequences, attention heads) is laid out as stacked row blocks, and the
//! batched ops take an explicit group count. Nodes are appended in evaluation
//! order, so the tape is already topologically sorted and the backward pass is
//! a single reverse sweep.

mod params;
mod real;

use std::collections::HashMap;

use ndarray::{s, Array2, Axis};

pub use params::{Init, ParamId, ParamStore};
pub use real::Real;

/// Handle to a node on the tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op<F: Real> {
    Leaf,
    MatMul(Var, Var),
    BatchedMatMul {
        a: Var,
        b: Var,
        groups: usize,
        trans_b: bool,
    },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    Affine(Var, F),
    Sigmoid(Var),
    Tanh(Var),
    Exp(Var),
    Gelu(Var),
    Relu(Var),
    Abs(Var),
    Sqrt(Var),
    Log {
        x: Var,
        floor: F,
    },
    SoftmaxRows(Var),
    LogSoftmaxRows(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Array2<F>,
        inv_std: Vec<F>,
    },
    ConcatCols(Vec<Var>),
    SliceCols {
        x: Var,
        start: usize,
    },
    ConcatRows(Vec<Var>),
    GatherRows {
        x: Var,
        index: Vec<usize>,
    },
    Reshape(Var),
    SplitHeads {
        x: Var,
        batch: usize,
        len: usize,
        heads: usize,
    },
    MergeHeads {
        x: Var,
        batch: usize,
        len: usize,
        heads: usize,
    },
    MaxPoolRows {
        x: Var,
        argmax: Vec<usize>,
    },
    SumAll(Var),
    SumRows(Var),
}

#[derive(Debug, Clone)]
struct Node<F: Real> {
    value: Array2<F>,
    op: Op<F>,
}

/// A recording of one forward computation.
#[derive(Debug, Default)]
pub struct Graph<F: Real> {
    nodes: Vec<Node<F>>,
    bound: HashMap<(u64, usize), Var>,
}

impl<F: Real> Graph<F> {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            bound: HashMap::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Array2<F>, op: Op<F>) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Array2<F> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.dim()
    }

    /// Scalar value of a 1×1 node.
    pub fn scalar(&self, v: Var) -> F {
        let val = self.value(v);
        assert_eq!(val.dim(), (1, 1), "scalar() on non-scalar node");
        val[[0, 0]]
    }

    /// Input or constant leaf.
    pub fn leaf(&mut self, value: Array2<F>) -> Var {
        self.push(value, Op::Leaf)
    }

    /// Binds a parameter as a leaf. Repeated calls within one graph return the
    /// same node, so a weight reused across decode steps accumulates a single
    /// gradient.
    pub fn param(&mut self, store: &ParamStore<F>, id: ParamId) -> Var {
        let key = (store.store_id(), id.index());
        if let Some(&v) = self.bound.get(&key) {
            return v;
        }
        let v = self.leaf(store.get(id).clone());
        self.bound.insert(key, v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(
            va.ncols(),
            vb.nrows(),
            "matmul shape mismatch {:?} x {:?}",
            va.dim(),
            vb.dim()
        );
        let out = va.dot(vb);
        self.push(out, Op::MatMul(a, b))
    }

    /// Per-group product of stacked row blocks.
    ///
    /// `a` is `(groups·m)×k`. With `trans_b = false`, `b` is `(groups·k)×n`
    /// and block `i` of the output is `A_i·B_i`; with `trans_b = true`, `b`
    /// is `(groups·n)×k` and the block is `A_i·B_iᵀ`.
    pub fn batched_matmul(&mut self, a: Var, b: Var, groups: usize, trans_b: bool) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        assert!(groups > 0 && va.nrows() % groups == 0 && vb.nrows() % groups == 0);
        let m = va.nrows() / groups;
        let bn = vb.nrows() / groups;
        let n = if trans_b { bn } else { vb.ncols() };
        if trans_b {
            assert_eq!(va.ncols(), vb.ncols(), "batched_matmul inner dims");
        } else {
            assert_eq!(va.ncols(), bn, "batched_matmul inner dims");
        }
        let mut out = Array2::zeros((groups * m, n));
        for g in 0..groups {
            let ab = va.slice(s![g * m..(g + 1) * m, ..]);
            let bb = vb.slice(s![g * bn..(g + 1) * bn, ..]);
            let prod = if trans_b { ab.dot(&bb.t()) } else { ab.dot(&bb) };
            out.slice_mut(s![g * m..(g + 1) * m, ..]).assign(&prod);
        }
        self.push(
            out,
            Op::BatchedMatMul {
                a,
                b,
                groups,
                trans_b,
            },
        )
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "add shape mismatch");
        let out = self.value(a) + self.value(b);
        self.push(out, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "sub shape mismatch");
        let out = self.value(a) - self.value(b);
        self.push(out, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "mul shape mismatch");
        let out = self.value(a) * self.value(b);
        self.push(out, Op::Mul(a, b))
    }

    /// `a + 1·row`, broadcasting a 1×n row over every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let (va, vr) = (self.value(a), self.value(row));
        assert_eq!(vr.nrows(), 1, "add_row expects a 1×n row");
        assert_eq!(va.ncols(), vr.ncols(), "add_row width mismatch");
        let out = va + vr;
        self.push(out, Op::AddRow(a, row))
    }

    /// Elementwise `scale·x + shift`.
    pub fn affine(&mut self, x: Var, scale: F, shift: F) -> Var {
        let out = self.value(x).mapv(|v| v * scale + shift);
        self.push(out, Op::Affine(x, scale))
    }

    pub fn scale(&mut self, x: Var, scale: F) -> Var {
        self.affine(x, scale, F::zero())
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let out = self.value(x).mapv(sigmoid);
        self.push(out, Op::Sigmoid(x))
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let out = self.value(x).mapv(|v| v.tanh());
        self.push(out, Op::Tanh(x))
    }

    pub fn exp(&mut self, x: Var) -> Var {
        let out = self.value(x).mapv(|v| v.exp());
        self.push(out, Op::Exp(x))
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, x: Var) -> Var {
        let out = self.value(x).mapv(|v| gelu(v).0);
        self.push(out, Op::Gelu(x))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = self.value(x).mapv(|v| v.max(F::zero()));
        self.push(out, Op::Relu(x))
    }

    pub fn abs(&mut self, x: Var) -> Var {
        let out = self.value(x).mapv(|v| v.abs());
        self.push(out, Op::Abs(x))
    }

    pub fn sqrt(&mut self, x: Var) -> Var {
        let out = self.value(x).mapv(|v| v.sqrt());
        self.push(out, Op::Sqrt(x))
    }

    /// `ln(max(x, floor))`; the gradient is zero where the floor is active.
    pub fn log_clamped(&mut self, x: Var, floor: F) -> Var {
        let out = self.value(x).mapv(|v| v.max(floor).ln());
        self.push(out, Op::Log { x, floor })
    }

    pub fn softmax_rows(&mut self, x: Var) -> Var {
        let out = softmax_rows(self.value(x));
        self.push(out, Op::SoftmaxRows(x))
    }

    pub fn log_softmax_rows(&mut self, x: Var) -> Var {
        let out = log_softmax_rows(self.value(x));
        self.push(out, Op::LogSoftmaxRows(x))
    }

    /// Row-wise layer normalization with learned 1×n gain and bias.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: F) -> Var {
        let vx = self.value(x);
        let (rows, cols) = vx.dim();
        assert_eq!(self.shape(gamma), (1, cols));
        assert_eq!(self.shape(beta), (1, cols));
        let n = F::of(cols as f64);
        let mut xhat = Array2::zeros((rows, cols));
        let mut inv_std = Vec::with_capacity(rows);
        for (r, row) in vx.rows().into_iter().enumerate() {
            let mean = row.sum() / n;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<F>() / n;
            let is = F::one() / (var + eps).sqrt();
            inv_std.push(is);
            for (c, &v) in row.iter().enumerate() {
                xhat[[r, c]] = (v - mean) * is;
            }
        }
        let out = &xhat * self.value(gamma) + self.value(beta);
        self.push(
            out,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
        )
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let views: Vec<_> = parts.iter().map(|&p| self.value(p).view()).collect();
        let out = ndarray::concatenate(Axis(1), &views).expect("concat_cols: row counts differ");
        self.push(out, Op::ConcatCols(parts.to_vec()))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Var {
        let out = self.value(x).slice(s![.., start..start + len]).to_owned();
        self.push(out, Op::SliceCols { x, start })
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let views: Vec<_> = parts.iter().map(|&p| self.value(p).view()).collect();
        let out = ndarray::concatenate(Axis(0), &views).expect("concat_rows: widths differ");
        self.push(out, Op::ConcatRows(parts.to_vec()))
    }

    /// Output row `i` is input row `index[i]`; rows may repeat (embedding lookup).
    pub fn gather_rows(&mut self, x: Var, index: &[usize]) -> Var {
        let vx = self.value(x);
        let out = vx.select(Axis(0), index);
        self.push(
            out,
            Op::GatherRows {
                x,
                index: index.to_vec(),
            },
        )
    }

    /// Row-major reinterpretation to a new shape with the same element count.
    pub fn reshape(&mut self, x: Var, rows: usize, cols: usize) -> Var {
        let vx = self.value(x);
        assert_eq!(vx.len(), rows * cols, "reshape element count");
        let data: Vec<F> = vx.iter().copied().collect();
        let out = Array2::from_shape_vec((rows, cols), data).expect("shape checked");
        self.push(out, Op::Reshape(x))
    }

    /// `(batch·len)×(heads·dh)` → `(batch·heads·len)×dh`.
    pub fn split_heads(&mut self, x: Var, batch: usize, len: usize, heads: usize) -> Var {
        let out = split_heads(self.value(x), batch, len, heads);
        self.push(
            out,
            Op::SplitHeads {
                x,
                batch,
                len,
                heads,
            },
        )
    }

    /// Inverse of [`Graph::split_heads`].
    pub fn merge_heads(&mut self, x: Var, batch: usize, len: usize, heads: usize) -> Var {
        let out = merge_heads(self.value(x), batch, len, heads);
        self.push(
            out,
            Op::MergeHeads {
                x,
                batch,
                len,
                heads,
            },
        )
    }

    /// Column-wise max over each group of `len` rows, restricted to rows where
    /// `valid` is true. Every group must contain at least one valid row.
    pub fn max_pool_rows(&mut self, x: Var, groups: usize, valid: &[bool]) -> Var {
        let vx = self.value(x);
        let (rows, cols) = vx.dim();
        assert!(groups > 0 && rows % groups == 0 && valid.len() == rows);
        let len = rows / groups;
        let mut out = Array2::zeros((groups, cols));
        let mut argmax = vec![0usize; groups * cols];
        for g in 0..groups {
            for c in 0..cols {
                let mut best: Option<(usize, F)> = None;
                for r in g * len..(g + 1) * len {
                    if !valid[r] {
                        continue;
                    }
                    let v = vx[[r, c]];
                    if best.is_none_or(|(_, b)| v > b) {
                        best = Some((r, v));
                    }
                }
                let (r, v) = best.expect("max_pool_rows: group without valid rows");
                out[[g, c]] = v;
                argmax[g * cols + c] = r;
            }
        }
        self.push(out, Op::MaxPoolRows { x, argmax })
    }

    pub fn sum_all(&mut self, x: Var) -> Var {
        let total = self.value(x).sum();
        self.push(Array2::from_elem((1, 1), total), Op::SumAll(x))
    }

    pub fn mean_all(&mut self, x: Var) -> Var {
        let n = self.value(x).len();
        let s = self.sum_all(x);
        self.scale(s, F::one() / F::of(n as f64))
    }

    /// Column vector of row sums.
    pub fn sum_rows(&mut self, x: Var) -> Var {
        let out = self.value(x).sum_axis(Axis(1)).insert_axis(Axis(1));
        self.push(out, Op::SumRows(x))
    }

    /// Reverse sweep from a scalar root.
    pub fn backward(&self, root: Var) -> Gradients<F> {
        self.backward_keeping(root, &[])
    }

    /// Like [`Graph::backward`], but also keeps the gradients of the given
    /// intermediate nodes, which are otherwise released during the sweep.
    pub fn backward_keeping(&self, root: Var, keep: &[Var]) -> Gradients<F> {
        assert_eq!(self.shape(root), (1, 1), "backward root must be 1×1");
        let mut grads: Vec<Option<Array2<F>>> = vec![None; root.0 + 1];
        let mut kept = vec![false; root.0 + 1];
        for v in keep {
            if v.0 <= root.0 {
                kept[v.0] = true;
            }
        }
        grads[root.0] = Some(Array2::ones((1, 1)));

        for i in (0..=root.0).rev() {
            let node = &self.nodes[i];
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let gy = if kept[i] { grads[i].clone() } else { grads[i].take() };
            let Some(gy) = gy else { continue };
            let mut send = |v: Var, g: Array2<F>| {
                debug_assert_eq!(g.dim(), self.nodes[v.0].value.dim());
                match &mut grads[v.0] {
                    Some(acc) => *acc += &g,
                    slot @ None => *slot = Some(g),
                }
            };
            match &node.op {
                Op::Leaf => {}
                Op::MatMul(a, b) => {
                    let va = &self.nodes[a.0].value;
                    let vb = &self.nodes[b.0].value;
                    send(*a, gy.dot(&vb.t()));
                    send(*b, va.t().dot(&gy));
                }
                Op::BatchedMatMul {
                    a,
                    b,
                    groups,
                    trans_b,
                } => {
                    let va = &self.nodes[a.0].value;
                    let vb = &self.nodes[b.0].value;
                    let m = va.nrows() / groups;
                    let bn = vb.nrows() / groups;
                    let mut ga = Array2::zeros(va.dim());
                    let mut gb = Array2::zeros(vb.dim());
                    for g in 0..*groups {
                        let ab = va.slice(s![g * m..(g + 1) * m, ..]);
                        let bb = vb.slice(s![g * bn..(g + 1) * bn, ..]);
                        let gyb = gy.slice(s![g * m..(g + 1) * m, ..]);
                        if *trans_b {
                            ga.slice_mut(s![g * m..(g + 1) * m, ..])
                                .assign(&gyb.dot(&bb));
                            gb.slice_mut(s![g * bn..(g + 1) * bn, ..])
                                .assign(&gyb.t().dot(&ab));
                        } else {
                            ga.slice_mut(s![g * m..(g + 1) * m, ..])
                                .assign(&gyb.dot(&bb.t()));
                            gb.slice_mut(s![g * bn..(g + 1) * bn, ..])
                                .assign(&ab.t().dot(&gyb));
                        }
                    }
                    send(*a, ga);
                    send(*b, gb);
                }
                Op::Add(a, b) => {
                    send(*a, gy.clone());
                    send(*b, gy);
                }
                Op::Sub(a, b) => {
                    send(*b, gy.mapv(|v| -v));
                    send(*a, gy);
                }
                Op::Mul(a, b) => {
                    let va = &self.nodes[a.0].value;
                    let vb = &self.nodes[b.0].value;
                    send(*a, &gy * vb);
                    send(*b, &gy * va);
                }
                Op::AddRow(a, row) => {
                    send(*row, gy.sum_axis(Axis(0)).insert_axis(Axis(0)));
                    send(*a, gy);
                }
                Op::Affine(x, scale) => {
                    let sc = *scale;
                    send(*x, gy.mapv(|v| v * sc));
                }
                Op::Sigmoid(x) => {
                    let y = &node.value;
                    let mut g = gy;
                    g.zip_mut_with(y, |g, &y| *g *= y * (F::one() - y));
                    send(*x, g);
                }
                Op::Tanh(x) => {
                    let y = &node.value;
                    let mut g = gy;
                    g.zip_mut_with(y, |g, &y| *g *= F::one() - y * y);
                    send(*x, g);
                }
                Op::Exp(x) => {
                    let mut g = gy;
                    g.zip_mut_with(&node.value, |g, &y| *g *= y);
                    send(*x, g);
                }
                Op::Gelu(x) => {
                    let vx = &self.nodes[x.0].value;
                    let mut g = gy;
                    g.zip_mut_with(vx, |g, &v| *g *= gelu(v).1);
                    send(*x, g);
                }
                Op::Relu(x) => {
                    let vx = &self.nodes[x.0].value;
                    let mut g = gy;
                    g.zip_mut_with(vx, |g, &v| {
                        if v <= F::zero() {
                            *g = F::zero()
                        }
                    });
                    send(*x, g);
                }
                Op::Abs(x) => {
                    let vx = &self.nodes[x.0].value;
                    let mut g = gy;
                    g.zip_mut_with(vx, |g, &v| *g *= v.signum());
                    send(*x, g);
                }
                Op::Sqrt(x) => {
                    let y = &node.value;
                    let half = F::of(0.5);
                    let mut g = gy;
                    g.zip_mut_with(y, |g, &y| *g *= half / y);
                    send(*x, g);
                }
                Op::Log { x, floor } => {
                    let vx = &self.nodes[x.0].value;
                    let fl = *floor;
                    let mut g = gy;
                    g.zip_mut_with(vx, |g, &v| {
                        *g = if v > fl { *g / v } else { F::zero() };
                    });
                    send(*x, g);
                }
                Op::SoftmaxRows(x) => {
                    let y = &node.value;
                    let mut g = gy;
                    for (mut grow, yrow) in g.rows_mut().into_iter().zip(y.rows()) {
                        let dot: F = grow.iter().zip(yrow.iter()).map(|(&a, &b)| a * b).sum();
                        grow.zip_mut_with(&yrow, |gv, &yv| *gv = yv * (*gv - dot));
                    }
                    send(*x, g);
                }
                Op::LogSoftmaxRows(x) => {
                    let y = &node.value;
                    let mut g = gy;
                    for (mut grow, yrow) in g.rows_mut().into_iter().zip(y.rows()) {
                        let total: F = grow.sum();
                        grow.zip_mut_with(&yrow, |gv, &yv| *gv -= yv.exp() * total);
                    }
                    send(*x, g);
                }
                Op::LayerNorm {
                    x,
                    gamma,
                    beta,
                    xhat,
                    inv_std,
                } => {
                    let vg = &self.nodes[gamma.0].value;
                    let cols = xhat.ncols();
                    let n = F::of(cols as f64);
                    send(*beta, gy.sum_axis(Axis(0)).insert_axis(Axis(0)));
                    send(
                        *gamma,
                        (&gy * xhat).sum_axis(Axis(0)).insert_axis(Axis(0)),
                    );
                    let dxhat = &gy * vg;
                    let mut gx = Array2::zeros(xhat.dim());
                    for r in 0..xhat.nrows() {
                        let dr = dxhat.row(r);
                        let xr = xhat.row(r);
                        let sum_d: F = dr.sum();
                        let sum_dx: F = dr.iter().zip(xr.iter()).map(|(&a, &b)| a * b).sum();
                        let k = inv_std[r] / n;
                        for c in 0..cols {
                            gx[[r, c]] = k * (n * dr[c] - sum_d - xr[c] * sum_dx);
                        }
                    }
                    send(*x, gx);
                }
                Op::ConcatCols(parts) => {
                    let mut off = 0;
                    for &p in parts {
                        let w = self.nodes[p.0].value.ncols();
                        send(p, gy.slice(s![.., off..off + w]).to_owned());
                        off += w;
                    }
                }
                Op::SliceCols { x, start } => {
                    let mut g = Array2::zeros(self.nodes[x.0].value.dim());
                    let w = gy.ncols();
                    g.slice_mut(s![.., *start..*start + w]).assign(&gy);
                    send(*x, g);
                }
                Op::ConcatRows(parts) => {
                    let mut off = 0;
                    for &p in parts {
                        let h = self.nodes[p.0].value.nrows();
                        send(p, gy.slice(s![off..off + h, ..]).to_owned());
                        off += h;
                    }
                }
                Op::GatherRows { x, index } => {
                    let mut g = Array2::zeros(self.nodes[x.0].value.dim());
                    for (out_row, &src) in index.iter().enumerate() {
                        let mut dst = g.row_mut(src);
                        dst += &gy.row(out_row);
                    }
                    send(*x, g);
                }
                Op::Reshape(x) => {
                    let dim = self.nodes[x.0].value.dim();
                    let data: Vec<F> = gy.iter().copied().collect();
                    send(*x, Array2::from_shape_vec(dim, data).expect("same size"));
                }
                Op::SplitHeads {
                    x,
                    batch,
                    len,
                    heads,
                } => send(*x, merge_heads(&gy, *batch, *len, *heads)),
                Op::MergeHeads {
                    x,
                    batch,
                    len,
                    heads,
                } => send(*x, split_heads(&gy, *batch, *len, *heads)),
                Op::MaxPoolRows { x, argmax } => {
                    let mut g = Array2::zeros(self.nodes[x.0].value.dim());
                    let cols = gy.ncols();
                    for grp in 0..gy.nrows() {
                        for c in 0..cols {
                            g[[argmax[grp * cols + c], c]] += gy[[grp, c]];
                        }
                    }
                    send(*x, g);
                }
                Op::SumAll(x) => {
                    let dim = self.nodes[x.0].value.dim();
                    send(*x, Array2::from_elem(dim, gy[[0, 0]]));
                }
                Op::SumRows(x) => {
                    let dim = self.nodes[x.0].value.dim();
                    let mut g = Array2::zeros(dim);
                    for (r, mut row) in g.rows_mut().into_iter().enumerate() {
                        row.fill(gy[[r, 0]]);
                    }
                    send(*x, g);
                }
            }
        }

        Gradients { grads }
    }

    /// Gradient of every parameter of `store` bound in this graph, in store
    /// order. Unbound or unreached parameters get `None`.
    pub fn param_grads(&self, grads: &Gradients<F>, store: &ParamStore<F>) -> Vec<Option<Array2<F>>> {
        store
            .ids()
            .map(|id| {
                self.bound
                    .get(&(store.store_id(), id.index()))
                    .and_then(|&v| grads.get(v).cloned())
            })
            .collect()
    }
}

/// Result of [`Graph::backward`].
#[derive(Debug)]
pub struct Gradients<F: Real> {
    grads: Vec<Option<Array2<F>>>,
}

impl<F: Real> Gradients<F> {
    pub fn get(&self, v: Var) -> Option<&Array2<F>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }
}

#[inline]
pub fn sigmoid<F: Real>(v: F) -> F {
    if v >= F::zero() {
        F::one() / (F::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (F::one() + e)
    }
}

/// `(gelu(x), gelu'(x))` for the tanh approximation.
#[inline]
fn gelu<F: Real>(x: F) -> (F, F) {
    let c = F::of((2.0 / std::f64::consts::PI).sqrt());
    let a = F::of(0.044715);
    let half = F::of(0.5);
    let u = c * (x + a * x * x * x);
    let t = u.tanh();
    let y = half * x * (F::one() + t);
    let dy = half * (F::one() + t) + half * x * (F::one() - t * t) * c * (F::one() + F::of(3.0) * a * x * x);
    (y, dy)
}

pub fn softmax_rows<F: Real>(x: &Array2<F>) -> Array2<F> {
    let mut out = x.clone();
    for mut row in out.rows_mut() {
        let max = row.iter().fold(F::neg_infinity(), |m, &v| m.max(v));
        row.mapv_inplace(|v| (v - max).exp());
        let total: F = row.sum();
        row.mapv_inplace(|v| v / total);
    }
    out
}

pub fn log_softmax_rows<F: Real>(x: &Array2<F>) -> Array2<F> {
    let mut out = x.clone();
    for mut row in out.rows_mut() {
        let max = row.iter().fold(F::neg_infinity(), |m, &v| m.max(v));
        let lse = max + row.iter().map(|&v| (v - max).exp()).sum::<F>().ln();
        row.mapv_inplace(|v| v - lse);
    }
    out
}

fn split_heads<F: Real>(x: &Array2<F>, batch: usize, len: usize, heads: usize) -> Array2<F> {
    let (rows, cols) = x.dim();
    assert_eq!(rows, batch * len, "split_heads rows");
    assert_eq!(cols % heads, 0, "split_heads cols");
    let dh = cols / heads;
    let mut out = Array2::zeros((batch * heads * len, dh));
    for b in 0..batch {
        for h in 0..heads {
            let dst = out.slice_mut(s![(b * heads + h) * len..(b * heads + h + 1) * len, ..]);
            let src = x.slice(s![b * len..(b + 1) * len, h * dh..(h + 1) * dh]);
            let mut dst = dst;
            dst.assign(&src);
        }
    }
    out
}

fn merge_heads<F: Real>(x: &Array2<F>, batch: usize, len: usize, heads: usize) -> Array2<F> {
    let (rows, dh) = x.dim();
    assert_eq!(rows, batch * heads * len, "merge_heads rows");
    let mut out = Array2::zeros((batch * len, heads * dh));
    for b in 0..batch {
        for h in 0..heads {
            let src = x.slice(s![(b * heads + h) * len..(b * heads + h + 1) * len, ..]);
            out.slice_mut(s![b * len..(b + 1) * len, h * dh..(h + 1) * dh])
                .assign(&src);
        }
    }
    out
}
