//! Reverse-mode differentiation over [`Tensor2`] values.
//!
//! Network code is written once against [`Backend`]. [`Tape`] records every
//! operation so [`Tape::backward`] can replay them in reverse; [`Eager`] only
//! computes values and drops intermediates as soon as they go out of scope,
//! which keeps inference memory proportional to the live working set.

use std::cell::Cell;
use std::rc::Rc;

use crate::error::{Error, Result};
use crate::nn::{ParamId, ParamStore};
use crate::sparse::NeighborIndex;
use crate::tensor::{self, lrelu_scalar, Tensor2};

/// Operations the network is built from. Every method is differentiable on
/// [`Tape`].
pub trait Backend {
    type Var: Clone;

    fn value<'a>(&'a self, v: &'a Self::Var) -> &'a Tensor2;
    fn constant(&mut self, t: Tensor2) -> Self::Var;
    fn param(&mut self, store: &ParamStore, id: ParamId) -> Self::Var;

    fn matmul(&mut self, a: &Self::Var, b: &Self::Var) -> Result<Self::Var>;
    /// `a · bᵀ`
    fn matmul_nt(&mut self, a: &Self::Var, b: &Self::Var) -> Result<Self::Var>;
    fn add(&mut self, a: &Self::Var, b: &Self::Var) -> Result<Self::Var>;
    /// Adds a `1 × cols` row to every row of `a`.
    fn add_row(&mut self, a: &Self::Var, row: &Self::Var) -> Result<Self::Var>;
    /// Adds a `rows × 1` column to every column of `a`.
    fn add_col(&mut self, a: &Self::Var, col: &Self::Var) -> Result<Self::Var>;
    fn scale(&mut self, a: &Self::Var, s: f64) -> Self::Var;
    fn shift(&mut self, a: &Self::Var, c: f64) -> Self::Var;
    fn lrelu(&mut self, a: &Self::Var, slope: f64) -> Self::Var;
    /// `λ·a + β` with `1 × 1` λ and β.
    fn affine(&mut self, a: &Self::Var, lambda: &Self::Var, beta: &Self::Var) -> Result<Self::Var>;
    fn softmax_rows(&mut self, a: &Self::Var, scale: f64) -> Self::Var;
    fn concat_cols(&mut self, parts: &[Self::Var]) -> Result<Self::Var>;
    fn transpose(&mut self, a: &Self::Var) -> Self::Var;
    /// Log-sum-exp of each row, `rows × 1`.
    fn lse_rows(&mut self, a: &Self::Var) -> Self::Var;
    /// Log-sum-exp of each column, `1 × cols`.
    fn lse_cols(&mut self, a: &Self::Var) -> Self::Var;
    /// `c − a` for a constant `c`.
    fn const_sub(&mut self, c: Tensor2, a: &Self::Var) -> Result<Self::Var>;
    /// Appends a row and a column filled with the `1 × 1` value `z`.
    fn augment(&mut self, s: &Self::Var, z: &Self::Var) -> Result<Self::Var>;
    /// `out[i][t] = s[i][idx(i, t)]`
    fn gather_cols(&mut self, s: &Self::Var, idx: &NeighborIndex) -> Result<Self::Var>;
    /// `out[i][t] = q_i · k_idx(i, t)`
    fn gather_dot(&mut self, q: &Self::Var, k: &Self::Var, idx: &NeighborIndex)
        -> Result<Self::Var>;
    /// `out_i = Σ_t w[i][t] · v_idx(i, t)`
    fn gather_mix(&mut self, w: &Self::Var, v: &Self::Var, idx: &NeighborIndex)
        -> Result<Self::Var>;
    /// `Σ weight · a[i][j]` over the listed cells, as a `1 × 1` value.
    fn weighted_pick(&mut self, a: &Self::Var, cells: &[(usize, usize, f64)]) -> Result<Self::Var>;
    /// `Σ a ⊙ w` as a `1 × 1` value.
    fn dot_const(&mut self, a: &Self::Var, w: &Tensor2) -> Result<Self::Var>;

    /// Multiply-accumulate count of the products evaluated so far.
    fn macs(&self) -> u64;
}

// ---------------------------------------------------------------------------
// forward kernels shared by both backends

fn fwd_add_row(a: &Tensor2, row: &Tensor2) -> Result<Tensor2> {
    if row.rows() != 1 || row.cols() != a.cols() {
        return Err(Error::shape("add_row", a.shape(), row.shape()));
    }
    let mut out = a.clone();
    for r in 0..a.rows() {
        for (o, b) in out.row_mut(r).iter_mut().zip(row.data()) {
            *o += b;
        }
    }
    Ok(out)
}

fn fwd_add_col(a: &Tensor2, col: &Tensor2) -> Result<Tensor2> {
    if col.cols() != 1 || col.rows() != a.rows() {
        return Err(Error::shape("add_col", a.shape(), col.shape()));
    }
    let mut out = a.clone();
    for r in 0..a.rows() {
        let c = col.data()[r];
        out.row_mut(r).iter_mut().for_each(|o| *o += c);
    }
    Ok(out)
}

fn check_scalar(op: &'static str, t: &Tensor2) -> Result<f64> {
    if t.shape() != (1, 1) {
        return Err(Error::shape(op, t.shape(), (1, 1)));
    }
    Ok(t.data()[0])
}

fn fwd_affine(a: &Tensor2, lambda: &Tensor2, beta: &Tensor2) -> Result<Tensor2> {
    let l = check_scalar("affine", lambda)?;
    let b = check_scalar("affine", beta)?;
    Ok(a.map(|v| l * v + b))
}

fn fwd_concat(parts: &[&Tensor2]) -> Result<Tensor2> {
    let rows = parts.first().map_or(0, |p| p.rows());
    for p in parts {
        if p.rows() != rows {
            return Err(Error::shape("concat_cols", (rows, 0), p.shape()));
        }
    }
    let cols: usize = parts.iter().map(|p| p.cols()).sum();
    let mut out = Tensor2::zeros(rows, cols);
    for r in 0..rows {
        let mut off = 0;
        let orow = out.row_mut(r);
        for p in parts {
            orow[off..off + p.cols()].copy_from_slice(p.row(r));
            off += p.cols();
        }
    }
    Ok(out)
}

fn fwd_lse_rows(a: &Tensor2) -> Tensor2 {
    Tensor2::from_fn(a.rows(), 1, |r, _| {
        tensor::logsumexp(a.row(r).iter().copied())
    })
}

fn fwd_lse_cols(a: &Tensor2) -> Tensor2 {
    Tensor2::from_fn(1, a.cols(), |_, c| {
        tensor::logsumexp((0..a.rows()).map(|r| a.get(r, c)))
    })
}

fn fwd_augment(s: &Tensor2, z: &Tensor2) -> Result<Tensor2> {
    let z = check_scalar("augment", z)?;
    let (n, m) = s.shape();
    Ok(Tensor2::from_fn(n + 1, m + 1, |i, j| {
        if i < n && j < m {
            s.get(i, j)
        } else {
            z
        }
    }))
}

fn check_index(op: &'static str, rows: usize, keys: usize, idx: &NeighborIndex) -> Result<()> {
    if idx.n_queries() != rows || idx.n_keys() != keys {
        return Err(Error::shape(op, (rows, keys), (idx.n_queries(), idx.n_keys())));
    }
    Ok(())
}

fn fwd_gather_cols(s: &Tensor2, idx: &NeighborIndex) -> Result<Tensor2> {
    check_index("gather_cols", s.rows(), s.cols(), idx)?;
    let k = idx.k();
    let mut out = Tensor2::zeros(s.rows(), k);
    for i in 0..s.rows() {
        let srow = s.row(i);
        for (o, &j) in out.row_mut(i).iter_mut().zip(idx.row(i)) {
            *o = srow[j];
        }
    }
    Ok(out)
}

fn fwd_gather_dot(q: &Tensor2, k: &Tensor2, idx: &NeighborIndex) -> Result<Tensor2> {
    check_index("gather_dot", q.rows(), k.rows(), idx)?;
    if q.cols() != k.cols() {
        return Err(Error::shape("gather_dot", q.shape(), k.shape()));
    }
    let mut out = Tensor2::zeros(q.rows(), idx.k());
    for i in 0..q.rows() {
        let qrow = q.row(i);
        for (o, &j) in out.row_mut(i).iter_mut().zip(idx.row(i)) {
            *o = tensor::dot(qrow, k.row(j));
        }
    }
    Ok(out)
}

fn fwd_gather_mix(w: &Tensor2, v: &Tensor2, idx: &NeighborIndex) -> Result<Tensor2> {
    check_index("gather_mix", w.rows(), v.rows(), idx)?;
    if w.cols() != idx.k() {
        return Err(Error::shape("gather_mix", w.shape(), (idx.n_queries(), idx.k())));
    }
    let d = v.cols();
    let mut out = Tensor2::zeros(w.rows(), d);
    for i in 0..w.rows() {
        let wrow = w.row(i);
        let orow = out.row_mut(i);
        for (&wt, &j) in wrow.iter().zip(idx.row(i)) {
            for (o, &x) in orow.iter_mut().zip(v.row(j)) {
                *o += wt * x;
            }
        }
    }
    Ok(out)
}

fn fwd_weighted_pick(a: &Tensor2, cells: &[(usize, usize, f64)]) -> Result<Tensor2> {
    let mut acc = 0.0;
    for &(i, j, w) in cells {
        if i >= a.rows() || j >= a.cols() {
            return Err(Error::shape("weighted_pick", a.shape(), (i, j)));
        }
        acc += w * a.get(i, j);
    }
    Ok(Tensor2::scalar(acc))
}

fn fwd_dot_const(a: &Tensor2, w: &Tensor2) -> Result<Tensor2> {
    if a.shape() != w.shape() {
        return Err(Error::shape("dot_const", a.shape(), w.shape()));
    }
    Ok(Tensor2::scalar(tensor::dot(a.data(), w.data())))
}

fn product_macs(a: (usize, usize), b_cols: usize) -> u64 {
    (a.0 * a.1 * b_cols) as u64
}

// ---------------------------------------------------------------------------
// Tape

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Param(ParamId),
    MatMul(usize, usize),
    MatMulNt(usize, usize),
    Add(usize, usize),
    AddRow(usize, usize),
    AddCol(usize, usize),
    Scale(usize, f64),
    Shift(usize),
    LRelu(usize, f64),
    Affine(usize, usize, usize),
    Softmax(usize, f64),
    Concat(Vec<usize>),
    Transpose(usize),
    LseRows(usize),
    LseCols(usize),
    ConstSub(usize),
    Augment(usize, usize),
    GatherCols(usize, NeighborIndex),
    GatherDot(usize, usize, NeighborIndex),
    GatherMix(usize, usize, NeighborIndex),
    WeightedPick(usize, Vec<(usize, usize, f64)>),
    DotConst(usize, Tensor2),
}

struct Node {
    value: Tensor2,
    op: Op,
}

/// Recording backend. Single-threaded; use one tape per image pair.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    macs: u64,
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

    fn push(&mut self, value: Tensor2, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    fn val(&self, v: Var) -> &Tensor2 {
        &self.nodes[v.0].value
    }

    /// Back-propagates `seed` (the gradient of some scalar w.r.t. `output`)
    /// through everything recorded before `output`.
    pub fn backward(&self, output: Var, seed: &Tensor2) -> Result<Gradients> {
        if output.0 >= self.nodes.len() {
            return Err(Error::Usage(format!(
                "backward from node {} but the tape holds {} nodes; run the forward pass first",
                output.0,
                self.nodes.len()
            )));
        }
        let out_shape = self.nodes[output.0].value.shape();
        if seed.shape() != out_shape {
            return Err(Error::Usage(format!(
                "upstream gradient shape {:?} does not match output shape {:?}",
                seed.shape(),
                out_shape
            )));
        }
        let mut grads: Vec<Option<Tensor2>> = (0..=output.0).map(|_| None).collect();
        grads[output.0] = Some(seed.clone());

        for id in (0..=output.0).rev() {
            let node = &self.nodes[id];
            // leaf gradients stay in place for the caller
            if matches!(node.op, Op::Leaf | Op::Param(_)) {
                continue;
            }
            let Some(g) = grads[id].take() else {
                continue;
            };
            self.propagate(node, &g, &mut grads)?;
        }
        Ok(Gradients { grads })
    }

    fn propagate(&self, node: &Node, g: &Tensor2, grads: &mut [Option<Tensor2>]) -> Result<()> {
        let mut acc = |target: usize, delta: Tensor2| match &mut grads[target] {
            Some(existing) => existing.add_assign(&delta),
            slot @ None => *slot = Some(delta),
        };
        let v = |i: usize| &self.nodes[i].value;
        match &node.op {
            Op::Leaf | Op::Param(_) => {}
            Op::MatMul(a, b) => {
                acc(*a, tensor::matmul_nt(g, v(*b))?);
                acc(*b, tensor::matmul_tn(v(*a), g)?);
            }
            Op::MatMulNt(a, b) => {
                acc(*a, tensor::matmul(g, v(*b))?);
                acc(*b, tensor::matmul_tn(g, v(*a))?);
            }
            Op::Add(a, b) => {
                acc(*a, g.clone());
                acc(*b, g.clone());
            }
            Op::AddRow(a, r) => {
                acc(*a, g.clone());
                let mut dr = Tensor2::zeros(1, g.cols());
                for i in 0..g.rows() {
                    for (d, x) in dr.data_mut().iter_mut().zip(g.row(i)) {
                        *d += x;
                    }
                }
                acc(*r, dr);
            }
            Op::AddCol(a, c) => {
                acc(*a, g.clone());
                acc(*c, Tensor2::from_fn(g.rows(), 1, |i, _| g.row(i).iter().sum()));
            }
            Op::Scale(a, s) => acc(*a, g.map(|x| x * s)),
            Op::Shift(a) => acc(*a, g.clone()),
            Op::LRelu(a, slope) => {
                let x = v(*a);
                let mut d = g.clone();
                for (dv, &xv) in d.data_mut().iter_mut().zip(x.data()) {
                    if xv < 0.0 {
                        *dv *= slope;
                    }
                }
                acc(*a, d);
            }
            Op::Affine(a, l, b) => {
                let lambda = v(*l).data()[0];
                acc(*a, g.map(|x| x * lambda));
                acc(*l, Tensor2::scalar(tensor::dot(g.data(), v(*a).data())));
                acc(*b, Tensor2::scalar(g.sum()));
            }
            Op::Softmax(a, scale) => {
                let y = &node.value;
                let mut d = Tensor2::zeros(y.rows(), y.cols());
                for r in 0..y.rows() {
                    let yr = y.row(r);
                    let gr = g.row(r);
                    let inner = tensor::dot(yr, gr);
                    for ((dv, &yv), &gv) in d.row_mut(r).iter_mut().zip(yr).zip(gr) {
                        *dv = yv * (gv - inner) / scale;
                    }
                }
                acc(*a, d);
            }
            Op::Concat(parts) => {
                let mut off = 0;
                for &p in parts {
                    let w = v(p).cols();
                    acc(p, Tensor2::from_fn(g.rows(), w, |r, c| g.get(r, off + c)));
                    off += w;
                }
            }
            Op::Transpose(a) => acc(*a, g.transpose()),
            Op::LseRows(a) => {
                let x = v(*a);
                let out = &node.value;
                acc(
                    *a,
                    Tensor2::from_fn(x.rows(), x.cols(), |r, c| {
                        g.get(r, 0) * (x.get(r, c) - out.get(r, 0)).exp()
                    }),
                );
            }
            Op::LseCols(a) => {
                let x = v(*a);
                let out = &node.value;
                acc(
                    *a,
                    Tensor2::from_fn(x.rows(), x.cols(), |r, c| {
                        g.get(0, c) * (x.get(r, c) - out.get(0, c)).exp()
                    }),
                );
            }
            Op::ConstSub(a) => acc(*a, g.map(|x| -x)),
            Op::Augment(s, z) => {
                let (n, m) = v(*s).shape();
                acc(*s, Tensor2::from_fn(n, m, |i, j| g.get(i, j)));
                let mut dz = 0.0;
                for i in 0..=n {
                    for j in 0..=m {
                        if i == n || j == m {
                            dz += g.get(i, j);
                        }
                    }
                }
                acc(*z, Tensor2::scalar(dz));
            }
            Op::GatherCols(s, idx) => {
                let (n, m) = v(*s).shape();
                let mut ds = Tensor2::zeros(n, m);
                for i in 0..n {
                    let drow = ds.row_mut(i);
                    for (&j, &gv) in idx.row(i).iter().zip(g.row(i)) {
                        drow[j] += gv;
                    }
                }
                acc(*s, ds);
            }
            Op::GatherDot(q, k, idx) => {
                let (qv, kv) = (v(*q), v(*k));
                let mut dq = Tensor2::zeros(qv.rows(), qv.cols());
                let mut dk = Tensor2::zeros(kv.rows(), kv.cols());
                for i in 0..qv.rows() {
                    for (&j, &gv) in idx.row(i).iter().zip(g.row(i)) {
                        if gv == 0.0 {
                            continue;
                        }
                        for (d, &x) in dq.row_mut(i).iter_mut().zip(kv.row(j)) {
                            *d += gv * x;
                        }
                        for (d, &x) in dk.row_mut(j).iter_mut().zip(qv.row(i)) {
                            *d += gv * x;
                        }
                    }
                }
                acc(*q, dq);
                acc(*k, dk);
            }
            Op::GatherMix(w, vv, idx) => {
                let (wv, val) = (v(*w), v(*vv));
                let mut dw = Tensor2::zeros(wv.rows(), wv.cols());
                let mut dv = Tensor2::zeros(val.rows(), val.cols());
                for i in 0..wv.rows() {
                    let grow = g.row(i);
                    for (t, &j) in idx.row(i).iter().enumerate() {
                        dw.set(i, t, tensor::dot(grow, val.row(j)));
                        let wt = wv.get(i, t);
                        for (d, &x) in dv.row_mut(j).iter_mut().zip(grow) {
                            *d += wt * x;
                        }
                    }
                }
                acc(*w, dw);
                acc(*vv, dv);
            }
            Op::WeightedPick(a, cells) => {
                let (n, m) = v(*a).shape();
                let gv = g.data()[0];
                let mut d = Tensor2::zeros(n, m);
                for &(i, j, w) in cells {
                    d.set(i, j, d.get(i, j) + w * gv);
                }
                acc(*a, d);
            }
            Op::DotConst(a, w) => {
                let gv = g.data()[0];
                acc(*a, w.map(|x| x * gv));
            }
        }
        Ok(())
    }
}

/// Result of [`Tape::backward`]: gradients of every leaf and parameter node
/// that the output depends on.
pub struct Gradients {
    grads: Vec<Option<Tensor2>>,
}

impl Gradients {
    pub fn wrt(&self, v: Var) -> Option<&Tensor2> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Parameter gradients in tape order; a parameter read more than once
    /// appears once per read.
    pub fn param_grads(&self, tape: &Tape) -> Vec<(ParamId, Tensor2)> {
        self.grads
            .iter()
            .enumerate()
            .filter_map(|(i, g)| match (g, &tape.nodes[i].op) {
                (Some(g), Op::Param(id)) => Some((*id, g.clone())),
                _ => None,
            })
            .collect()
    }

    /// Adds every parameter gradient into the store's gradient slots.
    pub fn accumulate_into(&self, tape: &Tape, store: &mut ParamStore) {
        for (i, g) in self.grads.iter().enumerate() {
            if let (Some(g), Op::Param(id)) = (g, &tape.nodes[i].op) {
                store.grad_mut(*id).add_assign(g);
            }
        }
    }
}

impl Backend for Tape {
    type Var = Var;

    fn value<'a>(&'a self, v: &'a Var) -> &'a Tensor2 {
        self.val(*v)
    }

    fn constant(&mut self, t: Tensor2) -> Var {
        self.push(t, Op::Leaf)
    }

    fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        self.push(store.value(id).clone(), Op::Param(id))
    }

    fn matmul(&mut self, a: &Var, b: &Var) -> Result<Var> {
        let out = tensor::matmul(self.val(*a), self.val(*b))?;
        self.macs += product_macs(self.val(*a).shape(), out.cols());
        Ok(self.push(out, Op::MatMul(a.0, b.0)))
    }

    fn matmul_nt(&mut self, a: &Var, b: &Var) -> Result<Var> {
        let out = tensor::matmul_nt(self.val(*a), self.val(*b))?;
        self.macs += product_macs(self.val(*a).shape(), out.cols());
        Ok(self.push(out, Op::MatMulNt(a.0, b.0)))
    }

    fn add(&mut self, a: &Var, b: &Var) -> Result<Var> {
        let out = tensor::add(self.val(*a), self.val(*b))?;
        Ok(self.push(out, Op::Add(a.0, b.0)))
    }

    fn add_row(&mut self, a: &Var, row: &Var) -> Result<Var> {
        let out = fwd_add_row(self.val(*a), self.val(*row))?;
        Ok(self.push(out, Op::AddRow(a.0, row.0)))
    }

    fn add_col(&mut self, a: &Var, col: &Var) -> Result<Var> {
        let out = fwd_add_col(self.val(*a), self.val(*col))?;
        Ok(self.push(out, Op::AddCol(a.0, col.0)))
    }

    fn scale(&mut self, a: &Var, s: f64) -> Var {
        let out = self.val(*a).map(|x| x * s);
        self.push(out, Op::Scale(a.0, s))
    }

    fn shift(&mut self, a: &Var, c: f64) -> Var {
        let out = self.val(*a).map(|x| x + c);
        self.push(out, Op::Shift(a.0))
    }

    fn lrelu(&mut self, a: &Var, slope: f64) -> Var {
        let out = self.val(*a).map(|x| lrelu_scalar(x, slope));
        self.push(out, Op::LRelu(a.0, slope))
    }

    fn affine(&mut self, a: &Var, lambda: &Var, beta: &Var) -> Result<Var> {
        let out = fwd_affine(self.val(*a), self.val(*lambda), self.val(*beta))?;
        Ok(self.push(out, Op::Affine(a.0, lambda.0, beta.0)))
    }

    fn softmax_rows(&mut self, a: &Var, scale: f64) -> Var {
        let out = tensor::softmax_rows(self.val(*a), scale);
        self.push(out, Op::Softmax(a.0, scale))
    }

    fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let vals: Vec<&Tensor2> = parts.iter().map(|p| self.val(*p)).collect();
        let out = fwd_concat(&vals)?;
        Ok(self.push(out, Op::Concat(parts.iter().map(|p| p.0).collect())))
    }

    fn transpose(&mut self, a: &Var) -> Var {
        let out = self.val(*a).transpose();
        self.push(out, Op::Transpose(a.0))
    }

    fn lse_rows(&mut self, a: &Var) -> Var {
        let out = fwd_lse_rows(self.val(*a));
        self.push(out, Op::LseRows(a.0))
    }

    fn lse_cols(&mut self, a: &Var) -> Var {
        let out = fwd_lse_cols(self.val(*a));
        self.push(out, Op::LseCols(a.0))
    }

    fn const_sub(&mut self, c: Tensor2, a: &Var) -> Result<Var> {
        let x = self.val(*a);
        if c.shape() != x.shape() {
            return Err(Error::shape("const_sub", c.shape(), x.shape()));
        }
        let mut out = c;
        for (o, v) in out.data_mut().iter_mut().zip(x.data()) {
            *o -= v;
        }
        Ok(self.push(out, Op::ConstSub(a.0)))
    }

    fn augment(&mut self, s: &Var, z: &Var) -> Result<Var> {
        let out = fwd_augment(self.val(*s), self.val(*z))?;
        Ok(self.push(out, Op::Augment(s.0, z.0)))
    }

    fn gather_cols(&mut self, s: &Var, idx: &NeighborIndex) -> Result<Var> {
        let out = fwd_gather_cols(self.val(*s), idx)?;
        Ok(self.push(out, Op::GatherCols(s.0, idx.clone())))
    }

    fn gather_dot(&mut self, q: &Var, k: &Var, idx: &NeighborIndex) -> Result<Var> {
        let out = fwd_gather_dot(self.val(*q), self.val(*k), idx)?;
        self.macs += product_macs((out.rows(), out.cols()), self.val(*q).cols());
        Ok(self.push(out, Op::GatherDot(q.0, k.0, idx.clone())))
    }

    fn gather_mix(&mut self, w: &Var, v: &Var, idx: &NeighborIndex) -> Result<Var> {
        let out = fwd_gather_mix(self.val(*w), self.val(*v), idx)?;
        self.macs += product_macs(self.val(*w).shape(), out.cols());
        Ok(self.push(out, Op::GatherMix(w.0, v.0, idx.clone())))
    }

    fn weighted_pick(&mut self, a: &Var, cells: &[(usize, usize, f64)]) -> Result<Var> {
        let out = fwd_weighted_pick(self.val(*a), cells)?;
        Ok(self.push(out, Op::WeightedPick(a.0, cells.to_vec())))
    }

    fn dot_const(&mut self, a: &Var, w: &Tensor2) -> Result<Var> {
        let out = fwd_dot_const(self.val(*a), w)?;
        Ok(self.push(out, Op::DotConst(a.0, w.clone())))
    }

    fn macs(&self) -> u64 {
        self.macs
    }
}

// ---------------------------------------------------------------------------
// Eager

struct Held {
    value: Tensor2,
    meter: Rc<Meter>,
}

#[derive(Default)]
struct Meter {
    live: Cell<usize>,
    peak: Cell<usize>,
}

impl Drop for Held {
    fn drop(&mut self) {
        let bytes = self.value.len() * std::mem::size_of::<f64>();
        self.meter.live.set(self.meter.live.get() - bytes);
    }
}

/// Value handle of the [`Eager`] backend; the tensor is freed when the last
/// handle is dropped.
#[derive(Clone)]
pub struct EagerVar(Rc<Held>);

/// Non-recording backend for inference and benchmarking.
pub struct Eager {
    meter: Rc<Meter>,
    macs: u64,
}

impl Default for Eager {
    fn default() -> Self {
        Self::new()
    }
}

impl Eager {
    pub fn new() -> Self {
        Self {
            meter: Rc::new(Meter::default()),
            macs: 0,
        }
    }

    fn wrap(&self, value: Tensor2) -> EagerVar {
        let bytes = value.len() * std::mem::size_of::<f64>();
        let live = self.meter.live.get() + bytes;
        self.meter.live.set(live);
        if live > self.meter.peak.get() {
            self.meter.peak.set(live);
        }
        EagerVar(Rc::new(Held {
            value,
            meter: Rc::clone(&self.meter),
        }))
    }

    /// Peak bytes held by live tensors since construction.
    pub fn peak_bytes(&self) -> usize {
        self.meter.peak.get()
    }

    pub fn live_bytes(&self) -> usize {
        self.meter.live.get()
    }
}

impl Backend for Eager {
    type Var = EagerVar;

    fn value<'a>(&'a self, v: &'a EagerVar) -> &'a Tensor2 {
        &v.0.value
    }

    fn constant(&mut self, t: Tensor2) -> EagerVar {
        self.wrap(t)
    }

    fn param(&mut self, store: &ParamStore, id: ParamId) -> EagerVar {
        self.wrap(store.value(id).clone())
    }

    fn matmul(&mut self, a: &EagerVar, b: &EagerVar) -> Result<EagerVar> {
        let out = tensor::matmul(&a.0.value, &b.0.value)?;
        self.macs += product_macs(a.0.value.shape(), out.cols());
        Ok(self.wrap(out))
    }

    fn matmul_nt(&mut self, a: &EagerVar, b: &EagerVar) -> Result<EagerVar> {
        let out = tensor::matmul_nt(&a.0.value, &b.0.value)?;
        self.macs += product_macs(a.0.value.shape(), out.cols());
        Ok(self.wrap(out))
    }

    fn add(&mut self, a: &EagerVar, b: &EagerVar) -> Result<EagerVar> {
        Ok(self.wrap(tensor::add(&a.0.value, &b.0.value)?))
    }

    fn add_row(&mut self, a: &EagerVar, row: &EagerVar) -> Result<EagerVar> {
        Ok(self.wrap(fwd_add_row(&a.0.value, &row.0.value)?))
    }

    fn add_col(&mut self, a: &EagerVar, col: &EagerVar) -> Result<EagerVar> {
        Ok(self.wrap(fwd_add_col(&a.0.value, &col.0.value)?))
    }

    fn scale(&mut self, a: &EagerVar, s: f64) -> EagerVar {
        self.wrap(a.0.value.map(|x| x * s))
    }

    fn shift(&mut self, a: &EagerVar, c: f64) -> EagerVar {
        self.wrap(a.0.value.map(|x| x + c))
    }

    fn lrelu(&mut self, a: &EagerVar, slope: f64) -> EagerVar {
        self.wrap(a.0.value.map(|x| lrelu_scalar(x, slope)))
    }

    fn affine(&mut self, a: &EagerVar, lambda: &EagerVar, beta: &EagerVar) -> Result<EagerVar> {
        Ok(self.wrap(fwd_affine(&a.0.value, &lambda.0.value, &beta.0.value)?))
    }

    fn softmax_rows(&mut self, a: &EagerVar, scale: f64) -> EagerVar {
        self.wrap(tensor::softmax_rows(&a.0.value, scale))
    }

    fn concat_cols(&mut self, parts: &[EagerVar]) -> Result<EagerVar> {
        let vals: Vec<&Tensor2> = parts.iter().map(|p| &p.0.value).collect();
        Ok(self.wrap(fwd_concat(&vals)?))
    }

    fn transpose(&mut self, a: &EagerVar) -> EagerVar {
        self.wrap(a.0.value.transpose())
    }

    fn lse_rows(&mut self, a: &EagerVar) -> EagerVar {
        self.wrap(fwd_lse_rows(&a.0.value))
    }

    fn lse_cols(&mut self, a: &EagerVar) -> EagerVar {
        self.wrap(fwd_lse_cols(&a.0.value))
    }

    fn const_sub(&mut self, c: Tensor2, a: &EagerVar) -> Result<EagerVar> {
        let x = &a.0.value;
        if c.shape() != x.shape() {
            return Err(Error::shape("const_sub", c.shape(), x.shape()));
        }
        let mut out = c;
        for (o, v) in out.data_mut().iter_mut().zip(x.data()) {
            *o -= v;
        }
        Ok(self.wrap(out))
    }

    fn augment(&mut self, s: &EagerVar, z: &EagerVar) -> Result<EagerVar> {
        Ok(self.wrap(fwd_augment(&s.0.value, &z.0.value)?))
    }

    fn gather_cols(&mut self, s: &EagerVar, idx: &NeighborIndex) -> Result<EagerVar> {
        Ok(self.wrap(fwd_gather_cols(&s.0.value, idx)?))
    }

    fn gather_dot(&mut self, q: &EagerVar, k: &EagerVar, idx: &NeighborIndex) -> Result<EagerVar> {
        let out = fwd_gather_dot(&q.0.value, &k.0.value, idx)?;
        self.macs += product_macs((out.rows(), out.cols()), q.0.value.cols());
        Ok(self.wrap(out))
    }

    fn gather_mix(&mut self, w: &EagerVar, v: &EagerVar, idx: &NeighborIndex) -> Result<EagerVar> {
        let out = fwd_gather_mix(&w.0.value, &v.0.value, idx)?;
        self.macs += product_macs(w.0.value.shape(), out.cols());
        Ok(self.wrap(out))
    }

    fn weighted_pick(&mut self, a: &EagerVar, cells: &[(usize, usize, f64)]) -> Result<EagerVar> {
        Ok(self.wrap(fwd_weighted_pick(&a.0.value, cells)?))
    }

    fn dot_const(&mut self, a: &EagerVar, w: &Tensor2) -> Result<EagerVar> {
        Ok(self.wrap(fwd_dot_const(&a.0.value, w)?))
    }

    fn macs(&self) -> u64 {
        self.macs
    }
}
