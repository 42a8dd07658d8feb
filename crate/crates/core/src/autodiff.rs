//! Reverse-mode automatic differentiation over [`Matrix`] values.
//!
//! A [`Graph`] is a write-once tape: every operation appends a node holding
//! its forward value, and [`Graph::backward`] walks the tape in reverse.
//! Parameters enter the tape through [`Graph::param`], which binds a
//! [`ParamId`] from a [`ParamStore`] so gradients can be routed back.
//!
//! The op set is closed under differentiation of the gradient expressions
//! the discriminator needs, so a gradient can be written as an ordinary tape
//! expression and differentiated again.

use std::collections::HashMap;

use crate::params::{ParamId, ParamStore};
use crate::tensor::{sigmoid, Matrix};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulCol(Var, Var),
    MulScalar(Var, Var),
    Scale(Var, f64),
    AddConst(Var),
    Sigmoid(Var),
    Tanh(Var),
    Relu(Var),
    Exp(Var),
    Log(Var),
    Sqrt(Var),
    Transpose(Var),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    SliceCols(Var, usize),
    SliceRows(Var, usize),
    GatherRows(Var, Vec<usize>),
    ScatterRows(Var, Vec<usize>),
    GatherFlat(Var, Vec<usize>),
    ScatterFlat(Var, Vec<usize>),
    Reshape(Var),
    Sum(Var),
    RowSums(Var),
    SoftmaxRows(Var),
    LogSoftmaxRows(Var),
    SegmentSoftmax(Var, Vec<usize>, usize),
}

struct Node {
    value: Matrix,
    op: Op,
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    params: HashMap<ParamId, Var>,
    param_order: Vec<(ParamId, Var)>,
}

/// Gradients produced by [`Graph::backward`].
pub struct Gradients {
    grads: Vec<Option<Matrix>>,
    params: Vec<(ParamId, Var)>,
}

impl Gradients {
    /// Gradient with respect to any tape variable; `None` if it did not
    /// influence the output.
    pub fn of(&self, v: Var) -> Option<&Matrix> {
        self.grads[v.0].as_ref()
    }

    /// Gradients of every parameter bound on the tape, in binding order.
    pub fn params(&self) -> impl Iterator<Item = (ParamId, &Matrix)> + '_ {
        self.params
            .iter()
            .filter_map(|&(id, v)| self.grads[v.0].as_ref().map(|g| (id, g)))
    }

    pub fn param(&self, id: ParamId) -> Option<&Matrix> {
        self.params
            .iter()
            .find(|(p, _)| *p == id)
            .and_then(|&(_, v)| self.grads[v.0].as_ref())
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    fn push(&mut self, value: Matrix, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Current tape length, for a later [`Graph::rewind`].
    pub fn mark(&self) -> usize {
        self.nodes.len()
    }

    /// Drops every node recorded after `mark`. Vars created since then
    /// become invalid.
    pub fn rewind(&mut self, mark: usize) {
        self.nodes.truncate(mark);
        self.params.retain(|_, v| v.0 < mark);
        self.param_order.retain(|(_, v)| v.0 < mark);
    }

    pub fn value(&self, v: Var) -> &Matrix {
        &self.nodes[v.0].value
    }

    pub fn constant(&mut self, value: Matrix) -> Var {
        self.push(value, Op::Leaf)
    }

    /// Binds a parameter; repeated calls with the same id return the same var.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        let v = self.push(store.get(id).clone(), Op::Leaf);
        self.params.insert(id, v);
        self.param_order.push((id, v));
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).matmul(self.value(b));
        self.push(value, Op::MatMul(a, b))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).add(self.value(b));
        self.push(value, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).sub(self.value(b));
        self.push(value, Op::Sub(a, b))
    }

    /// Element-wise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).hadamard(self.value(b));
        self.push(value, Op::Mul(a, b))
    }

    /// `a (m x n) + row (1 x n)` broadcast over rows.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let (m, n) = self.value(a).shape();
        assert_eq!(self.value(row).shape(), (1, n), "add_row shape mismatch");
        let mut value = self.value(a).clone();
        let r = self.value(row).data().to_vec();
        for i in 0..m {
            for (x, b) in value.row_mut(i).iter_mut().zip(&r) {
                *x += b;
            }
        }
        self.push(value, Op::AddRow(a, row))
    }

    /// `a (m x n) ⊙ col (m x 1)` broadcast over columns.
    pub fn mul_col(&mut self, a: Var, col: Var) -> Var {
        let (m, _) = self.value(a).shape();
        assert_eq!(self.value(col).shape(), (m, 1), "mul_col shape mismatch");
        let mut value = self.value(a).clone();
        for i in 0..m {
            let c = self.value(col).get(i, 0);
            for x in value.row_mut(i) {
                *x *= c;
            }
        }
        self.push(value, Op::MulCol(a, col))
    }

    /// `a * s` for a `1 x 1` variable `s`.
    pub fn mul_scalar(&mut self, a: Var, s: Var) -> Var {
        let k = self.value(s).item();
        let value = self.value(a).scale(k);
        self.push(value, Op::MulScalar(a, s))
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Var {
        let value = self.value(a).scale(k);
        self.push(value, Op::Scale(a, k))
    }

    pub fn add_const(&mut self, a: Var, k: f64) -> Var {
        let value = self.value(a).map(|x| x + k);
        self.push(value, Op::AddConst(a))
    }

    /// `1 - a`.
    pub fn one_minus(&mut self, a: Var) -> Var {
        let n = self.scale(a, -1.0);
        self.add_const(n, 1.0)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let value = self.value(a).map(sigmoid);
        self.push(value, Op::Sigmoid(a))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let value = self.value(a).map(f64::tanh);
        self.push(value, Op::Tanh(a))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let value = self.value(a).map(|x| x.max(0.0));
        self.push(value, Op::Relu(a))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let value = self.value(a).map(f64::exp);
        self.push(value, Op::Exp(a))
    }

    pub fn log(&mut self, a: Var) -> Var {
        let value = self.value(a).map(f64::ln);
        self.push(value, Op::Log(a))
    }

    pub fn sqrt(&mut self, a: Var) -> Var {
        let value = self.value(a).map(f64::sqrt);
        self.push(value, Op::Sqrt(a))
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.mul(a, a)
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let value = self.value(a).transpose();
        self.push(value, Op::Transpose(a))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let mats: Vec<&Matrix> = parts.iter().map(|&p| self.value(p)).collect();
        let value = Matrix::concat_cols(&mats);
        self.push(value, Op::ConcatCols(parts.to_vec()))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let mats: Vec<&Matrix> = parts.iter().map(|&p| self.value(p)).collect();
        let value = Matrix::concat_rows(&mats);
        self.push(value, Op::ConcatRows(parts.to_vec()))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Var {
        let value = self.value(a).slice_cols(start, len);
        self.push(value, Op::SliceCols(a, start))
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Var {
        let src = self.value(a);
        let cols = src.cols();
        let value = Matrix::from_vec(
            len,
            cols,
            src.data()[start * cols..(start + len) * cols].to_vec(),
        );
        self.push(value, Op::SliceRows(a, start))
    }

    pub fn row(&mut self, a: Var, i: usize) -> Var {
        self.slice_rows(a, i, 1)
    }

    pub fn gather_rows(&mut self, a: Var, idx: &[usize]) -> Var {
        let value = self.value(a).gather_rows(idx);
        self.push(value, Op::GatherRows(a, idx.to_vec()))
    }

    /// `out[idx[i]] += a[i]` with `out` having `n` rows.
    pub fn scatter_rows(&mut self, a: Var, idx: &[usize], n: usize) -> Var {
        let src = self.value(a);
        assert_eq!(src.rows(), idx.len(), "scatter_rows index length mismatch");
        let mut value = Matrix::zeros(n, src.cols());
        for (i, &t) in idx.iter().enumerate() {
            for (o, x) in value.row_mut(t).iter_mut().zip(src.row(i)) {
                *o += x;
            }
        }
        self.push(value, Op::ScatterRows(a, idx.to_vec()))
    }

    /// `out.flat[k] = a.flat[idx[k]]`, shaped `rows x cols`.
    pub fn gather_flat(&mut self, a: Var, idx: &[usize], rows: usize, cols: usize) -> Var {
        let src = self.value(a).data();
        let value = Matrix::from_vec(rows, cols, idx.iter().map(|&i| src[i]).collect());
        self.push(value, Op::GatherFlat(a, idx.to_vec()))
    }

    /// `out.flat[idx[k]] += a.flat[k]`, shaped `rows x cols`. Adjoint of
    /// [`Graph::gather_flat`].
    pub fn scatter_flat(&mut self, a: Var, idx: &[usize], rows: usize, cols: usize) -> Var {
        let src = self.value(a).data();
        assert_eq!(src.len(), idx.len(), "scatter_flat index length mismatch");
        let mut value = Matrix::zeros(rows, cols);
        for (k, &t) in idx.iter().enumerate() {
            value.data_mut()[t] += src[k];
        }
        self.push(value, Op::ScatterFlat(a, idx.to_vec()))
    }

    pub fn reshape(&mut self, a: Var, rows: usize, cols: usize) -> Var {
        let value = self.value(a).reshape(rows, cols);
        self.push(value, Op::Reshape(a))
    }

    /// Sum of all entries, `1 x 1`.
    pub fn sum(&mut self, a: Var) -> Var {
        let value = Matrix::scalar(self.value(a).sum());
        self.push(value, Op::Sum(a))
    }

    /// Per-row sums, `m x 1`.
    pub fn row_sums(&mut self, a: Var) -> Var {
        let src = self.value(a);
        let value = Matrix::column_vector((0..src.rows()).map(|i| src.row(i).iter().sum()).collect());
        self.push(value, Op::RowSums(a))
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let src = self.value(a);
        let mut value = src.clone();
        for i in 0..src.rows() {
            let s = crate::tensor::softmax(src.row(i));
            value.row_mut(i).copy_from_slice(&s);
        }
        self.push(value, Op::SoftmaxRows(a))
    }

    pub fn log_softmax_rows(&mut self, a: Var) -> Var {
        let src = self.value(a);
        let mut value = src.clone();
        for i in 0..src.rows() {
            let row = src.row(i);
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
            for x in value.row_mut(i) {
                *x -= lse;
            }
        }
        self.push(value, Op::LogSoftmaxRows(a))
    }

    /// Softmax of an `n x 1` column within groups given by `segments[k]`.
    pub fn segment_softmax(&mut self, a: Var, segments: &[usize], n_segments: usize) -> Var {
        let src = self.value(a);
        assert_eq!(src.cols(), 1, "segment_softmax expects a column");
        assert_eq!(src.rows(), segments.len(), "segment length mismatch");
        let mut max = vec![f64::NEG_INFINITY; n_segments];
        for (k, &s) in segments.iter().enumerate() {
            max[s] = max[s].max(src.get(k, 0));
        }
        let exps: Vec<f64> = segments
            .iter()
            .enumerate()
            .map(|(k, &s)| (src.get(k, 0) - max[s]).exp())
            .collect();
        let mut totals = vec![0.0; n_segments];
        for (k, &s) in segments.iter().enumerate() {
            totals[s] += exps[k];
        }
        let value = Matrix::column_vector(
            segments
                .iter()
                .enumerate()
                .map(|(k, &s)| exps[k] / totals[s])
                .collect(),
        );
        self.push(value, Op::SegmentSoftmax(a, segments.to_vec(), n_segments))
    }

    /// Reverse pass from a `1 x 1` output.
    pub fn backward(&self, out: Var) -> Gradients {
        assert_eq!(
            self.value(out).shape(),
            (1, 1),
            "backward expects a scalar output"
        );
        let mut grads: Vec<Option<Matrix>> = vec![None; self.nodes.len()];
        grads[out.0] = Some(Matrix::scalar(1.0));

        for idx in (0..=out.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            self.propagate(&node.op, &node.value, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Gradients {
            grads,
            params: self.param_order.clone(),
        }
    }

    fn propagate(&self, op: &Op, y: &Matrix, g: &Matrix, grads: &mut [Option<Matrix>]) {
        let mut acc = |v: Var, delta: Matrix| match &mut grads[v.0] {
            Some(existing) => existing.add_assign(&delta),
            slot @ None => *slot = Some(delta),
        };
        match op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let av = self.value(*a);
                let bv = self.value(*b);
                acc(*a, g.matmul(&bv.transpose()));
                acc(*b, av.transpose().matmul(g));
            }
            Op::Add(a, b) => {
                acc(*a, g.clone());
                acc(*b, g.clone());
            }
            Op::Sub(a, b) => {
                acc(*a, g.clone());
                acc(*b, g.scale(-1.0));
            }
            Op::Mul(a, b) => {
                acc(*a, g.hadamard(self.value(*b)));
                acc(*b, g.hadamard(self.value(*a)));
            }
            Op::AddRow(a, row) => {
                acc(*a, g.clone());
                let mut r = Matrix::zeros(1, g.cols());
                for i in 0..g.rows() {
                    for (o, x) in r.row_mut(0).iter_mut().zip(g.row(i)) {
                        *o += x;
                    }
                }
                acc(*row, r);
            }
            Op::MulCol(a, col) => {
                let av = self.value(*a);
                let cv = self.value(*col);
                let mut ga = g.clone();
                let mut gc = Matrix::zeros(g.rows(), 1);
                for i in 0..g.rows() {
                    let c = cv.get(i, 0);
                    let mut s = 0.0;
                    for (j, x) in ga.row_mut(i).iter_mut().enumerate() {
                        s += *x * av.get(i, j);
                        *x *= c;
                    }
                    gc.set(i, 0, s);
                }
                acc(*a, ga);
                acc(*col, gc);
            }
            Op::MulScalar(a, s) => {
                let k = self.value(*s).item();
                acc(*a, g.scale(k));
                acc(*s, Matrix::scalar(g.dot(self.value(*a))));
            }
            Op::Scale(a, k) => acc(*a, g.scale(*k)),
            Op::AddConst(a) => acc(*a, g.clone()),
            Op::Sigmoid(a) => acc(*a, g.zip_map(y, |gi, yi| gi * yi * (1.0 - yi))),
            Op::Tanh(a) => acc(*a, g.zip_map(y, |gi, yi| gi * (1.0 - yi * yi))),
            Op::Relu(a) => {
                let x = self.value(*a);
                acc(*a, g.zip_map(x, |gi, xi| if xi > 0.0 { gi } else { 0.0 }));
            }
            Op::Exp(a) => acc(*a, g.hadamard(y)),
            Op::Log(a) => acc(*a, g.zip_map(self.value(*a), |gi, xi| gi / xi)),
            Op::Sqrt(a) => acc(*a, g.zip_map(y, |gi, yi| gi / (2.0 * yi))),
            Op::Transpose(a) => acc(*a, g.transpose()),
            Op::ConcatCols(parts) => {
                let mut off = 0;
                for p in parts {
                    let c = self.value(*p).cols();
                    acc(*p, g.slice_cols(off, c));
                    off += c;
                }
            }
            Op::ConcatRows(parts) => {
                let cols = g.cols();
                let mut off = 0;
                for p in parts {
                    let r = self.value(*p).rows();
                    acc(
                        *p,
                        Matrix::from_vec(r, cols, g.data()[off * cols..(off + r) * cols].to_vec()),
                    );
                    off += r;
                }
            }
            Op::SliceCols(a, start) => {
                let src = self.value(*a);
                let mut ga = Matrix::zeros(src.rows(), src.cols());
                for i in 0..g.rows() {
                    ga.row_mut(i)[*start..*start + g.cols()].copy_from_slice(g.row(i));
                }
                acc(*a, ga);
            }
            Op::SliceRows(a, start) => {
                let src = self.value(*a);
                let mut ga = Matrix::zeros(src.rows(), src.cols());
                let cols = src.cols();
                ga.data_mut()[start * cols..(start + g.rows()) * cols].copy_from_slice(g.data());
                acc(*a, ga);
            }
            Op::GatherRows(a, idx) => {
                let src = self.value(*a);
                let mut ga = Matrix::zeros(src.rows(), src.cols());
                for (i, &t) in idx.iter().enumerate() {
                    for (o, x) in ga.row_mut(t).iter_mut().zip(g.row(i)) {
                        *o += x;
                    }
                }
                acc(*a, ga);
            }
            Op::ScatterRows(a, idx) => acc(*a, g.gather_rows(idx)),
            Op::GatherFlat(a, idx) => {
                let src = self.value(*a);
                let mut ga = Matrix::zeros(src.rows(), src.cols());
                for (k, &t) in idx.iter().enumerate() {
                    ga.data_mut()[t] += g.data()[k];
                }
                acc(*a, ga);
            }
            Op::ScatterFlat(a, idx) => {
                let src = self.value(*a);
                let data = idx.iter().map(|&t| g.data()[t]).collect();
                acc(*a, Matrix::from_vec(src.rows(), src.cols(), data));
            }
            Op::Reshape(a) => {
                let (r, c) = self.value(*a).shape();
                acc(*a, g.reshape(r, c));
            }
            Op::Sum(a) => {
                let (r, c) = self.value(*a).shape();
                acc(*a, Matrix::filled(r, c, g.item()));
            }
            Op::RowSums(a) => {
                let (r, c) = self.value(*a).shape();
                let mut ga = Matrix::zeros(r, c);
                for i in 0..r {
                    let gi = g.get(i, 0);
                    ga.row_mut(i).iter_mut().for_each(|x| *x = gi);
                }
                acc(*a, ga);
            }
            Op::SoftmaxRows(a) => {
                let mut ga = Matrix::zeros(y.rows(), y.cols());
                for i in 0..y.rows() {
                    let dot: f64 = g.row(i).iter().zip(y.row(i)).map(|(a, b)| a * b).sum();
                    for j in 0..y.cols() {
                        ga.set(i, j, y.get(i, j) * (g.get(i, j) - dot));
                    }
                }
                acc(*a, ga);
            }
            Op::LogSoftmaxRows(a) => {
                let mut ga = Matrix::zeros(y.rows(), y.cols());
                for i in 0..y.rows() {
                    let total: f64 = g.row(i).iter().sum();
                    for j in 0..y.cols() {
                        ga.set(i, j, g.get(i, j) - y.get(i, j).exp() * total);
                    }
                }
                acc(*a, ga);
            }
            Op::SegmentSoftmax(a, segments, n) => {
                let mut dots = vec![0.0; *n];
                for (k, &s) in segments.iter().enumerate() {
                    dots[s] += g.get(k, 0) * y.get(k, 0);
                }
                let ga = Matrix::column_vector(
                    segments
                        .iter()
                        .enumerate()
                        .map(|(k, &s)| y.get(k, 0) * (g.get(k, 0) - dots[s]))
                        .collect(),
                );
                acc(*a, ga);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Central-difference check of every op through a scalar objective.
    fn check(build: impl Fn(&mut Graph, &ParamStore) -> Var, store: &mut ParamStore) {
        let mut g = Graph::new();
        let out = build(&mut g, store);
        let grads = g.backward(out);
        let ids: Vec<ParamId> = store.ids().collect();
        for id in ids {
            let analytic = grads.param(id).cloned().unwrap_or_else(|| {
                let (r, c) = store.get(id).shape();
                Matrix::zeros(r, c)
            });
            for k in 0..store.get(id).len() {
                let h = 1e-6;
                let orig = store.get(id).data()[k];
                store.get_mut(id).data_mut()[k] = orig + h;
                let mut gp = Graph::new();
                let op = build(&mut gp, store);
                let fp = gp.value(op).item();
                store.get_mut(id).data_mut()[k] = orig - h;
                let mut gm = Graph::new();
                let om = build(&mut gm, store);
                let fm = gm.value(om).item();
                store.get_mut(id).data_mut()[k] = orig;
                let numeric = (fp - fm) / (2.0 * h);
                let a = analytic.data()[k];
                let denom = a.abs().max(numeric.abs()).max(1e-3);
                assert!(
                    (a - numeric).abs() / denom < 1e-5,
                    "{}[{k}]: analytic {a} numeric {numeric}",
                    store.name(id)
                );
            }
        }
    }

    #[test]
    fn elementwise_and_matrix_ops_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut store = ParamStore::new();
        let a = store.add("a", Matrix::uniform(3, 4, 1.0, &mut rng));
        let b = store.add("b", Matrix::uniform(4, 2, 1.0, &mut rng));
        let r = store.add("r", Matrix::uniform(1, 2, 1.0, &mut rng));
        let c = store.add("c", Matrix::uniform(3, 1, 1.0, &mut rng));
        check(
            |g, s| {
                let a = g.param(s, a);
                let b = g.param(s, b);
                let r = g.param(s, r);
                let c = g.param(s, c);
                let ab = g.matmul(a, b);
                let x = g.add_row(ab, r);
                let x = g.mul_col(x, c);
                let t = g.tanh(x);
                let sg = g.sigmoid(t);
                let sm = g.softmax_rows(sg);
                let ls = g.log_softmax_rows(x);
                let e = g.exp(t);
                let l = g.log(e);
                let q = g.sqrt(sg);
                let tr = g.transpose(q);
                let tt = g.transpose(tr);
                let cat = g.concat_cols(&[sm, ls, l, tt]);
                let rows = g.concat_rows(&[cat, cat]);
                let sl = g.slice_cols(rows, 1, 5);
                let sr = g.slice_rows(sl, 2, 3);
                let ga = g.gather_rows(sr, &[2, 0, 0]);
                let sc = g.scatter_rows(ga, &[1, 1, 3], 4);
                let rs = g.row_sums(sc);
                let sq = g.square(rs);
                let total = g.sum(sq);
                let s1 = g.sum(sc);
                let k = g.mul_scalar(total, s1);
                g.scale(k, 0.5)
            },
            &mut store,
        );
    }

    #[test]
    fn flat_gather_scatter_and_segments_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut store = ParamStore::new();
        let x = store.add("x", Matrix::uniform(1, 6, 1.0, &mut rng));
        let w = store.add("w", Matrix::uniform(6, 1, 1.0, &mut rng));
        check(
            |g, s| {
                let x = g.param(s, x);
                let w = g.param(s, w);
                let win = g.gather_flat(x, &[0, 1, 2, 2, 3, 4, 4, 5, 0], 3, 3);
                let back = g.scatter_flat(win, &[5, 4, 3, 2, 1, 0, 0, 1, 2], 1, 6);
                let rsh = g.reshape(back, 6, 1);
                let m = g.mul(rsh, w);
                let seg = g.segment_softmax(m, &[0, 0, 1, 2, 2, 2], 3);
                let r = g.relu(m);
                let y = g.mul(seg, r);
                let one = g.one_minus(y);
                g.sum(one)
            },
            &mut store,
        );
    }

    #[test]
    fn repeated_param_binding_accumulates() {
        let mut store = ParamStore::new();
        let p = store.add("p", Matrix::scalar(3.0));
        let mut g = Graph::new();
        let a = g.param(&store, p);
        let b = g.param(&store, p);
        assert_eq!(a, b);
        let y = g.mul(a, b);
        let grads = g.backward(y);
        assert_eq!(grads.param(p).unwrap().item(), 6.0);
    }
}
