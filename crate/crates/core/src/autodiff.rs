//! Reverse-mode automatic differentiation over [`Matrix`] values.
//!
//! A [`Tape`] records one forward computation. Parameters live in a
//! [`ParamStore`] that the tape borrows immutably; [`Tape::backward`]
//! accumulates parameter gradients into a [`Grads`] buffer that the optimizer
//! consumes after the tape is dropped.

use serde::{Deserialize, Serialize};

use crate::tensor::Matrix;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ParamId(pub usize);

/// Named parameter tensors.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    tensors: Vec<Matrix>,
    names: Vec<String>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Matrix) -> ParamId {
        self.tensors.push(value);
        self.names.push(name.into());
        ParamId(self.tensors.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Matrix {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Matrix {
        &mut self.tensors[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.tensors.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Matrix)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(|t| t.data().len()).sum()
    }

    pub fn zero_grads(&self) -> Grads {
        Grads {
            tensors: self
                .tensors
                .iter()
                .map(|t| Matrix::zeros(t.rows(), t.cols()))
                .collect(),
        }
    }
}

/// Gradient buffer shaped like a [`ParamStore`].
#[derive(Debug, Clone)]
pub struct Grads {
    tensors: Vec<Matrix>,
}

impl Grads {
    pub fn get(&self, id: ParamId) -> &Matrix {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Matrix {
        &mut self.tensors[id.0]
    }

    pub fn zero(&mut self) {
        self.tensors.iter_mut().for_each(|t| t.fill(0.0));
    }

    pub fn is_finite(&self) -> bool {
        self.tensors.iter().all(Matrix::is_finite)
    }

    pub fn iter(&self) -> impl Iterator<Item = &Matrix> {
        self.tensors.iter()
    }
}

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Const,
    Param(ParamId),
    Gather { param: ParamId, rows: Vec<usize> },
    MatMul(Var, Var),
    MatMulT(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    AddRow(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    ScaleRows(Var, Vec<f64>),
    Silu(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        normed: Matrix,
        rstd: Vec<f64>,
    },
    MaskedSoftmax(Var),
    SliceCols { x: Var, start: usize },
    SelectRows { x: Var, rows: Vec<usize> },
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    SumSquares(Var),
    Sum(Var),
}

struct Node {
    value: Option<Matrix>,
    op: Op,
}

pub struct Tape<'p> {
    params: &'p ParamStore,
    nodes: Vec<Node>,
}

impl<'p> Tape<'p> {
    pub fn new(params: &'p ParamStore) -> Self {
        Tape {
            params,
            nodes: Vec::with_capacity(256),
        }
    }

    pub fn params(&self) -> &'p ParamStore {
        self.params
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Matrix, op: Op) -> Var {
        self.nodes.push(Node {
            value: Some(value),
            op,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Matrix {
        let node = &self.nodes[v.0];
        match (&node.value, &node.op) {
            (Some(m), _) => m,
            (None, Op::Param(id)) => self.params.get(*id),
            _ => unreachable!("node without value"),
        }
    }

    pub fn scalar(&self, v: Var) -> f64 {
        let m = self.value(v);
        debug_assert_eq!(m.shape(), (1, 1));
        m.data()[0]
    }

    pub fn constant(&mut self, value: Matrix) -> Var {
        self.push(value, Op::Const)
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        self.nodes.push(Node {
            value: None,
            op: Op::Param(id),
        });
        Var(self.nodes.len() - 1)
    }

    /// Rows of a parameter matrix; the backward pass scatter-adds into them.
    pub fn gather(&mut self, id: ParamId, rows: &[usize]) -> Var {
        let value = self.params.get(id).select_rows(rows);
        self.push(
            value,
            Op::Gather {
                param: id,
                rows: rows.to_vec(),
            },
        )
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).matmul(self.value(b));
        self.push(v, Op::MatMul(a, b))
    }

    /// `a · bᵀ`
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).matmul_t(self.value(b));
        self.push(v, Op::MatMulT(a, b))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).zip_map(self.value(b), |x, y| x + y);
        self.push(v, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).zip_map(self.value(b), |x, y| x - y);
        self.push(v, Op::Sub(a, b))
    }

    /// Adds the `1×c` row `b` to every row of `a`.
    pub fn add_row(&mut self, a: Var, b: Var) -> Var {
        let (am, bm) = (self.value(a), self.value(b));
        assert_eq!(bm.rows(), 1, "add_row expects a single row");
        assert_eq!(am.cols(), bm.cols(), "add_row width mismatch");
        let mut v = am.clone();
        for r in 0..v.rows() {
            for (x, &y) in v.row_mut(r).iter_mut().zip(bm.row(0)) {
                *x += y;
            }
        }
        self.push(v, Op::AddRow(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).zip_map(self.value(b), |x, y| x * y);
        self.push(v, Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let v = self.value(a).map(|x| x * s);
        self.push(v, Op::Scale(a, s))
    }

    /// Multiplies row `i` of `a` by the constant `weights[i]`.
    pub fn scale_rows(&mut self, a: Var, weights: &[f64]) -> Var {
        let mut v = self.value(a).clone();
        assert_eq!(v.rows(), weights.len(), "one weight per row");
        for (r, &w) in weights.iter().enumerate() {
            v.row_mut(r).iter_mut().for_each(|x| *x *= w);
        }
        self.push(v, Op::ScaleRows(a, weights.to_vec()))
    }

    pub fn silu(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| x * sigmoid(x));
        self.push(v, Op::Silu(a))
    }

    /// Per-row layer normalization with `1×c` gain and bias.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Var {
        const EPS: f64 = 1e-5;
        let xm = self.value(x);
        let (rows, cols) = xm.shape();
        let mut normed = Matrix::zeros(rows, cols);
        let mut rstd = Vec::with_capacity(rows);
        for r in 0..rows {
            let row = xm.row(r);
            let mean = row.iter().sum::<f64>() / cols as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cols as f64;
            let s = 1.0 / (var + EPS).sqrt();
            for (o, &v) in normed.row_mut(r).iter_mut().zip(row) {
                *o = (v - mean) * s;
            }
            rstd.push(s);
        }
        let (g, b) = (self.value(gain), self.value(bias));
        let mut out = normed.clone();
        for r in 0..rows {
            for ((o, &gv), &bv) in out.row_mut(r).iter_mut().zip(g.row(0)).zip(b.row(0)) {
                *o = *o * gv + bv;
            }
        }
        self.push(
            out,
            Op::LayerNorm {
                x,
                gain,
                bias,
                normed,
                rstd,
            },
        )
    }

    /// Row-wise softmax where entry `(i, j)` is masked out when `j > i`
    /// (causal) or when key `j` is flagged in `key_padding`.
    pub fn causal_softmax(&mut self, scores: Var, key_padding: Option<&[bool]>) -> Var {
        let sm = self.value(scores);
        let (rows, cols) = sm.shape();
        let mut out = Matrix::zeros(rows, cols);
        for i in 0..rows {
            let allowed = |j: usize| j <= i && key_padding.is_none_or(|m| !m[j]);
            let row = sm.row(i);
            let mut max = f64::NEG_INFINITY;
            for (j, &s) in row.iter().enumerate() {
                if allowed(j) && s > max {
                    max = s;
                }
            }
            if max == f64::NEG_INFINITY {
                // fully masked query row (a padded position); left at zero
                continue;
            }
            let o = out.row_mut(i);
            let mut total = 0.0;
            for (j, &s) in row.iter().enumerate() {
                if allowed(j) {
                    let e = (s - max).exp();
                    o[j] = e;
                    total += e;
                }
            }
            o.iter_mut().for_each(|v| *v /= total);
        }
        self.push(out, Op::MaskedSoftmax(scores))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Var {
        let xm = self.value(x);
        let mut v = Matrix::zeros(xm.rows(), len);
        for r in 0..xm.rows() {
            v.row_mut(r).copy_from_slice(&xm.row(r)[start..start + len]);
        }
        self.push(v, Op::SliceCols { x, start })
    }

    pub fn select_rows(&mut self, x: Var, rows: &[usize]) -> Var {
        let v = self.value(x).select_rows(rows);
        self.push(
            v,
            Op::SelectRows {
                x,
                rows: rows.to_vec(),
            },
        )
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let rows = self.value(parts[0]).rows();
        let cols: usize = parts.iter().map(|&p| self.value(p).cols()).sum();
        let mut v = Matrix::zeros(rows, cols);
        for r in 0..rows {
            let mut off = 0;
            for &p in parts {
                let pm = self.value(p);
                assert_eq!(pm.rows(), rows, "concat_cols row mismatch");
                v.row_mut(r)[off..off + pm.cols()].copy_from_slice(pm.row(r));
                off += pm.cols();
            }
        }
        self.push(v, Op::ConcatCols(parts.to_vec()))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let cols = self.value(parts[0]).cols();
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let pm = self.value(p);
            assert_eq!(pm.cols(), cols, "concat_rows col mismatch");
            data.extend_from_slice(pm.data());
            rows += pm.rows();
        }
        self.push(Matrix::from_vec(rows, cols, data), Op::ConcatRows(parts.to_vec()))
    }

    /// Sum of squared entries as a `1×1` node.
    pub fn sum_squares(&mut self, x: Var) -> Var {
        let s = self.value(x).sum_squares();
        self.push(Matrix::from_vec(1, 1, vec![s]), Op::SumSquares(x))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).sum();
        self.push(Matrix::from_vec(1, 1, vec![s]), Op::Sum(x))
    }

    /// `x · W + b` for a `rows×in` input.
    pub fn linear(&mut self, x: Var, weight: ParamId, bias: ParamId) -> Var {
        let w = self.param(weight);
        let b = self.param(bias);
        let xw = self.matmul(x, w);
        self.add_row(xw, b)
    }

    /// Back-propagates from the scalar `loss`, accumulating into `grads`.
    pub fn backward(&self, loss: Var, grads: &mut Grads) {
        assert_eq!(self.value(loss).shape(), (1, 1), "loss must be scalar");
        let mut adj: Vec<Option<Matrix>> = (0..self.nodes.len()).map(|_| None).collect();
        adj[loss.0] = Some(Matrix::filled(1, 1, 1.0));

        for idx in (0..=loss.0).rev() {
            let Some(g) = adj[idx].take() else { continue };
            match &self.nodes[idx].op {
                Op::Const => {}
                Op::Param(id) => grads.get_mut(*id).add_assign(&g),
                Op::Gather { param, rows } => {
                    let target = grads.get_mut(*param);
                    for (i, &r) in rows.iter().enumerate() {
                        for (t, &v) in target.row_mut(r).iter_mut().zip(g.row(i)) {
                            *t += v;
                        }
                    }
                }
                Op::MatMul(a, b) => {
                    let ga = g.matmul_t(self.value(*b));
                    let gb = self.value(*a).t_matmul(&g);
                    accumulate(&mut adj, *a, ga);
                    accumulate(&mut adj, *b, gb);
                }
                Op::MatMulT(a, b) => {
                    // out = a·bᵀ ; da = g·b ; db = gᵀ·a
                    let ga = g.matmul(self.value(*b));
                    let gb = g.t_matmul(self.value(*a));
                    accumulate(&mut adj, *a, ga);
                    accumulate(&mut adj, *b, gb);
                }
                Op::Add(a, b) => {
                    accumulate(&mut adj, *b, g.clone());
                    accumulate(&mut adj, *a, g);
                }
                Op::Sub(a, b) => {
                    accumulate(&mut adj, *b, g.map(|x| -x));
                    accumulate(&mut adj, *a, g);
                }
                Op::AddRow(a, b) => {
                    let mut gb = Matrix::zeros(1, g.cols());
                    for r in 0..g.rows() {
                        for (t, &v) in gb.row_mut(0).iter_mut().zip(g.row(r)) {
                            *t += v;
                        }
                    }
                    accumulate(&mut adj, *b, gb);
                    accumulate(&mut adj, *a, g);
                }
                Op::Mul(a, b) => {
                    let ga = g.zip_map(self.value(*b), |x, y| x * y);
                    let gb = g.zip_map(self.value(*a), |x, y| x * y);
                    accumulate(&mut adj, *a, ga);
                    accumulate(&mut adj, *b, gb);
                }
                Op::Scale(a, s) => accumulate(&mut adj, *a, g.map(|x| x * s)),
                Op::ScaleRows(a, w) => {
                    let mut ga = g;
                    for (r, &wr) in w.iter().enumerate() {
                        ga.row_mut(r).iter_mut().for_each(|x| *x *= wr);
                    }
                    accumulate(&mut adj, *a, ga);
                }
                Op::Silu(a) => {
                    let ga = g.zip_map(self.value(*a), |gv, x| {
                        let s = sigmoid(x);
                        gv * (s + x * s * (1.0 - s))
                    });
                    accumulate(&mut adj, *a, ga);
                }
                Op::LayerNorm {
                    x,
                    gain,
                    bias,
                    normed,
                    rstd,
                } => {
                    let gm = self.value(*gain);
                    let (rows, cols) = g.shape();
                    let mut ggain = Matrix::zeros(1, cols);
                    let mut gbias = Matrix::zeros(1, cols);
                    let mut gx = Matrix::zeros(rows, cols);
                    let n = cols as f64;
                    for r in 0..rows {
                        let gr = g.row(r);
                        let nr = normed.row(r);
                        let mut dn = vec![0.0; cols];
                        for c in 0..cols {
                            ggain.row_mut(0)[c] += gr[c] * nr[c];
                            gbias.row_mut(0)[c] += gr[c];
                            dn[c] = gr[c] * gm.row(0)[c];
                        }
                        let mean_dn = dn.iter().sum::<f64>() / n;
                        let mean_dn_n = dn.iter().zip(nr).map(|(a, b)| a * b).sum::<f64>() / n;
                        for (c, o) in gx.row_mut(r).iter_mut().enumerate() {
                            *o = rstd[r] * (dn[c] - mean_dn - nr[c] * mean_dn_n);
                        }
                    }
                    accumulate(&mut adj, *gain, ggain);
                    accumulate(&mut adj, *bias, gbias);
                    accumulate(&mut adj, *x, gx);
                }
                Op::MaskedSoftmax(a) => {
                    let y = self.nodes[idx].value.as_ref().expect("softmax value");
                    let mut ga = Matrix::zeros(y.rows(), y.cols());
                    for r in 0..y.rows() {
                        let yr = y.row(r);
                        let gr = g.row(r);
                        let inner: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                        for (c, o) in ga.row_mut(r).iter_mut().enumerate() {
                            *o = yr[c] * (gr[c] - inner);
                        }
                    }
                    accumulate(&mut adj, *a, ga);
                }
                Op::SliceCols { x, start } => {
                    let xm = self.value(*x);
                    let mut gx = Matrix::zeros(xm.rows(), xm.cols());
                    for r in 0..g.rows() {
                        gx.row_mut(r)[*start..*start + g.cols()].copy_from_slice(g.row(r));
                    }
                    accumulate(&mut adj, *x, gx);
                }
                Op::SelectRows { x, rows } => {
                    let xm = self.value(*x);
                    let mut gx = Matrix::zeros(xm.rows(), xm.cols());
                    for (i, &r) in rows.iter().enumerate() {
                        for (t, &v) in gx.row_mut(r).iter_mut().zip(g.row(i)) {
                            *t += v;
                        }
                    }
                    accumulate(&mut adj, *x, gx);
                }
                Op::ConcatCols(parts) => {
                    let mut off = 0;
                    for &p in parts {
                        let w = self.value(p).cols();
                        let mut gp = Matrix::zeros(g.rows(), w);
                        for r in 0..g.rows() {
                            gp.row_mut(r).copy_from_slice(&g.row(r)[off..off + w]);
                        }
                        off += w;
                        accumulate(&mut adj, p, gp);
                    }
                }
                Op::ConcatRows(parts) => {
                    let mut off = 0;
                    for &p in parts {
                        let h = self.value(p).rows();
                        let cols = g.cols();
                        let gp = Matrix::from_vec(
                            h,
                            cols,
                            g.data()[off * cols..(off + h) * cols].to_vec(),
                        );
                        off += h;
                        accumulate(&mut adj, p, gp);
                    }
                }
                Op::SumSquares(a) => {
                    let s = g.data()[0];
                    let ga = self.value(*a).map(|x| 2.0 * s * x);
                    accumulate(&mut adj, *a, ga);
                }
                Op::Sum(a) => {
                    let s = g.data()[0];
                    let am = self.value(*a);
                    accumulate(&mut adj, *a, Matrix::filled(am.rows(), am.cols(), s));
                }
            }
        }
    }
}

fn accumulate(adj: &mut [Option<Matrix>], v: Var, g: Matrix) {
    match &mut adj[v.0] {
        Some(existing) => existing.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Central finite-difference check of every parameter entry.
    fn check_grads(store: &mut ParamStore, f: impl Fn(&mut Tape) -> Var) {
        let analytic = {
            let mut tape = Tape::new(store);
            let loss = f(&mut tape);
            let mut grads = store.zero_grads();
            tape.backward(loss, &mut grads);
            grads
        };
        let h = 1e-6;
        for id in store.ids().collect::<Vec<_>>() {
            let n = store.get(id).data().len();
            for k in 0..n {
                let orig = store.get(id).data()[k];
                store.get_mut(id).data_mut()[k] = orig + h;
                let plus = {
                    let mut t = Tape::new(store);
                    let l = f(&mut t);
                    t.scalar(l)
                };
                store.get_mut(id).data_mut()[k] = orig - h;
                let minus = {
                    let mut t = Tape::new(store);
                    let l = f(&mut t);
                    t.scalar(l)
                };
                store.get_mut(id).data_mut()[k] = orig;
                let numeric = (plus - minus) / (2.0 * h);
                let a = analytic.get(id).data()[k];
                assert!(
                    (a - numeric).abs() <= 1e-6 * (1.0 + a.abs().max(numeric.abs())),
                    "{}[{k}]: analytic {a} vs numeric {numeric}",
                    store.name(id)
                );
            }
        }
    }

    fn filled(rows: usize, cols: usize, seed: f64) -> Matrix {
        Matrix::from_vec(
            rows,
            cols,
            (0..rows * cols)
                .map(|i| ((i as f64 + 1.0) * seed).sin())
                .collect(),
        )
    }

    #[test]
    fn every_op_matches_finite_differences() {
        let mut store = ParamStore::new();
        let x = store.add("x", filled(3, 4, 0.7));
        let w = store.add("w", filled(4, 4, 1.3));
        let b = store.add("b", filled(1, 4, 0.4));
        let g = store.add("gain", filled(1, 4, 2.1));
        let table = store.add("table", filled(5, 4, 0.9));
        check_grads(&mut store, |t| {
            let xv = t.gather(x, &[0, 1, 2]);
            let e = t.gather(table, &[4, 1, 4]);
            let xs = t.scale_rows(e, &[0.5, 1.5, 1.0]);
            let xx = t.add(xv, xs);
            let h = t.linear(xx, w, b);
            let gv = t.param(g);
            let bv = t.param(b);
            let n = t.layer_norm(h, gv, bv);
            let s = t.silu(n);
            let q = t.slice_cols(s, 0, 2);
            let k = t.slice_cols(s, 2, 2);
            let sc = t.matmul_t(q, k);
            let sc = t.scale(sc, 0.7);
            let att = t.causal_softmax(sc, Some(&[false, false, true]));
            let o = t.matmul(att, k);
            let c = t.concat_cols(&[o, q]);
            let r = t.concat_rows(&[c, c]);
            let sel = t.select_rows(r, &[0, 3, 5]);
            let d = t.sub(sel, xv);
            let m = t.mul(d, sel);
            let ss = t.sum_squares(m);
            let su = t.sum(m);
            t.add(ss, su)
        });
    }

    #[test]
    fn causal_softmax_rows_sum_to_one_over_allowed() {
        let store = ParamStore::new();
        let mut t = Tape::new(&store);
        let s = t.constant(Matrix::from_vec(3, 3, vec![1.0, 9.0, 9.0, 0.5, 0.2, 9.0, 0.1, 0.2, 0.3]));
        let a = t.causal_softmax(s, None);
        let m = t.value(a);
        assert_eq!(m.row(0), &[1.0, 0.0, 0.0]);
        assert_eq!(m.get(1, 2), 0.0);
        for r in 0..3 {
            assert!((m.row(r).iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }
}
